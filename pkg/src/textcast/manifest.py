"""Run manifests: flat key=value records of each run's fully-resolved
configuration, seeds, checkpoint digests, the prompt template hash, and an
audit trail of every data file the run read. Two runs with identical inputs
produce identical manifests except for the timestamp line.
"""

from __future__ import annotations

import hashlib
import time
from pathlib import Path


def prompt_template_hash() -> str:
    from .codec import PROMPT_TEMPLATE

    return hashlib.sha256(PROMPT_TEMPLATE.encode()).hexdigest()


class RunManifest:
    def __init__(self, command: str):
        from .codec import PROMPT_TEMPLATE

        self._entries: list[tuple[str, str]] = []
        self.add("command", command)
        self.add("prompt_template", PROMPT_TEMPLATE)
        self.add("prompt_template_sha256", prompt_template_hash())

    def add(self, key: str, value) -> None:
        text = str(value)
        if "\n" in text:
            raise ValueError(f"manifest value for {key!r} must be single-line")
        self._entries.append((key, text))

    def add_config(self, prefix: str, mapping: dict) -> None:
        for key in sorted(mapping):
            self.add(f"{prefix}.{key}", mapping[key])

    def record_read(self, path: str) -> None:
        self.add("read", path)

    @property
    def reads(self) -> list[str]:
        return [v for k, v in self._entries if k == "read"]

    def lines(self, timestamp: bool = True) -> list[str]:
        out = [f"{k}={v}" for k, v in self._entries]
        if timestamp:
            out.append(f"timestamp={time.strftime('%Y-%m-%dT%H:%M:%S')}")
        return out

    def write(self, path: str | Path, timestamp: bool = True) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines(timestamp)) + "\n", encoding="utf-8")
        return path


def read_manifest(path: str | Path) -> dict[str, list[str]]:
    """Parse back to key -> list of values (keys may repeat, e.g. ``read``)."""
    out: dict[str, list[str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out.setdefault(key, []).append(value)
    return out
