"""Checkpoint storage: a plain-text manifest naming tensors, shapes, dtypes
and byte offsets, next to a raw little-endian data blob. The same format
carries base weights, merged weights, and adapter weights; the manifest
records a blob digest so corruption is detected at load time.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1"
MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "weights.blob"

_DTYPE_CODES = {"float64": "<f8", "float32": "<f4"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    pass


def tensor_digest(named: dict[str, np.ndarray]) -> str:
    """Order-sensitive digest over names and raw little-endian bytes."""
    h = hashlib.sha256()
    for name, arr in named.items():
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob_parts: list[bytes] = []
    lines = [f"format_version {FORMAT_VERSION}"]
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value:
            raise CheckpointError(f"meta value for {key!r} must be single-line")
        lines.append(f"meta {key} {value}")
    offset = 0
    for name, arr in tensors.items():
        if arr.dtype.name not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        code = _DTYPE_CODES[arr.dtype.name]
        raw = np.ascontiguousarray(arr).astype(code).tobytes()
        shape = "x".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {code} {shape} {offset} {len(raw)}")
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)
    lines.append(f"blob_sha256 {hashlib.sha256(blob).hexdigest()}")
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    manifest = path / MANIFEST_NAME
    blob_file = path / BLOB_NAME
    if not manifest.is_file() or not blob_file.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = blob_file.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    declared_digest = None
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"format_version {FORMAT_VERSION}":
        raise CheckpointError(f"unsupported checkpoint format in {manifest}")
    for line in lines[1:]:
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, code, shape_s, offset_s, nbytes_s = rest.split(" ")
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code}")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            offset, nbytes = int(offset_s), int(nbytes_s)
            raw = blob[offset:offset + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"blob truncated reading tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype=code).reshape(shape).copy()
        elif kind == "blob_sha256":
            declared_digest = rest
        else:
            raise CheckpointError(f"unknown manifest line kind {kind!r}")
    if declared_digest is None:
        raise CheckpointError("manifest missing blob digest")
    actual = hashlib.sha256(blob).hexdigest()
    if actual != declared_digest:
        raise CheckpointError(f"blob digest mismatch: manifest {declared_digest}, file {actual}")
    return tensors, meta
