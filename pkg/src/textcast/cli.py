"""Command-line entry point tying the pipeline together.

Subcommands: synth, prepare, pretrain, finetune, evaluate, gradcheck.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every run writes its fully-resolved configuration into a run manifest; a
lock file per output directory prevents concurrent writers.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

DATA_ROOT_ENV = "TEXTCAST_DATA_ROOT"


class UsageError(RuntimeError):
    pass


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {out_dir} is locked by another run (remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve(args: argparse.Namespace, file_cfg: dict[str, str], key: str, default, cast):
    """Precedence: explicit flag > config file > default."""
    flag_val = getattr(args, key, None)
    if flag_val is not None:
        return flag_val
    if key in file_cfg:
        return cast(file_cfg[key])
    return default


def _data_root(args) -> Path:
    if getattr(args, "data_dir", None):
        return Path(args.data_dir)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path("data")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import save_series
    from .synthetic import FAMILY_SPECS, generate_family

    if args.family not in FAMILY_SPECS:
        print(f"unknown family {args.family!r}; candidates: {', '.join(sorted(FAMILY_SPECS))}",
              file=sys.stderr)
        return EXIT_USAGE
    series = generate_family(args.family, args.series, args.seed, length=args.length)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_series(out, series)
    print(f"wrote {len(series)} {args.family} series to {out}")
    return EXIT_OK


def _dataset_entry(name):
    from .data import REGISTRY
    from .synthetic import FAMILY_SPECS, registry_entry

    if name in REGISTRY:
        return REGISTRY[name]
    if name in FAMILY_SPECS:
        return registry_entry(name)
    return None


def cmd_prepare(args) -> int:
    from .data import (
        REGISTRY,
        SPLIT_LEAVE_ONE_OUT,
        SPLIT_TAIL_COUNT,
        SPLIT_TAIL_FRACTION,
        load_series,
        make_windows,
        mitigate_anomalies,
        save_window_manifest,
        save_windows,
        split_leave_one_out,
        split_tail,
    )
    from .manifest import RunManifest
    from .synthetic import FAMILY_SPECS

    data_root = _data_root(args)
    out_dir = Path(args.out_dir)
    names = args.datasets.split(",")
    known = sorted(set(REGISTRY) | set(FAMILY_SPECS))
    for name in names:
        if _dataset_entry(name) is None:
            print(f"unknown dataset {name!r}; candidates: {', '.join(known)}", file=sys.stderr)
            return EXIT_USAGE

    manifest = RunManifest("prepare")
    manifest.add("data_root", data_root)
    manifest.add("mad_k", args.mad_k)
    manifest.add("mitigate", not args.no_mitigate)
    manifest.add("zero_shot", args.zero_shot)
    rows = []
    with output_lock(out_dir):
        for name in names:
            entry = _dataset_entry(name)
            series_file = data_root / f"{name}.tsv"
            if not series_file.is_file():
                print(f"series file missing: {series_file}", file=sys.stderr)
                return EXIT_RUNTIME
            series = load_series(series_file, audit=manifest.record_read)
            if args.no_mitigate:
                mitigated = series
            else:
                mitigated = [mitigate_anomalies(s, args.mad_k) for s in series]
            windows = []
            for s in mitigated:
                windows.extend(make_windows(s, entry.spec))
            if entry.split == SPLIT_LEAVE_ONE_OUT:
                train, test = split_leave_one_out(windows)
                if args.zero_shot:
                    train = []
            elif entry.split == SPLIT_TAIL_FRACTION:
                train, test = split_tail(windows, fraction=entry.split_arg,
                                         zero_shot=args.zero_shot)
            elif entry.split == SPLIT_TAIL_COUNT:
                train, test = split_tail(windows, count=int(entry.split_arg),
                                         zero_shot=args.zero_shot)
            else:
                raise RuntimeError(f"unhandled split {entry.split}")
            save_windows(out_dir / f"{name}.train.tsv", train)
            save_windows(out_dir / f"{name}.test.tsv", test)
            save_window_manifest(out_dir / f"{name}.train.manifest.tsv", train,
                                 entry.spec, "train")
            save_window_manifest(out_dir / f"{name}.test.manifest.tsv", test,
                                 entry.spec, "test")
            rows.append((name, len(series), len(train), len(test),
                         entry.spec.input_size, entry.spec.horizon))
            manifest.add_config(f"dataset.{name}", {
                "n": entry.spec.input_size, "h": entry.spec.horizon,
                "split": entry.split, "n_train": len(train), "n_test": len(test),
            })
        manifest.write(out_dir / "prepare.manifest", timestamp=False)

    print(f"{'dataset':<20}{'series':>8}{'train':>8}{'test':>8}{'n':>6}{'h':>6}")
    for name, ns, ntr, nte, n, h in rows:
        print(f"{name:<20}{ns:>8}{ntr:>8}{nte:>8}{n:>6}{h:>6}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .manifest import RunManifest
    from .model import ModelConfig, weights_digest
    from .tokenizer import default_vocabulary
    from .train import CorpusConfig, TrainConfig, pretrain_tiny

    file_cfg = load_config_file(args.config)
    iters = resolve(args, file_cfg, "iters", 2000, int)
    if iters < 1:
        print("nothing to train: --iters must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    vocab = default_vocabulary()
    model_cfg = ModelConfig(
        vocab_size=len(vocab),
        n_layers=resolve(args, file_cfg, "layers", 4, int),
        n_heads=resolve(args, file_cfg, "heads", 4, int),
        d_model=resolve(args, file_cfg, "d_model", 128, int),
        d_ff=resolve(args, file_cfg, "d_ff", 384, int),
        max_context=resolve(args, file_cfg, "max_context", 256, int),
    )
    train_cfg = TrainConfig(
        learning_rate=resolve(args, file_cfg, "lr", 3e-3, float),
        batch_size=resolve(args, file_cfg, "batch", 8, int),
        micro_batch=resolve(args, file_cfg, "micro_bs", 2, int),
        max_iterations=iters,
        seed=resolve(args, file_cfg, "seed", 0, int),
    )
    corpus = CorpusConfig(
        series_per_family=resolve(args, file_cfg, "series_per_family", 40, int),
        seed=resolve(args, file_cfg, "corpus_seed", 11, int),
    )
    dtype = np.float32 if resolve(args, file_cfg, "dtype", "float32", str) == "float32" else np.float64

    out_dir = Path(args.out_dir)
    with output_lock(out_dir):
        manifest = RunManifest("pretrain")
        manifest.add_config("model", model_cfg.__dict__)
        manifest.add_config("train", train_cfg.__dict__)
        manifest.add_config("corpus", {
            "families": ",".join(corpus.resolved_families()),
            "series_per_family": corpus.series_per_family, "seed": corpus.seed,
        })
        weights, result, ckpt = pretrain_tiny(
            model_cfg, train_cfg, corpus, out_dir, vocab=vocab, dtype=dtype,
            log_every=args.log_every,
        )
        manifest.add("checkpoint", ckpt)
        manifest.add("checkpoint_digest", weights_digest(weights))
        manifest.add("final_loss", repr(result.final_loss))
        manifest.write(out_dir / "pretrain.manifest")
    print(f"pretrained {iters} iterations; final loss {result.final_loss:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .lora import LoraConfig
    from .manifest import RunManifest
    from .model import weights_digest
    from .tokenizer import default_vocabulary
    from .train import TrainConfig, finetune_lora
    from .data import load_windows

    file_cfg = load_config_file(args.config)
    lora_cfg = LoraConfig(
        rank=resolve(args, file_cfg, "rank", 8, int),
        alpha=resolve(args, file_cfg, "alpha", 16.0, float),
        dropout=resolve(args, file_cfg, "lora_dropout", 0.05, float),
    )
    train_cfg = TrainConfig(
        learning_rate=resolve(args, file_cfg, "lr", 3e-4, float),
        batch_size=resolve(args, file_cfg, "batch", 128, int),
        micro_batch=resolve(args, file_cfg, "micro_bs", 2, int),
        max_iterations=resolve(args, file_cfg, "iters", 2000, int),
        seed=resolve(args, file_cfg, "seed", 0, int),
    )
    out_dir = Path(args.out_dir)
    manifest = RunManifest("finetune")
    manifest.add("base", args.base)
    manifest.add_config("lora", {
        "rank": lora_cfg.rank, "alpha": lora_cfg.alpha,
        "dropout": lora_cfg.dropout, "targets": ",".join(lora_cfg.targets),
        "scale": lora_cfg.scale,
    })
    manifest.add_config("train", train_cfg.__dict__)

    windows = []
    vocab = default_vocabulary()
    with output_lock(out_dir):
        for path in args.windows.split(","):
            windows.extend(load_windows(path, audit=manifest.record_read))
        weights, result, adapter_path = finetune_lora(
            args.base, windows, lora_cfg, train_cfg, out_dir,
            vocab=vocab, merge=args.merge, log_every=args.log_every,
        )
        manifest.add("adapters", adapter_path)
        manifest.add("base_digest", weights_digest(weights))
        manifest.add("final_loss", repr(result.final_loss))
        if args.merge:
            manifest.add("merged", out_dir / "merged")
        manifest.write(out_dir / "finetune.manifest")
    print(f"fine-tuned {train_cfg.max_iterations} iterations; final loss "
          f"{result.final_loss:.4f}; adapters {adapter_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import load_windows
    from .evaluate import forecast_rows, predict_batch, report, score_dataset
    from .lora import load_adapters
    from .manifest import RunManifest
    from .model import GenerationConfig, load_model, weights_digest
    from .tokenizer import default_vocabulary

    file_cfg = load_config_file(args.config)
    temperatures = [float(t) for t in resolve(args, file_cfg, "temperature", "10,20", str).split(",")]
    out_dir = Path(args.out_dir)
    vocab = default_vocabulary()

    manifest = RunManifest("evaluate")
    manifest.add("model", args.model)
    manifest.add("greedy", args.greedy)
    manifest.add("zero_shot", args.zero_shot)
    manifest.add("horizon_pad", not args.no_horizon_pad)

    with output_lock(out_dir):
        weights = load_model(args.model)
        manifest.add("model_digest", weights_digest(weights))
        if args.adapters:
            load_adapters(args.adapters, weights)
            manifest.add("adapters", args.adapters)

        window_files = args.windows.split(",")
        if args.zero_shot:
            for path in window_files:
                if "train" in Path(path).name:
                    print(f"zero-shot evaluation refuses train partition {path}", file=sys.stderr)
                    return EXIT_USAGE

        gen_variants = (
            [("greedy", GenerationConfig(greedy=True, max_new_tokens=args.max_new_tokens,
                                         seed=args.seed))]
            if args.greedy else
            [(f"T={t:g}", GenerationConfig(temperature=t, max_new_tokens=args.max_new_tokens,
                                           seed=args.seed))
             for t in temperatures]
        )

        rows = []
        audits = {}
        for path in window_files:
            windows = load_windows(path, audit=manifest.record_read)
            name = Path(path).name.replace(".tsv", "")
            for tag, gen in gen_variants:
                results = predict_batch(weights, windows, gen, vocab,
                                        horizon_pad=not args.no_horizon_pad)
                metrics = score_dataset(f"{name}[{tag}]", windows, results)
                rows.append(metrics)
                audits[metrics.name] = list(zip(windows, results))
                (out_dir / f"forecasts.{name}.{tag.replace('=', '')}.tsv").write_text(
                    "\n".join(forecast_rows(windows, results)) + "\n", encoding="utf-8")
        rep = report(rows, out_dir=out_dir, audits=audits)
        manifest.add_config("result", {
            "avg_rmse": repr(rep.avg_rmse), "avg_smape": repr(rep.avg_smape),
            "avg_missing_rate": repr(rep.avg_missing_rate),
        })
        manifest.write(out_dir / "evaluate.manifest")

    print(f"{'dataset':<36}{'n_test':>7}{'MR%':>9}{'RMSE':>12}{'SMAPE':>9}")
    for m in rows:
        print(f"{m.name:<36}{m.n_test:>7}{m.missing_rate:>9.3f}{m.rmse:>12.4f}{m.smape:>9.4f}")
    print(f"{'avg of avgs':<36}{'':>7}{rep.avg_missing_rate:>9.3f}"
          f"{rep.avg_rmse:>12.4f}{rep.avg_smape:>9.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run

    t0 = time.time()
    results, ok = run(seed=args.seed)
    print(f"{'operation':<16}{'max rel err':>14}")
    for name, err in results.items():
        print(f"{name:<16}{err:>14.3e}")
    print(f"{'PASS' if ok else 'FAIL'} (tolerance 1e-3, {time.time() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textcast",
        description="prompt-based time-series forecasting with a miniature language model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic series file")
    p.add_argument("--family", required=True)
    p.add_argument("--series", type=int, default=60)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="mitigate, window, and split datasets")
    p.add_argument("--data-dir", default=None,
                   help=f"series file directory (default ${DATA_ROOT_ENV} or ./data)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--datasets", required=True, help="comma-separated registry names")
    p.add_argument("--mad-k", type=float, default=3.0)
    p.add_argument("--no-mitigate", action="store_true",
                   help="skip anomaly clamping (for already-clean series)")
    p.add_argument("--zero-shot", action="store_true", help="emit no train partitions")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="train the miniature base model on synthetic series")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    for flag, typ in [("--iters", int), ("--batch", int), ("--micro-bs", int),
                      ("--lr", float), ("--seed", int), ("--layers", int), ("--heads", int),
                      ("--d-model", int), ("--d-ff", int), ("--max-context", int),
                      ("--series-per-family", int), ("--corpus-seed", int)]:
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--dtype", choices=["float32", "float64"], default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train low-rank adapters on window files")
    p.add_argument("--base", required=True, help="base model checkpoint directory")
    p.add_argument("--windows", required=True, help="comma-separated train window files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    for flag, typ in [("--rank", int), ("--alpha", float), ("--lora-dropout", float),
                      ("--lr", float), ("--batch", int), ("--micro-bs", int),
                      ("--iters", int), ("--seed", int)]:
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--merge", action="store_true", help="also write a merged checkpoint")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="forecast test windows and report metrics")
    p.add_argument("--model", required=True, help="model checkpoint directory")
    p.add_argument("--adapters", default=None, help="adapter checkpoint directory")
    p.add_argument("--windows", required=True, help="comma-separated test window files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--temperature", default=None, help="comma-separated sampling temperatures")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new-tokens", type=int, default=96)
    p.add_argument("--no-horizon-pad", action="store_true",
                   help="disable the ask-one-extra-value mitigation")
    p.add_argument("--zero-shot", action="store_true",
                   help="refuse to read any train partition")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - single CLI failure boundary
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
