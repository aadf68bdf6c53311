"""Low-rank adapters for attention projections.

An adapter adds scale * (B @ A) on top of a frozen base weight. B starts at
zero, so injection is an exact no-op until training moves it; merging folds
the product back into a plain weight so inference pays nothing extra.

Base weights are stored input-by-output (y = x @ W), so the adapter path is
computed as (x @ A^T) @ B^T with A of shape (rank, in) and B (out, rank).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import DecoderWeights, weights_digest
from .tensor import Tensor, add, dropout_apply, matmul, scale as scale_op, transpose

TARGET_SLOTS = {"query": "wq", "key": "wk", "value": "wv", "output": "wo"}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ("query", "value")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for t in self.targets:
            if t not in TARGET_SLOTS:
                raise ValueError(f"unknown adapter target {t!r}; known: {sorted(TARGET_SLOTS)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraAdapter:
    __slots__ = ("a", "b", "scale", "dropout")

    def __init__(self, a: Tensor, b: Tensor, scale: float, dropout: float):
        self.a = a
        self.b = b
        self.scale = scale
        self.dropout = dropout


class LoraLinear:
    """Projection wrapper: frozen base product plus the scaled low-rank
    path. Dropout applies to the adapter-path input in training mode only."""

    __slots__ = ("base", "adapter")

    def __init__(self, base: Tensor, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return lora_forward(x, self.base, self.adapter, training=training, rng=rng)


def lora_init(base: Tensor, config: LoraConfig, rng: np.random.Generator) -> LoraAdapter:
    """Fresh adapter for a (in, out) base weight: A gaussian with std 1/rank,
    B exactly zero, so the initial delta is exactly zero."""
    if base.data.ndim != 2:
        raise ValueError("adapters attach to 2-D weights")
    k, d = base.data.shape
    if config.rank >= min(k, d) / 2:
        raise ValueError(
            f"rank {config.rank} too large for a {k}x{d} weight; need rank < min/2"
        )
    dtype = base.data.dtype
    a = Tensor(rng.normal(0.0, 1.0 / config.rank, (config.rank, k)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros((d, config.rank), dtype=dtype), requires_grad=True)
    return LoraAdapter(a, b, config.scale, config.dropout)


def lora_forward(x: Tensor, base: Tensor, adapter: LoraAdapter,
                 training: bool = False, rng=None) -> Tensor:
    main = matmul(x, base)
    path_in = x
    if training and adapter.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode adapter forward needs an rng for dropout")
        path_in = dropout_apply(path_in, adapter.dropout, rng, training=True)
    delta = matmul(matmul(path_in, transpose(adapter.a)), transpose(adapter.b))
    return add(main, scale_op(delta, adapter.scale))


def lora_merge(base: Tensor, adapter: LoraAdapter) -> np.ndarray:
    """Fold the adapter into a plain weight: base + scale * (B @ A), mapped
    into the base's (in, out) storage orientation."""
    return base.data + adapter.scale * (adapter.b.data @ adapter.a.data).T


def trainable_parameter_count(adapter: LoraAdapter) -> int:
    return adapter.a.data.size + adapter.b.data.size


def inject(weights: DecoderWeights, config: LoraConfig, rng: np.random.Generator) -> dict[str, LoraAdapter]:
    """Wrap the target projections of every layer with fresh adapters and
    return them keyed by parameter path. All other weights stay untouched."""
    adapters: dict[str, LoraAdapter] = {}
    for i, layer in enumerate(weights.layers):
        for target in config.targets:
            slot = TARGET_SLOTS[target]
            base = getattr(layer, slot)
            if isinstance(base, LoraLinear):
                raise ValueError(f"layers.{i}.{slot} already has an adapter")
            adapter = lora_init(base, config, rng)
            setattr(layer, slot, LoraLinear(base, adapter))
            adapters[f"layers.{i}.{slot}"] = adapter
    return adapters


def adapter_parameters(adapters: dict[str, LoraAdapter]) -> list[Tensor]:
    params: list[Tensor] = []
    for name in sorted(adapters):
        params.append(adapters[name].a)
        params.append(adapters[name].b)
    return params


def collect_adapters(weights: DecoderWeights) -> dict[str, LoraAdapter]:
    found: dict[str, LoraAdapter] = {}
    for i, layer in enumerate(weights.layers):
        for slot in ("wq", "wk", "wv", "wo"):
            proj = getattr(layer, slot)
            if isinstance(proj, LoraLinear):
                found[f"layers.{i}.{slot}"] = proj.adapter
    return found


def freeze_base(weights: DecoderWeights) -> None:
    for tensor in weights.named_base_parameters().values():
        tensor.requires_grad = False


def unfreeze_base(weights: DecoderWeights) -> None:
    for tensor in weights.named_base_parameters().values():
        tensor.requires_grad = True


def strip_adapters(weights: DecoderWeights) -> None:
    """Remove adapters, restoring plain base projections."""
    for layer in weights.layers:
        for slot in ("wq", "wk", "wv", "wo"):
            proj = getattr(layer, slot)
            if isinstance(proj, LoraLinear):
                setattr(layer, slot, proj.base)


def merge_adapters(weights: DecoderWeights) -> DecoderWeights:
    """New plain-weight model equal to the adapted one in eval mode."""
    from .model import LayerWeights

    merged_layers = []
    for layer in weights.layers:
        fields = {}
        for slot in ("wq", "wk", "wv", "wo"):
            proj = getattr(layer, slot)
            if isinstance(proj, LoraLinear):
                fields[slot] = Tensor(lora_merge(proj.base, proj.adapter), requires_grad=True)
            else:
                fields[slot] = Tensor(proj.data.copy(), requires_grad=True)
        merged_layers.append(LayerWeights(
            wq=fields["wq"], wk=fields["wk"], wv=fields["wv"], wo=fields["wo"],
            w_gate=Tensor(layer.w_gate.data.copy(), requires_grad=True),
            w_up=Tensor(layer.w_up.data.copy(), requires_grad=True),
            w_down=Tensor(layer.w_down.data.copy(), requires_grad=True),
            attn_gain=Tensor(layer.attn_gain.data.copy(), requires_grad=True),
            ffn_gain=Tensor(layer.ffn_gain.data.copy(), requires_grad=True),
        ))
    return DecoderWeights(
        weights.config,
        Tensor(weights.embedding.data.copy(), requires_grad=True),
        merged_layers,
        Tensor(weights.final_gain.data.copy(), requires_grad=True),
        Tensor(weights.lm_head.data.copy(), requires_grad=True),
    )


def save_adapters(path, weights: DecoderWeights, config: LoraConfig) -> None:
    adapters = collect_adapters(weights)
    if not adapters:
        raise ValueError("model has no adapters to save")
    tensors: dict[str, np.ndarray] = {}
    for name in sorted(adapters):
        tensors[f"{name}.A"] = adapters[name].a.data
        tensors[f"{name}.B"] = adapters[name].b.data
    meta = {
        "kind": "adapters",
        "rank": str(config.rank),
        "alpha": repr(config.alpha),
        "dropout": repr(config.dropout),
        "targets": ",".join(config.targets),
        "base_digest": weights_digest(weights),
    }
    save_checkpoint(path, tensors, meta)


def load_adapters(path, weights: DecoderWeights) -> tuple[dict[str, LoraAdapter], LoraConfig]:
    """Attach saved adapters onto a base model. Refuses to load when the
    base digest or any shape disagrees with what the adapters were trained
    against."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "adapters":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    config = LoraConfig(
        rank=int(meta["rank"]),
        alpha=float(meta["alpha"]),
        dropout=float(meta["dropout"]),
        targets=tuple(meta["targets"].split(",")),
    )
    actual_digest = weights_digest(weights)
    if meta.get("base_digest") != actual_digest:
        raise CheckpointError(
            "adapter checkpoint was trained against a different base model "
            f"(digest {meta.get('base_digest')} vs {actual_digest})"
        )
    adapters: dict[str, LoraAdapter] = {}
    for i, layer in enumerate(weights.layers):
        for target in config.targets:
            slot = TARGET_SLOTS[target]
            name = f"layers.{i}.{slot}"
            a_arr, b_arr = tensors.get(f"{name}.A"), tensors.get(f"{name}.B")
            if a_arr is None or b_arr is None:
                raise CheckpointError(f"adapter checkpoint missing {name}")
            base = getattr(layer, slot)
            if isinstance(base, LoraLinear):
                raise CheckpointError(f"{name} already has an adapter attached")
            k, d = base.data.shape
            if a_arr.shape != (config.rank, k) or b_arr.shape != (d, config.rank):
                raise CheckpointError(
                    f"adapter {name} shapes {a_arr.shape}/{b_arr.shape} do not fit "
                    f"base weight {base.data.shape}"
                )
            adapter = LoraAdapter(
                Tensor(a_arr, requires_grad=True),
                Tensor(b_arr, requires_grad=True),
                config.scale, config.dropout,
            )
            setattr(layer, slot, LoraLinear(base, adapter))
            adapters[name] = adapter
    return adapters, config
