"""Decoder-only transformer: embedding, pre-norm decoder stack
(RMSNorm -> multi-head attention with rotary positions and a KV cache ->
residual -> RMSNorm -> gated feed-forward -> residual), final norm, and the
logit projection, plus autoregressive generation.

Weights are immutable during inference and shareable across threads; each
generation session owns a private KvCache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    concat_cols,
    embedding_rows,
    full_like_mask,
    matmul,
    record_op,
    rmsnorm,
    slice_cols,
    softmax_rows,
    swiglu_ffn,
    transpose,
)


class ContextOverflowError(RuntimeError):
    """Sequence plus cache length exceeded the model's context window."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 384
    max_context: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head_dim must be even for rotary pairs")
        if self.vocab_size < 1 or self.n_layers < 1 or self.max_context < 1:
            raise ValueError("vocab_size, n_layers, max_context must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 10.0
    max_new_tokens: int = 64
    greedy: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.greedy and self.temperature <= 0:
            raise ValueError("sampling needs a positive temperature")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be at least 1")


def rope_angles(config: ModelConfig) -> np.ndarray:
    """Per-pair rotation frequencies: base**(-2(i-1)/head_dim) for
    i = 1 .. head_dim/2. The first entry is exactly 1 and the table is
    strictly decreasing."""
    d = config.head_dim
    if d % 2 != 0:
        raise ValueError("head_dim must be even")
    i = np.arange(1, d // 2 + 1, dtype=np.float64)
    return config.rope_base ** (-2.0 * (i - 1.0) / d)


def rope_apply(x: Tensor, positions: np.ndarray, angles: np.ndarray) -> Tensor:
    """Rotate consecutive dimension pairs (2j, 2j+1) of each row by
    position * angles[j]. Norm-preserving per pair; position 0 is identity."""
    seq, d = x.data.shape
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (seq,):
        raise ValueError(f"positions length {positions.shape} does not match {seq} rows")
    if d != 2 * angles.shape[0]:
        raise ValueError("angle table does not match row width")
    theta = positions[:, None] * angles[None, :]
    cos = np.cos(theta).astype(x.data.dtype)
    sin = np.sin(theta).astype(x.data.dtype)
    xe, xo = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = xe * cos - xo * sin
    out[:, 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        back = np.empty_like(g)
        back[:, 0::2] = ge * cos + go * sin
        back[:, 1::2] = -ge * sin + go * cos
        return back

    result = Tensor(out, requires_grad=x.requires_grad)
    return record_op(result, [(x, vjp)])


class LayerWeights:
    __slots__ = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_gain", "ffn_gain")

    def __init__(self, wq, wk, wv, wo, w_gate, w_up, w_down, attn_gain, ffn_gain):
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo
        self.w_gate = w_gate
        self.w_up = w_up
        self.w_down = w_down
        self.attn_gain = attn_gain
        self.ffn_gain = ffn_gain


def _base_of(proj) -> Tensor:
    return proj if isinstance(proj, Tensor) else proj.base


def _project(x: Tensor, proj, training: bool, rng) -> Tensor:
    if isinstance(proj, Tensor):
        return matmul(x, proj)
    return proj(x, training=training, rng=rng)


class DecoderWeights:
    """All model parameters. Projection slots (wq, wv, ...) normally hold
    plain tensors; adapter injection may replace them with callable wrappers
    whose .base is the frozen tensor."""

    def __init__(self, config: ModelConfig, embedding: Tensor, layers: list[LayerWeights],
                 final_gain: Tensor, lm_head: Tensor):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.final_gain = final_gain
        self.lm_head = lm_head

    @classmethod
    def init_random(cls, config: ModelConfig, rng: np.random.Generator,
                    dtype=DEFAULT_DTYPE) -> "DecoderWeights":
        d, f, v = config.d_model, config.d_ff, config.vocab_size
        std = 0.02
        out_std = 0.02 / math.sqrt(2.0 * config.n_layers)

        def w(shape, s):
            return Tensor(rng.normal(0.0, s, shape).astype(dtype), requires_grad=True)

        def gain(n):
            return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

        layers = [
            LayerWeights(
                wq=w((d, d), std), wk=w((d, d), std), wv=w((d, d), std),
                wo=w((d, d), out_std),
                w_gate=w((d, f), std), w_up=w((d, f), std), w_down=w((f, d), out_std),
                attn_gain=gain(d), ffn_gain=gain(d),
            )
            for _ in range(config.n_layers)
        ]
        return cls(
            config,
            embedding=w((v, d), std),
            layers=layers,
            final_gain=gain(d),
            lm_head=w((d, v), std),
        )

    def named_base_parameters(self) -> dict[str, Tensor]:
        """Every non-adapter weight, in a fixed canonical order."""
        named: dict[str, Tensor] = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            named[p + "wq"] = _base_of(layer.wq)
            named[p + "wk"] = _base_of(layer.wk)
            named[p + "wv"] = _base_of(layer.wv)
            named[p + "wo"] = _base_of(layer.wo)
            named[p + "w_gate"] = _base_of(layer.w_gate)
            named[p + "w_up"] = _base_of(layer.w_up)
            named[p + "w_down"] = _base_of(layer.w_down)
            named[p + "attn_gain"] = layer.attn_gain
            named[p + "ffn_gain"] = layer.ffn_gain
        named["final_gain"] = self.final_gain
        named["lm_head"] = self.lm_head
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_base_parameters().values())


class KvCache:
    """Per-(layer, head) append-only key/value storage for incremental
    decoding. Keys are stored after rotary encoding so cached entries never
    change; lengths stay equal across layers and heads."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.keys: list[list[Optional[np.ndarray]]] = [
            [None] * config.n_heads for _ in range(config.n_layers)
        ]
        self.values: list[list[Optional[np.ndarray]]] = [
            [None] * config.n_heads for _ in range(config.n_layers)
        ]

    @property
    def length(self) -> int:
        return self.layer_length(0)

    def layer_length(self, layer: int) -> int:
        first = self.keys[layer][0]
        return 0 if first is None else first.shape[0]

    def assert_consistent(self) -> None:
        lengths = {self.layer_length(i) for i in range(self.config.n_layers)}
        lengths |= {
            0 if k is None else k.shape[0]
            for per_layer in self.keys for k in per_layer
        }
        if len(lengths) != 1:
            raise RuntimeError(f"cache lengths diverged: {sorted(lengths)}")

    def append(self, layer: int, head: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        old_k, old_v = self.keys[layer][head], self.values[layer][head]
        if old_k is None:
            new_k, new_v = k.copy(), v.copy()
        else:
            new_k = np.concatenate([old_k, k], axis=0)
            new_v = np.concatenate([old_v, v], axis=0)
        if new_k.shape[0] > self.config.max_context:
            raise ContextOverflowError(
                f"cache length {new_k.shape[0]} exceeds max_context {self.config.max_context}"
            )
        self.keys[layer][head] = new_k
        self.values[layer][head] = new_v
        return new_k, new_v


def attention(
    x_q: Tensor,
    x_kv: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    positions: np.ndarray,
    angles: np.ndarray,
    cache: Optional[KvCache] = None,
    layer: int = 0,
    head: int = 0,
) -> Tensor:
    """Single-head causal scaled dot-product attention with rotary positions
    applied to queries and keys before the product. With a cache, only the
    new positions' keys and values are computed and appended."""
    head_dim = wq.data.shape[1]
    q = rope_apply(matmul(x_q, wq), positions, angles)
    k = rope_apply(matmul(x_kv, wk), positions, angles)
    v = matmul(x_kv, wv)

    past = 0
    if cache is not None:
        full_k, full_v = cache.append(layer, head, k.data, v.data)
        past = full_k.shape[0] - k.data.shape[0]
        k = Tensor(full_k)
        v = Tensor(full_v)

    scores = matmul(q, transpose(k))
    mask = full_like_mask(scores.data.shape[0], scores.data.shape[1], past, dtype=scores.data.dtype)
    probs = softmax_rows(add(scores, mask), scale=1.0 / math.sqrt(head_dim))
    return matmul(probs, v)


def mha(
    x: Tensor,
    layer_weights: LayerWeights,
    config: ModelConfig,
    positions: np.ndarray,
    angles: np.ndarray,
    cache: Optional[KvCache] = None,
    layer: int = 0,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Heads computed on disjoint d_model/n_heads column slices of the
    projections, concatenated, then projected by the output matrix."""
    hd = config.head_dim
    q_full = _project(x, layer_weights.wq, training, rng)
    k_full = matmul(x, _base_of(layer_weights.wk))
    v_full = _project(x, layer_weights.wv, training, rng)

    heads = []
    past = cache.layer_length(layer) if cache is not None else 0
    for h in range(config.n_heads):
        lo, hi = h * hd, (h + 1) * hd
        qh = rope_apply(slice_cols(q_full, lo, hi), positions, angles)
        kh = rope_apply(slice_cols(k_full, lo, hi), positions, angles)
        vh = slice_cols(v_full, lo, hi)
        if cache is not None:
            full_k, full_v = cache.append(layer, h, kh.data, vh.data)
            kh, vh = Tensor(full_k), Tensor(full_v)
        scores = matmul(qh, transpose(kh))
        mask = full_like_mask(scores.data.shape[0], scores.data.shape[1], past,
                              dtype=scores.data.dtype)
        probs = softmax_rows(add(scores, mask), scale=1.0 / math.sqrt(hd))
        heads.append(matmul(probs, vh))
    return matmul(concat_cols(heads), _base_of(layer_weights.wo))


def forward(
    weights: DecoderWeights,
    token_ids: np.ndarray,
    cache: Optional[KvCache] = None,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Embed -> [norm -> attention -> add -> norm -> feed-forward -> add] x
    n_layers -> norm -> linear. Returns unnormalized logits (seq, vocab)."""
    cfg = weights.config
    token_ids = np.asarray(token_ids, dtype=np.int64)
    past = cache.length if cache is not None else 0
    if past + token_ids.shape[0] > cfg.max_context:
        raise ContextOverflowError(
            f"sequence of {token_ids.shape[0]} on top of {past} cached positions "
            f"exceeds max_context {cfg.max_context}"
        )
    positions = np.arange(past, past + token_ids.shape[0])
    angles = rope_angles(cfg)

    x = embedding_rows(weights.embedding, token_ids)
    for i, layer in enumerate(weights.layers):
        attn = mha(
            rmsnorm(x, layer.attn_gain, cfg.norm_eps),
            layer, cfg, positions, angles,
            cache=cache, layer=i, training=training, rng=rng,
        )
        x = add(x, attn)
        ff = swiglu_ffn(
            rmsnorm(x, layer.ffn_gain, cfg.norm_eps),
            _base_of(layer.w_gate), _base_of(layer.w_up), _base_of(layer.w_down),
        )
        x = add(x, ff)
    final = rmsnorm(x, weights.final_gain, cfg.norm_eps)
    return matmul(final, weights.lm_head)


def weights_digest(weights: DecoderWeights) -> str:
    """Digest over all non-adapter weights, for frozen-base verification."""
    from .checkpoint import tensor_digest

    return tensor_digest({k: v.data for k, v in weights.named_base_parameters().items()})


def save_model(path, weights: DecoderWeights, extra_meta: dict[str, str] | None = None):
    from .checkpoint import save_checkpoint

    cfg = weights.config
    meta = {
        "kind": "model",
        "vocab_size": str(cfg.vocab_size),
        "n_layers": str(cfg.n_layers),
        "n_heads": str(cfg.n_heads),
        "d_model": str(cfg.d_model),
        "d_ff": str(cfg.d_ff),
        "max_context": str(cfg.max_context),
        "rope_base": repr(cfg.rope_base),
        "norm_eps": repr(cfg.norm_eps),
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors = {k: v.data for k, v in weights.named_base_parameters().items()}
    return save_checkpoint(path, tensors, meta)


def load_model(path) -> DecoderWeights:
    from .checkpoint import CheckpointError, load_checkpoint

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(
        vocab_size=int(meta["vocab_size"]),
        n_layers=int(meta["n_layers"]),
        n_heads=int(meta["n_heads"]),
        d_model=int(meta["d_model"]),
        d_ff=int(meta["d_ff"]),
        max_context=int(meta["max_context"]),
        rope_base=float(meta["rope_base"]),
        norm_eps=float(meta["norm_eps"]),
    )

    def t(name):
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        return Tensor(tensors[name], requires_grad=True)

    layers = [
        LayerWeights(
            wq=t(f"layers.{i}.wq"), wk=t(f"layers.{i}.wk"), wv=t(f"layers.{i}.wv"),
            wo=t(f"layers.{i}.wo"),
            w_gate=t(f"layers.{i}.w_gate"), w_up=t(f"layers.{i}.w_up"),
            w_down=t(f"layers.{i}.w_down"),
            attn_gain=t(f"layers.{i}.attn_gain"), ffn_gain=t(f"layers.{i}.ffn_gain"),
        )
        for i in range(cfg.n_layers)
    ]
    return DecoderWeights(cfg, t("embedding"), layers, t("final_gain"), t("lm_head"))


def _sample_token(logits: np.ndarray, gen: GenerationConfig, rng) -> int:
    if gen.greedy:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / gen.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(p.shape[0], p=p))


def generate(
    weights: DecoderWeights,
    prompt_ids: list[int],
    gen: GenerationConfig,
    eos_id: int,
    rng=None,
) -> list[int]:
    """Autoregressive continuation of the prompt using a private KV cache.
    Each step samples from softmax(logits / T), or takes the argmax when
    greedy. Stops on EOS or after max_new_tokens; hitting the length limit
    is a normal stop."""
    if not prompt_ids:
        raise ValueError("prompt must be non-empty")
    if rng is None:
        from .rng import stream
        rng = stream(gen.seed, "generate")
    cache = KvCache(weights.config)
    logits = forward(weights, np.asarray(prompt_ids), cache=cache)
    out: list[int] = []
    next_logits = logits.data[-1]
    for _ in range(gen.max_new_tokens):
        token = _sample_token(next_logits, gen, rng)
        out.append(token)
        if token == eos_id:
            break
        if cache.length >= weights.config.max_context:
            break
        step = forward(weights, np.asarray([token]), cache=cache)
        next_logits = step.data[-1]
    return out
