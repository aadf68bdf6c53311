"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a float numpy array. Operations executed while a ``Tape``
is active are recorded in execution order; ``Tape.backward`` replays the
records in reverse, which is a valid reverse topological order because the
graph is built incrementally. Gradients accumulate into ``Tensor.grad`` and
survive across backward calls until explicitly reset, so gradient
accumulation over micro-batches falls out of the same mechanism.

Tensors are safe to share read-only across threads; a tape must stay on a
single thread.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# Large finite negative used for attention masking: exp() underflows to
# exactly 0 in both float32 and float64, while keeping softmax inputs finite.
MASK_VALUE = -1e30


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(ValueError):
    """An operation received or produced values outside its numeric domain."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "vjps")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjps: tuple):
        self.out = out
        self.inputs = inputs
        self.vjps = vjps


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of operations; replaying it backward visits every
    recorded node exactly once in reverse topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss.

        Each call propagates one unit of upstream gradient through per-call
        flow storage and adds the result into .grad, so repeated calls
        without a reset accumulate one contribution per call.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g_out = flows.get(id(node.out))
            if g_out is None:
                continue
            for inp, vjp in zip(node.inputs, node.vjps):
                if not inp.requires_grad:
                    continue
                g = vjp(g_out)
                key = id(inp)
                if key in flows:
                    flows[key] = flows[key] + g
                else:
                    flows[key] = g
                    touched[key] = inp
        for key, tensor in touched.items():
            tensor.accumulate_grad(flows[key])


def record_op(out: Tensor, pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Attach a computed tensor to the active tape (no-op outside a tape)."""
    if _ACTIVE_TAPES and out.requires_grad:
        inputs = tuple(t for t, _ in pairs)
        vjps = tuple(fn for _, fn in pairs)
        _ACTIVE_TAPES[-1]._nodes.append(_Node(out, inputs, vjps))
    return out


def _result(data: np.ndarray, pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t, _ in pairs))
    return record_op(out, pairs)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    return _result(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    return _result(a.data * b.data, [(a, lambda g: g * b.data), (b, lambda g: g * a.data)])


def scale(a: Tensor, s: float) -> Tensor:
    return _result(a.data * s, [(a, lambda g: g * s)])


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _result(a.data.T.copy(), [(a, lambda g: g.T)])


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return full

    return _result(a.data[:, start:stop].copy(), [(a, vjp)])


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    pairs = []
    for i, p in enumerate(parts):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        pairs.append((p, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
    return _result(np.concatenate([p.data for p in parts], axis=1), pairs)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), [(a, lambda g: np.broadcast_to(g, a.data.shape))])


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return g * (sig + a.data * sig * (1.0 - sig))

    return _result(a.data * sig, [(a, vjp)])


# ---------------------------------------------------------------------------
# matmul and embedding
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    global _matmul_count
    _matmul_count += 1
    return _result(
        a.data @ b.data,
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
    )


_matmul_count = 0


def matmul_count() -> int:
    """Running count of matmul executions, for cost-accounting tests."""
    return _matmul_count


def embedding_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding_rows expects a 1-D id array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("token id outside embedding table")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return full

    return _result(table.data[ids], [(table, vjp)])


# ---------------------------------------------------------------------------
# normalization, softmax, loss
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``x * scale`` along the last axis, stabilized by
    max-subtraction. Rows sum to 1 within 1e-12."""
    if scale <= 0:
        raise ValueError("softmax_rows scale must be positive")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows requires finite inputs")
    z = x.data * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return scale * p * (g - inner)

    return _result(p, [(x, vjp)])


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y_i = gain_i * x_i / sqrt(mean(x^2) + eps), normalizing the last axis."""
    if eps <= 0:
        raise ValueError("rmsnorm eps must be positive")
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        raise ShapeError(f"gain shape {gain.data.shape} does not match last dim {d}")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    u = x.data * inv

    def vjp_x(g):
        gg = g * gain.data
        dot = (gg * x.data).sum(axis=-1, keepdims=True)
        return inv * gg - (inv ** 3 / d) * x.data * dot

    def vjp_gain(g):
        prod = g * u
        return prod.reshape(-1, d).sum(axis=0)

    return _result(u * gain.data, [(x, vjp_x), (gain, vjp_gain)])


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """down( silu(x @ w_gate) * (x @ w_up) ), the gated feed-forward block."""
    gated = silu(matmul(x, w_gate))
    lifted = matmul(x, w_up)
    return matmul(mul(gated, lifted), w_down)


class UndefinedLossError(ValueError):
    """Cross-entropy over zero unmasked positions has no defined value."""


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    ignore_mask: Optional[np.ndarray] = None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-softmax probability of targets, averaged (or summed)
    over positions not flagged in ``ignore_mask``. Masked positions
    contribute exactly zero."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects logits of shape (positions, vocab)")
    t, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t,):
        raise ShapeError(f"targets shape {targets.shape} does not match {t} positions")
    if ignore_mask is None:
        active = np.ones(t, dtype=bool)
    else:
        ignore_mask = np.asarray(ignore_mask, dtype=bool)
        if ignore_mask.shape != (t,):
            raise ShapeError("ignore_mask length must match positions")
        active = ~ignore_mask
    count = int(active.sum())
    if count == 0:
        raise UndefinedLossError("all positions masked out of the loss")
    act_targets = targets[active]
    if act_targets.size and (act_targets.min() < 0 or act_targets.max() >= v):
        raise IndexError("target id outside vocabulary")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    nll = lse[active] - z[active, targets[active]]
    total = nll.sum()
    value = total / count if reduction == "mean" else total
    weight = 1.0 / count if reduction == "mean" else 1.0

    def vjp(g):
        p = np.exp(z - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(t), targets] -= 1.0
        p[~active] = 0.0
        return p * (float(g) * weight)

    return _result(np.asarray(value, dtype=logits.data.dtype), [(logits, vjp)])


def dropout_apply(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Zero a fraction p of elements and rescale survivors by 1/(1-p).
    Identity in eval mode or at p=0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p)
    factor = 1.0 / (1.0 - p)
    mask = keep.astype(x.data.dtype) * factor
    return _result(x.data * mask, [(x, lambda g: g * mask)])


def finite_or_raise(x: Tensor, what: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{what} is not finite")
    return x


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def full_like_mask(rows: int, cols: int, allowed_upto_offset: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Causal mask block: entry (i, j) is 0 when j <= i + offset, MASK_VALUE
    otherwise. ``allowed_upto_offset`` is the number of already-visible
    positions preceding the block (the cache length)."""
    j = np.arange(cols)[None, :]
    i = np.arange(rows)[:, None]
    blocked = j > (i + allowed_upto_offset)
    data = np.where(blocked, np.asarray(MASK_VALUE, dtype=dtype), np.asarray(0.0, dtype=dtype))
    return Tensor(data, requires_grad=False)


def sqrt_inv(x: float) -> float:
    return 1.0 / math.sqrt(x)
