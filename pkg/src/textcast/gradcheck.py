"""Central finite-difference verification of every differentiable operation
and of a composed decoder block.

Each check builds a scalar loss by contracting the operation output with a
fixed random weighting, computes analytic gradients through the tape, and
compares against central differences at step 1e-5 in float64.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import model as model_mod
from .rng import stream
from .tensor import (
    Tape,
    Tensor,
    add,
    cross_entropy,
    dropout_apply,
    matmul,
    mul,
    rmsnorm,
    silu,
    softmax_rows,
    sum_all,
    swiglu_ffn,
)

FD_STEP = 1e-5


def _weighted_sum(out: Tensor, coeffs: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(coeffs)))


def numeric_gradient(f: Callable[[], float], param: Tensor, step: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar-valued closure wrt one tensor."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(build: Callable[[], Tensor], params: list[Tensor]) -> float:
    """Max relative error between tape gradients and central differences,
    taken over all listed parameters."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_gradient(lambda: float(build().data), p)
        denom = max(float(np.abs(n).max()), float(np.abs(a).max()), 1e-8)
        worst = max(worst, float(np.abs(a - n).max()) / denom)
    return worst


def _rand(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def suite(seed: int = 0) -> dict[str, float]:
    """Run the whole finite-difference suite; returns max relative error per
    operation, including one composed decoder block."""
    results: dict[str, float] = {}
    rng = stream(seed, "gradcheck")

    a = _rand(rng, (3, 4))
    b = _rand(rng, (4, 5))
    c_ab = rng.normal(size=(3, 5))
    results["matmul"] = check_gradients(lambda: _weighted_sum(matmul(a, b), c_ab), [a, b])

    x = _rand(rng, (3, 6))
    y = _rand(rng, (3, 6))
    c_xy = rng.normal(size=(3, 6))
    results["add"] = check_gradients(lambda: _weighted_sum(add(x, y), c_xy), [x, y])
    results["mul"] = check_gradients(lambda: _weighted_sum(mul(x, y), c_xy), [x, y])
    results["silu"] = check_gradients(lambda: _weighted_sum(silu(x), c_xy), [x])

    s = _rand(rng, (4, 7))
    c_s = rng.normal(size=(4, 7))
    results["softmax_rows"] = check_gradients(
        lambda: _weighted_sum(softmax_rows(s, scale=0.7), c_s), [s]
    )

    xn = _rand(rng, (4, 8))
    gn = Tensor(rng.normal(1.0, 0.2, 8), requires_grad=True)
    c_n = rng.normal(size=(4, 8))
    results["rmsnorm"] = check_gradients(
        lambda: _weighted_sum(rmsnorm(xn, gn, 1e-6), c_n), [xn, gn]
    )

    xf = _rand(rng, (3, 6))
    wg = _rand(rng, (6, 9), 0.5)
    wu = _rand(rng, (6, 9), 0.5)
    wd = _rand(rng, (9, 6), 0.5)
    c_f = rng.normal(size=(3, 6))
    results["swiglu_ffn"] = check_gradients(
        lambda: _weighted_sum(swiglu_ffn(xf, wg, wu, wd), c_f), [xf, wg, wu, wd]
    )

    logits = _rand(rng, (5, 9))
    targets = rng.integers(0, 9, size=5)
    mask = np.array([False, True, False, False, True])
    results["cross_entropy"] = check_gradients(
        lambda: cross_entropy(logits, targets, mask), [logits]
    )

    xd = _rand(rng, (6, 6))
    c_d = rng.normal(size=(6, 6))
    results["dropout_apply"] = check_gradients(
        lambda: _weighted_sum(dropout_apply(xd, 0.4, stream(seed, "drop")), c_d), [xd]
    )

    cfg = model_mod.ModelConfig(vocab_size=9, n_layers=1, n_heads=2, d_model=8,
                                d_ff=12, max_context=16)
    angles = model_mod.rope_angles(cfg)
    xr = _rand(rng, (5, cfg.head_dim))
    pos = np.arange(2, 7)
    c_r = rng.normal(size=(5, cfg.head_dim))
    results["rope_apply"] = check_gradients(
        lambda: _weighted_sum(model_mod.rope_apply(xr, pos, angles), c_r), [xr]
    )

    xa = _rand(rng, (4, cfg.d_model), 0.5)
    wq = _rand(rng, (cfg.d_model, cfg.head_dim), 0.5)
    wk = _rand(rng, (cfg.d_model, cfg.head_dim), 0.5)
    wv = _rand(rng, (cfg.d_model, cfg.head_dim), 0.5)
    pos_a = np.arange(4)
    c_a = rng.normal(size=(4, cfg.head_dim))
    results["attention"] = check_gradients(
        lambda: _weighted_sum(
            model_mod.attention(xa, xa, wq, wk, wv, pos_a, angles), c_a
        ),
        [xa, wq, wk, wv],
    )

    block = model_mod.DecoderWeights.init_random(cfg, stream(seed, "block"))
    ids = stream(seed, "ids").integers(0, cfg.vocab_size, size=5)
    block_targets = stream(seed, "tgt").integers(0, cfg.vocab_size, size=5)
    block_params = list(block.named_base_parameters().values())
    results["decoder_block"] = check_gradients(
        lambda: cross_entropy(model_mod.forward(block, ids), block_targets),
        block_params,
    )
    return results


def run(seed: int = 0, tolerance: float = 1e-3) -> tuple[dict[str, float], bool]:
    results = suite(seed)
    ok = all(math.isfinite(v) and v < tolerance for v in results.values())
    return results, ok
