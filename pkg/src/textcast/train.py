"""Supervised training: teacher-forced sample construction, a gradient
accumulation loop whose arithmetic is identical whether a batch arrives as
one piece or as micro-batches, synthetic pre-training of the base model, and
adapter-only fine-tuning with a frozen-base guarantee.

Loss is reduced as mean-over-unmasked-tokens per effective batch: each
sequence contributes its token-loss sum, gradients of the sums accumulate,
and everything is divided by the batch's total token count just before the
optimizer step (sum-then-divide ordering fixed).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import lora as lora_mod
from .codec import ANSWER_SEPARATOR, render_answer, render_prompt
from .data import WindowPair, make_windows
from .model import (
    DecoderWeights,
    ModelConfig,
    forward,
    load_model,
    save_model,
    weights_digest,
)
from .optim import AdamW
from .rng import stream
from .tensor import DEFAULT_DTYPE, Tape, cross_entropy
from .tokenizer import BOS_ID, EOS_ID, Vocabulary, default_vocabulary


class SampleOverflowError(ValueError):
    """A rendered training sample exceeds the model context window."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the iteration and offending value."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 128
    micro_batch: int = 2
    max_iterations: int = 2000
    seed: int = 0
    eval_every: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("batch_size and micro_batch must be positive")
        if self.batch_size % self.micro_batch != 0:
            raise ValueError("batch_size must be divisible by micro_batch")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


def build_training_sample(
    w: WindowPair, vocab: Vocabulary, max_context: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forced (input ids, target ids, ignore mask) for one window.

    The prompt region (context, question, and the separator space) is masked
    out of the loss; the answer tokens plus the closing EOS are kept.
    """
    prompt = render_prompt(w.x, len(w.y)) + ANSWER_SEPARATOR
    answer = render_answer(w.y)
    prompt_ids = [BOS_ID] + vocab.encode(prompt)
    ids = prompt_ids + vocab.encode(answer) + [EOS_ID]
    if len(ids) - 1 > max_context:
        raise SampleOverflowError(
            f"window {w.series_id!r}@{w.start} renders to {len(ids) - 1} tokens, "
            f"over the context limit {max_context}"
        )
    input_ids = np.array(ids[:-1], dtype=np.int64)
    target_ids = np.array(ids[1:], dtype=np.int64)
    # position t predicts ids[t+1]; ignore while the prediction target is
    # still inside the prompt region
    ignore = np.arange(len(target_ids)) < (len(prompt_ids) - 1)
    return input_ids, target_ids, ignore


def generation_prompt_ids(lags, h: int, vocab: Vocabulary) -> list[int]:
    """Prompt token ids exactly matching the training-side prompt region."""
    return [BOS_ID] + vocab.encode(render_prompt(lags, h) + ANSWER_SEPARATOR)


@dataclass
class TrainResult:
    losses: list[float]
    final_loss: float
    micro_steps: int
    optimizer_steps: int
    # (iteration, moving-average loss) snapshots every eval_every iterations
    eval_history: list[tuple[int, float]]


def train_loop(
    weights: DecoderWeights,
    params: list,
    samples: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    training_forward_rng: bool = False,
    log_every: int = 0,
) -> TrainResult:
    """Run cfg.max_iterations effective-batch updates over the sample pool.

    Draws with replacement from a per-iteration stream, so the sampled
    batch depends only on (seed, iteration), never on micro-batch layout.
    """
    if not samples:
        raise ValueError("no training samples")
    opt = AdamW(params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.eps, weight_decay=cfg.weight_decay)
    losses: list[float] = []
    eval_history: list[tuple[int, float]] = []
    micro_steps = 0
    for it in range(cfg.max_iterations):
        batch_idx = stream(cfg.seed, "batch", it).integers(0, len(samples), size=cfg.batch_size)
        opt.zero_grad()
        loss_sum = 0.0
        token_count = 0
        for micro_start in range(0, cfg.batch_size, cfg.micro_batch):
            micro = batch_idx[micro_start:micro_start + cfg.micro_batch]
            micro_steps += 1
            for j in micro:
                input_ids, target_ids, ignore = samples[int(j)]
                rng = stream(cfg.seed, "dropout", it, int(j)) if training_forward_rng else None
                with Tape() as tape:
                    logits = forward(weights, input_ids, training=training_forward_rng, rng=rng)
                    seq_loss = cross_entropy(logits, target_ids, ignore, reduction="sum")
                tape.backward(seq_loss)
                loss_sum += float(seq_loss.data)
                token_count += int((~ignore).sum())
        inv = 1.0 / token_count
        for p in params:
            if p.grad is None:
                raise RuntimeError("a trainable parameter received no gradient")
            p.grad *= inv
        mean_loss = loss_sum * inv
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(f"loss became {mean_loss} at iteration {it}")
        losses.append(mean_loss)
        opt.step()
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            window_mean = float(np.mean(losses[-cfg.eval_every:]))
            eval_history.append((it + 1, window_mean))
        if log_every and (it + 1) % log_every == 0:
            print(f"  iter {it + 1:5d}/{cfg.max_iterations}  loss {mean_loss:.4f}")
    return TrainResult(losses, losses[-1], micro_steps, opt.step_count, eval_history)


def windows_to_samples(windows, vocab, max_context):
    return [build_training_sample(w, vocab, max_context) for w in windows]


# ---------------------------------------------------------------------------
# synthetic pre-training of the base model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    families: tuple[str, ...] = ()
    series_per_family: int = 40
    seed: int = 0

    def resolved_families(self) -> tuple[str, ...]:
        from .synthetic import PRETRAIN_FAMILIES

        return self.families or PRETRAIN_FAMILIES


def build_pretrain_samples(corpus: CorpusConfig, vocab: Vocabulary, max_context: int):
    from .synthetic import FAMILY_SPECS, generate_family

    samples = []
    for family in corpus.resolved_families():
        spec = FAMILY_SPECS[family]
        for ts in generate_family(family, corpus.series_per_family, corpus.seed):
            for w in make_windows(ts, spec.window):
                samples.append(build_training_sample(w, vocab, max_context))
    return samples


def pretrain_tiny(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: CorpusConfig,
    out_dir: str | Path,
    vocab: Optional[Vocabulary] = None,
    dtype=DEFAULT_DTYPE,
    log_every: int = 0,
) -> tuple[DecoderWeights, TrainResult, Path]:
    """Train the full model from scratch on the synthetic corpus and write a
    base checkpoint plus the corpus manifest that makes it reproducible."""
    vocab = vocab or default_vocabulary()
    if model_cfg.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {len(vocab)}")
    samples = build_pretrain_samples(corpus, vocab, model_cfg.max_context)
    weights = DecoderWeights.init_random(model_cfg, stream(train_cfg.seed, "init"), dtype=dtype)
    result = train_loop(weights, weights.parameters(), samples, train_cfg, log_every=log_every)

    out_dir = Path(out_dir)
    ckpt = out_dir / "base"
    save_model(ckpt, weights, extra_meta={
        "corpus_families": ",".join(corpus.resolved_families()),
        "corpus_series_per_family": str(corpus.series_per_family),
        "corpus_seed": str(corpus.seed),
        "train_seed": str(train_cfg.seed),
        "train_iterations": str(train_cfg.max_iterations),
    })
    vocab.save(out_dir / "vocab.txt")
    loss_lines = [f"{i}\t{v!r}" for i, v in enumerate(result.losses)]
    (out_dir / "pretrain_loss.tsv").write_text("\n".join(loss_lines) + "\n", encoding="utf-8")
    return weights, result, ckpt


# ---------------------------------------------------------------------------
# adapter fine-tuning
# ---------------------------------------------------------------------------

class FrozenBaseViolation(RuntimeError):
    """The base-weight digest changed during adapter-only fine-tuning."""


def finetune_lora(
    base_ckpt: str | Path,
    train_windows: list[WindowPair],
    lora_cfg: lora_mod.LoraConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    vocab: Optional[Vocabulary] = None,
    merge: bool = False,
    log_every: int = 0,
) -> tuple[DecoderWeights, TrainResult, Path]:
    """Inject adapters into the base checkpoint and train only them.

    The base digest is taken before training and re-verified after; any
    drift is a hard failure.
    """
    if not train_windows:
        raise ValueError("no training windows")
    weights = load_model(base_ckpt)
    vocab = vocab or default_vocabulary()
    samples = windows_to_samples(train_windows, vocab, weights.config.max_context)

    digest_before = weights_digest(weights)
    lora_mod.freeze_base(weights)
    adapters = lora_mod.inject(weights, lora_cfg, stream(train_cfg.seed, "lora_init"))
    params = lora_mod.adapter_parameters(adapters)
    result = train_loop(weights, params, samples, train_cfg,
                        training_forward_rng=lora_cfg.dropout > 0.0, log_every=log_every)
    digest_after = weights_digest(weights)
    if digest_before != digest_after:
        raise FrozenBaseViolation(
            f"base weights changed during fine-tune: {digest_before} -> {digest_after}"
        )

    out_dir = Path(out_dir)
    adapter_path = out_dir / "adapters"
    lora_mod.save_adapters(adapter_path, weights, lora_cfg)
    if merge:
        merged = lora_mod.merge_adapters(weights)
        save_model(out_dir / "merged", merged, extra_meta={"merged_from": digest_before})
    loss_lines = [f"{i}\t{v!r}" for i, v in enumerate(result.losses)]
    (out_dir / "finetune_loss.tsv").write_text("\n".join(loss_lines) + "\n", encoding="utf-8")
    return weights, result, adapter_path
