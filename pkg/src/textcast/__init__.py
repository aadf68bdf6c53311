"""Prompt-based time-series forecasting with a miniature decoder-only
language model and low-rank adapters."""

from .codec import ForecastResult, format_number, parse_output, render_answer, render_prompt
from .data import REGISTRY, TimeSeries, WindowPair, WindowSpec
from .evaluate import missing_rate, persistence_baseline, predict_batch, rmse, smape
from .lora import LoraConfig
from .model import DecoderWeights, GenerationConfig, KvCache, ModelConfig, forward, generate
from .tokenizer import Vocabulary, default_vocabulary
from .train import CorpusConfig, TrainConfig, finetune_lora, pretrain_tiny

__version__ = "0.1.0"

__all__ = [
    "REGISTRY",
    "CorpusConfig",
    "DecoderWeights",
    "ForecastResult",
    "GenerationConfig",
    "KvCache",
    "LoraConfig",
    "ModelConfig",
    "TimeSeries",
    "TrainConfig",
    "Vocabulary",
    "WindowPair",
    "WindowSpec",
    "default_vocabulary",
    "finetune_lora",
    "format_number",
    "forward",
    "generate",
    "missing_rate",
    "parse_output",
    "persistence_baseline",
    "predict_batch",
    "pretrain_tiny",
    "render_answer",
    "render_prompt",
    "rmse",
    "smape",
]
