"""Jamming detection for UAV links from RSSI/SINR traces.

Synthetic signal generation, windowed PCA feature enhancement, quantile
tokenization and a U-shaped transformer trained with a numpy autodiff engine.
"""
from . import autodiff, evaluation, features, model, pipeline, synth, tokenizer, trainer
from .evaluation import MetricsReport, evaluate
from .model import Model, ModelConfig, build
from .synth import ScenarioConfig, SignalRecord, generate
from .trainer import TrainConfig, Trainer, fit

__version__ = "0.1.0"

__all__ = [
    "autodiff", "evaluation", "features", "model", "pipeline", "synth", "tokenizer", "trainer",
    "MetricsReport", "evaluate", "Model", "ModelConfig", "build", "ScenarioConfig", "SignalRecord",
    "generate", "TrainConfig", "Trainer", "fit", "__version__",
]
