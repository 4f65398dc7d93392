"""Saliency-guided one-pixel adversarial attacks on a small numpy CNN."""

from .attack import AttackConfig, AttackResult, apply_perturbation, exhaustive_oracle, fitness, run_attack
from .bench import Corpus, generate_synthetic_corpus, load_corpus, run_experiment, emit_report
from .imaging import Image
from .model import Model, TrainConfig, build_desk_model, forward, input_gradient, load_model, predict, save_model, train
from .saliency import SaliencyConfig, normalize, smoothgrad, threshold

__all__ = [
    "AttackConfig", "AttackResult", "apply_perturbation", "exhaustive_oracle", "fitness", "run_attack",
    "Corpus", "generate_synthetic_corpus", "load_corpus", "run_experiment", "emit_report",
    "Image",
    "Model", "TrainConfig", "build_desk_model", "forward", "input_gradient", "load_model", "predict",
    "save_model", "train",
    "SaliencyConfig", "normalize", "smoothgrad", "threshold",
]

__version__ = "0.1.0"
