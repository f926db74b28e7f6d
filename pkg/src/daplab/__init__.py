"""Desk-scale lab for prior-regularized domain-adaptive semantic
segmentation: a synthetic two-domain benchmark, a tiny autodiff stack, the
mean-teacher mixing trainer with an optional class-prior alignment loss,
and the evaluation/diagnostic tooling around it."""

__version__ = "0.1.0"

from .classes import CLASS_NAMES, IGNORE_ID, NUM_CLASSES
from .datagen import DatasetBundle, DomainSpec, make_benchmark, preset_specs
from .priors import build_one_hot, build_random, load_vectors, make_embeddings
from .trainer import TrainConfig, Trainer, run, train_supervised

__all__ = [
    "CLASS_NAMES", "IGNORE_ID", "NUM_CLASSES",
    "DatasetBundle", "DomainSpec", "make_benchmark", "preset_specs",
    "build_one_hot", "build_random", "load_vectors", "make_embeddings",
    "TrainConfig", "Trainer", "run", "train_supervised",
    "__version__",
]
