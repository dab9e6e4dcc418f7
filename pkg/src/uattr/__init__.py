"""Attributing generated images to training data by unlearning, with leave-K-out validation."""

from .attribution import ScoreTable, score_influence_projected, score_pixel_cosine, score_unlearning, top_k
from .datasets import Dataset, DatasetSpec, PlantedGroup, generate
from .diffusion import DiffusionConfig, Example, ParamVector
from .fisher import FisherDiagonal, estimate_fisher, precondition
from .trainer import TrainConfig, train
from .unlearn import UnlearnConfig, unlearn, unlearn_sgd_baseline

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DatasetSpec", "DiffusionConfig", "Example", "FisherDiagonal", "ParamVector", "PlantedGroup",
    "ScoreTable", "TrainConfig", "UnlearnConfig", "estimate_fisher", "generate", "precondition",
    "score_influence_projected", "score_pixel_cosine", "score_unlearning", "top_k", "train", "unlearn",
    "unlearn_sgd_baseline",
]
