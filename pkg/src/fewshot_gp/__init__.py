"""Few-shot spatial regression with a task-conditioned neural Gaussian process."""

__version__ = "0.1.0"

from .autodiff import Tape, backward, finite_difference_check
from .baselines import GPR, FineTunedNN, NeuralProcess, SharedNN, build_model, ft_adapt, model_from_meta
from .data import (
    DatasetCollection,
    SyntheticConfig,
    TaskDataset,
    generate_synthetic,
    load_csv,
    normalize,
    split,
    write_csv,
)
from .gp import PRESETS, Architecture, Mode, Objective, SupportSet, TaskGP
from .trainer import TrainConfig, sample_episode, train, validate
from .evaluate import EvalReport, ExperimentConfig, GridSpec, ablate, evaluate, predict_grid, run_experiment, sweep
