"""
partrobust core modules
Part-based image classifiers trained for adversarial robustness, with the
synthetic data, attacks and evaluation needed to measure them
"""

__version__ = "1.0.0"
__author__ = "partrobust"

# Core module imports
from .attacks import AttackConfig, PGDAttack, SquareRandomAttack, epsilon_sweep, pgd_attack, square_random_attack
from .datagen import Dataset, DatasetSpec, DatasetSplits, corrupt, generate_dataset
from .diffcore import Graph, Tensor
from .evalreport import EvalConfig, Metrics, benchmark_eval, evaluate, tradeoff_report
from .exceptions import (CheckpointLoadError, ConfigurationError, DataError, InputError, NumericError,
                         PartRobustError, UsageError)
from .losses import LossConfig, compute_loss
from .models import ModelConfig, ModelParams, PartModel, init_params
from .partfeat import PartFeatures, bbox_features, downsample_features, pixel_logits
from .trainer import Checkpoint, SweepConfig, TrainConfig, sweep, train

__all__ = [
    'AttackConfig',
    'PGDAttack',
    'SquareRandomAttack',
    'pgd_attack',
    'square_random_attack',
    'epsilon_sweep',
    'Dataset',
    'DatasetSpec',
    'DatasetSplits',
    'generate_dataset',
    'corrupt',
    'Graph',
    'Tensor',
    'EvalConfig',
    'Metrics',
    'evaluate',
    'benchmark_eval',
    'tradeoff_report',
    'PartRobustError',
    'ConfigurationError',
    'UsageError',
    'InputError',
    'DataError',
    'NumericError',
    'CheckpointLoadError',
    'LossConfig',
    'compute_loss',
    'ModelConfig',
    'ModelParams',
    'PartModel',
    'init_params',
    'PartFeatures',
    'bbox_features',
    'downsample_features',
    'pixel_logits',
    'Checkpoint',
    'TrainConfig',
    'SweepConfig',
    'train',
    'sweep',
]
