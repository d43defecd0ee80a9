"""Adversarially robust classifiers and their saliency maps, at desk scale."""

from .adversary import Norm, PerturbationBudget, pgd_attack, project, scale_epsilon
from .attribution import (
    BaselineKind,
    BaselineSpec,
    grad_cam,
    gradient_saliency,
    integrated_gradients,
    occlusion,
    postprocess,
)
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, InputShapeError, NumericError, TrainingDiverged
from .model import GROUP_NAMES, ClassifierModel, GroupMask, load_checkpoint, save_checkpoint
from .training import FinetuneConfig, TrainConfig, grid_search_cv, robust_finetune, train_adversarial, train_standard

__version__ = "0.1.0"
