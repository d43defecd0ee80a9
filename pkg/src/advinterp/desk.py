"""Desk-scale stand-in for the full-resolution dermoscopy experiments.

Synthetic 32x32 lesions, the miniature grouped ResNet, and a perturbation
radius carried over from the 224x224 setting (eps=4 for ~50,000 pixels),
scaled linearly with the pixel count.

The fine-tuning study starts from robust models trained at the larger,
square-root-scaled radius: at the linear radius adversarial training costs
almost no clean accuracy at this size, leaving fine-tuning nothing to recover.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .adversary import PerturbationBudget, scale_epsilon
from .data import ImageDataset, channel_mean_std, synth_splits
from .model import ClassifierModel, GroupMask
from .training import (
    FinetuneConfig,
    TrainConfig,
    evaluate,
    evaluate_robust,
    robust_finetune,
    train_adversarial,
    train_standard,
)


@dataclass(frozen=True)
class DeskSetup:
    n_train: int = 200  # per class
    n_val: int = 30
    n_test: int = 100
    image_size: int = 32
    n_classes: int = 3
    amplitude: tuple[float, float] = (0.06, 0.12)
    faint_fraction: float = 0.15
    faint_amplitude: tuple[float, float] = (0.01, 0.03)
    data_seed: int = 0
    widths: tuple[int, ...] = (8, 16, 32, 64)
    eps_ref: float = 4.0
    pixels_ref: int = 50_000
    eps_rule: str = "linear"
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=1e-3, batch_size=16, epochs=30, lr_decay_epoch=20)
    )

    @property
    def epsilon(self) -> float:
        return scale_epsilon(self.eps_ref, self.pixels_ref, self.image_size**2, self.eps_rule)

    @property
    def budget(self) -> PerturbationBudget:
        return PerturbationBudget(self.epsilon)

    def data(self) -> dict[str, ImageDataset]:
        splits, _ = synth_splits(
            self.n_train,
            self.n_test,
            self.image_size,
            self.n_classes,
            self.data_seed,
            self.n_val,
            amplitude=self.amplitude,
            faint_fraction=self.faint_fraction,
            faint_amplitude=self.faint_amplitude,
        )
        return splits

    def model(self, train_data: ImageDataset, seed: int) -> ClassifierModel:
        mean, std = channel_mean_std(train_data)
        return ClassifierModel(self.n_classes, self.widths, 3, self.image_size, False, mean, std, seed=seed)

    def config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)


def train_pair(setup: DeskSetup, seed: int, splits=None) -> dict:
    """Standard and adversarially trained models sharing init, data order and hyperparameters."""
    splits = splits or setup.data()
    cfg = setup.config(seed)
    standard, std_trace = train_standard(setup.model(splits["train"], seed), splits["train"], cfg)
    robust, rob_trace = train_adversarial(setup.model(splits["train"], seed), splits["train"], cfg, setup.budget)
    return {"standard": standard, "robust": robust, "traces": {"standard": std_trace, "robust": rob_trace}}


def pair_metrics(setup: DeskSetup, pair: dict, test: ImageDataset, seed: int = 0) -> dict:
    out = {}
    for name in ("standard", "robust"):
        model = pair[name]
        out[f"{name}_clean"] = evaluate(model, test)
        out[f"{name}_robust"] = evaluate_robust(model, test, setup.budget, seed=seed)
    return out


FINETUNE_EPS_RULE = "sqrt"


def finetune_source(setup: DeskSetup, seed: int, splits=None) -> ClassifierModel:
    """Robust model for the fine-tuning study: same recipe, square-root-scaled radius."""
    strong = replace(setup, eps_rule=FINETUNE_EPS_RULE)
    splits = splits or setup.data()
    model, _ = train_adversarial(strong.model(splits["train"], seed), splits["train"], strong.config(seed), strong.budget)
    return model


def finetune_robust(setup: DeskSetup, robust: ClassifierModel, splits, seed: int, first_group: int = 3, **overrides):
    cfg = FinetuneConfig(unfreeze=GroupMask.suffix(first_group), seed=seed, batch_size=setup.train.batch_size, **overrides)
    return robust_finetune(robust, splits["train"], splits["val"], cfg)
