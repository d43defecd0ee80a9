"""Standard, adversarial and transfer training loops, grid-search CV and robust fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .adversary import PerturbationBudget, pgd_attack
from .data import DatasetManifest, ImageDataset, Record, fold_indices, kfold
from .errors import ConfigError, TrainingDiverged
from .model import ClassifierModel, GroupMask, set_trainable

log = logging.getLogger(__name__)

GRID_LEARNING_RATES = (1e-3, 3e-4, 1e-4)
GRID_BATCH_SIZES = (8, 16, 32)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    # step decay: divide the rate by lr_decay_factor once lr_decay_epoch epochs are done
    lr_decay_epoch: int | None = None
    lr_decay_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate and batch_size must be positive, epochs nonnegative")
        if self.weight_decay < 0 or self.lr_decay_factor <= 0:
            raise ConfigError("weight_decay must be nonnegative and lr_decay_factor positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FinetuneConfig:
    unfreeze: GroupMask = field(default_factory=lambda: GroupMask.suffix(3))
    learning_rate: float = 1e-5
    early_stop_patience: int = 10
    lr_decay_patience: int = 5
    lr_decay_factor: float = 10.0
    max_epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 5e-4
    # keep BatchNorm running statistics (estimated on adversarial inputs) fixed
    freeze_norm_stats: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.lr_decay_patience < 1:
            raise ConfigError("patience values must be positive")
        if self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must exceed 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unfreeze"] = list(self.unfreeze.trainable)
        return d


def _attack_generator(seed: int, epoch: int, batch_index: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, epoch, batch_index]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _set_train_mode(model: ClassifierModel, mask: GroupMask, freeze_norm_stats: bool = False) -> None:
    # frozen groups keep their normalization statistics fixed
    model.train()
    for flag, module in zip(mask.trainable, model.groups.values()):
        if not flag:
            module.eval()
    if freeze_norm_stats:
        for module in model.modules():
            if isinstance(module, torch.nn.modules.batchnorm._BatchNorm):
                module.eval()


def _trainable_mask(model: ClassifierModel) -> GroupMask:
    return GroupMask(
        tuple(any(p.requires_grad for p in g.parameters()) for g in model.groups.values())
    )


def make_optimizer(params, learning_rate, weight_decay=5e-4, betas=(0.9, 0.999)):
    return torch.optim.Adam(params, lr=learning_rate, betas=betas, weight_decay=weight_decay)


def train_epoch(
    model: ClassifierModel,
    data: ImageDataset,
    optimizer: torch.optim.Optimizer,
    batch_size: int,
    epoch: int,
    seed: int,
    budget: PerturbationBudget | None = None,
    freeze_norm_stats: bool = False,
) -> dict:
    """One pass over ``data``; every batch is replaced by its PGD version when ``budget`` is given."""
    mask = _trainable_mask(model)
    total_loss, correct, seen = 0.0, 0, 0
    for bi, (x, y) in enumerate(data.batches(batch_size, epoch, seed)):
        if budget is not None and budget.epsilon > 0:
            x = pgd_attack(model, x, y, budget, generator=_attack_generator(seed, epoch, bi))
        _set_train_mode(model, mask, freeze_norm_stats)
        optimizer.zero_grad(set_to_none=True)
        logits = model(x)
        loss = F.cross_entropy(logits, y)
        if not torch.isfinite(loss):
            model.eval()
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
        loss.backward()
        optimizer.step()
        total_loss += loss.item() * len(y)
        correct += (logits.argmax(1) == y).sum().item()
        seen += len(y)
    model.eval()
    return {"train_loss": total_loss / max(seen, 1), "train_acc": correct / max(seen, 1)}


def train_standard(
    model: ClassifierModel,
    train_data: ImageDataset,
    config: TrainConfig,
    budget: PerturbationBudget | None = None,
    val_data: ImageDataset | None = None,
) -> tuple[ClassifierModel, list[dict]]:
    """Adam training of the currently trainable groups; returns the model and a per-epoch trace."""
    params = [p for p in model.parameters() if p.requires_grad]
    trace: list[dict] = []
    if config.epochs == 0 or not params:
        return model, trace
    opt = make_optimizer(params, config.learning_rate, config.weight_decay, (config.beta1, config.beta2))
    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.lr_decay_epoch is not None and epoch >= config.lr_decay_epoch:
            lr = config.learning_rate / config.lr_decay_factor
        for group in opt.param_groups:
            group["lr"] = lr
        try:
            row = train_epoch(model, train_data, opt, config.batch_size, epoch, config.seed, budget)
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), trace) from exc
        row = {"epoch": epoch + 1, "lr": lr, **row}
        if val_data is not None:
            row["val_loss"], row["val_acc"] = evaluate_loss(model, val_data)
        log.info("epoch %d %s", epoch + 1, row)
        trace.append(row)
    return model, trace


def train_adversarial(
    model: ClassifierModel,
    train_data: ImageDataset,
    config: TrainConfig,
    budget: PerturbationBudget,
    val_data: ImageDataset | None = None,
) -> tuple[ClassifierModel, list[dict]]:
    """Same loop and hyperparameters as standard training, with every batch replaced by PGD examples."""
    return train_standard(model, train_data, config, budget=budget, val_data=val_data)


def transfer_schedule(
    model: ClassifierModel,
    data: ImageDataset,
    head_config: TrainConfig,
    full_config: TrainConfig,
    budget: PerturbationBudget | None = None,
) -> tuple[ClassifierModel, list[dict]]:
    """Train the head alone, then the whole network. Both phases are adversarial when ``budget`` is set."""
    set_trainable(model, GroupMask((False, False, False, False, True)))
    _, head_trace = train_standard(model, data, head_config, budget)
    set_trainable(model, GroupMask.all(True))
    _, full_trace = train_standard(model, data, full_config, budget)
    trace = [{"phase": "head", **r} for r in head_trace] + [{"phase": "full", **r} for r in full_trace]
    return model, trace


def transfer_configs(seed: int = 0) -> tuple[TrainConfig, TrainConfig]:
    """Head-only then full fine-tuning schedule for dermoscopy-scale transfer."""
    head = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=10, seed=seed)
    full = TrainConfig(learning_rate=3e-4, batch_size=16, epochs=25, lr_decay_epoch=15, seed=seed)
    return head, full


# ---------------------------------------------------------------------------
# evaluation


def _eval_batches(data: ImageDataset, batch_size: int):
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    for start in range(0, len(data), batch_size):
        yield start, data.images[start : start + batch_size], data.labels[start : start + batch_size]


def predict(model: ClassifierModel, data: ImageDataset, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([model(x).argmax(1) for _, x, _ in _eval_batches(data, batch_size)])


def evaluate(model: ClassifierModel, data: ImageDataset, batch_size: int = 256) -> float:
    return (predict(model, data, batch_size) == data.labels).double().mean().item()


def evaluate_loss(model: ClassifierModel, data: ImageDataset, batch_size: int = 256) -> tuple[float, float]:
    model.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for _, x, y in _eval_batches(data, batch_size):
            logits = model(x)
            total += F.cross_entropy(logits, y, reduction="sum").item()
            correct += (logits.argmax(1) == y).sum().item()
    return total / len(data), correct / len(data)


def robust_predictions(
    model: ClassifierModel, data: ImageDataset, budget: PerturbationBudget, seed: int = 0, batch_size: int = 256
) -> torch.Tensor:
    preds = []
    for start, x, y in _eval_batches(data, batch_size):
        x_adv = pgd_attack(model, x, y, budget, generator=_attack_generator(seed, 2**31, start))
        with torch.no_grad():
            preds.append(model(x_adv).argmax(1))
    return torch.cat(preds)


def evaluate_robust(
    model: ClassifierModel, data: ImageDataset, budget: PerturbationBudget, seed: int = 0, batch_size: int = 256
) -> float:
    """Accuracy on PGD examples; the attack's random starts are fixed by ``seed``."""
    return (robust_predictions(model, data, budget, seed, batch_size) == data.labels).double().mean().item()


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridSearchResult:
    best: TrainConfig
    table: list[dict]
    model: ClassifierModel | None = None
    trace: list[dict] = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return sum(len(row["fold_acc"]) for row in self.table)


def select_cell(table: Sequence[dict]) -> dict:
    """Highest mean CV accuracy; ties go to the lower learning rate, then the smaller batch."""
    if not table:
        raise ConfigError("empty grid")
    return min(table, key=lambda r: (-r["mean_acc"], r["learning_rate"], r["batch_size"]))


def grid_search_cv(
    model_factory: Callable[[], ClassifierModel],
    data: ImageDataset,
    base_config: TrainConfig,
    learning_rates: Sequence[float] = GRID_LEARNING_RATES,
    batch_sizes: Sequence[int] = GRID_BATCH_SIZES,
    folds: int = 5,
    refit: bool = True,
    budget: PerturbationBudget | None = None,
) -> GridSearchResult:
    """k-fold CV over learning rate x batch size, then (optionally) refit the winner on all of ``data``."""
    if not learning_rates or not batch_sizes:
        raise ConfigError("empty grid")
    manifest = DatasetManifest(
        [Record(image_id=i, label=int(y), split="train") for i, y in zip(data.ids, data.labels.tolist())],
        data.classes,
    )
    manifest = kfold(manifest, folds, base_config.seed)
    splits = [fold_indices(data, manifest, f) for f in range(folds)]
    table = []
    for lr in learning_rates:
        for bs in batch_sizes:
            cfg = replace(base_config, learning_rate=lr, batch_size=bs)
            accs = []
            for fold, (tr_idx, va_idx) in enumerate(splits):
                model = model_factory()
                try:
                    train_standard(model, data.subset(tr_idx), cfg, budget)
                    acc = evaluate(model, data.subset(va_idx))
                except TrainingDiverged:
                    acc = 0.0
                if not math.isfinite(acc):
                    acc = 0.0
                accs.append(acc)
            table.append({"learning_rate": lr, "batch_size": bs, "fold_acc": accs, "mean_acc": float(np.mean(accs))})
            log.info("grid cell lr=%g bs=%d mean acc %.4f", lr, bs, table[-1]["mean_acc"])
    chosen = select_cell(table)
    best = replace(base_config, learning_rate=chosen["learning_rate"], batch_size=chosen["batch_size"])
    result = GridSearchResult(best, table)
    if refit:
        result.model, result.trace = train_standard(model_factory(), data, best, budget)
    return result


# ---------------------------------------------------------------------------
# robust fine-tuning


def robust_finetune(
    model: ClassifierModel,
    train_data: ImageDataset,
    val_data: ImageDataset,
    config: FinetuneConfig,
) -> tuple[ClassifierModel, list[dict]]:
    """Standard fine-tuning of a suffix of layer groups with plateau decay and early stopping.

    The trace starts with an epoch-0 row for the incoming model, and the model
    with the lowest validation loss (possibly the incoming one) is restored at
    the end. All groups are trainable again on return.
    """
    mask = config.unfreeze
    if not mask.is_suffix:
        raise ConfigError(f"unfreeze mask {mask.trainable} is not a suffix of the group order")
    if not mask.any:
        return model, []
    set_trainable(model, mask)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(params, config.learning_rate, config.weight_decay)

    val_loss, val_acc = evaluate_loss(model, val_data)
    trace = [{"epoch": 0, "lr": config.learning_rate, "val_loss": val_loss, "val_acc": val_acc}]
    best_loss, best_state = val_loss, copy.deepcopy(model.state_dict())
    since_best = since_decay = 0
    lr = config.learning_rate
    try:
        for epoch in range(config.max_epochs):
            for group in opt.param_groups:
                group["lr"] = lr
            try:
                row = train_epoch(
                    model, train_data, opt, config.batch_size, epoch, config.seed, freeze_norm_stats=config.freeze_norm_stats
                )
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), trace) from exc
            val_loss, val_acc = evaluate_loss(model, val_data)
            trace.append({"epoch": epoch + 1, "lr": lr, **row, "val_loss": val_loss, "val_acc": val_acc})
            if val_loss < best_loss:
                best_loss, best_state = val_loss, copy.deepcopy(model.state_dict())
                since_best = since_decay = 0
            else:
                since_best += 1
                since_decay += 1
            if since_best >= config.early_stop_patience:
                break
            if since_decay >= config.lr_decay_patience:
                lr /= config.lr_decay_factor
                since_decay = 0
    finally:
        model.load_state_dict(best_state)
        set_trainable(model, GroupMask.all(True))
        model.eval()
    return model, trace
