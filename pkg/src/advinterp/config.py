"""Experiment configuration: nested dataclasses loaded from YAML/JSON with strict validation."""

from __future__ import annotations

import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adversary import Norm, PerturbationBudget, scale_epsilon
from .errors import ConfigError
from .model import GROUP_NAMES, GroupMask
from .training import FinetuneConfig, TrainConfig

OUTPUT_ROOT_ENV = "ADVINTERP_OUTPUT_ROOT"


@dataclass
class DataSection:
    mode: str = "synthetic"
    seed: int = 0
    n_train: int = 200  # per class
    n_val: int = 30
    n_test: int = 100
    n_folds: int = 5
    image_size: int = 32
    n_classes: int = 3
    amplitude: list[float] = field(default_factory=lambda: [0.06, 0.12])
    faint_fraction: float = 0.15
    faint_amplitude: list[float] = field(default_factory=lambda: [0.01, 0.03])
    # ingest mode
    directory: str = ""
    label_file: str = ""
    class_column: str = "class_name"
    classes: list[str] = field(default_factory=list)
    crop_size: int | None = 450
    augment: bool = False

    def validate(self):
        if self.mode not in ("synthetic", "ingest"):
            raise ConfigError(f"data.mode must be 'synthetic' or 'ingest', got {self.mode!r}")
        if min(self.n_train, self.n_test, self.n_val) < 0:
            raise ConfigError("data split sizes must be nonnegative")
        if self.n_folds < 2:
            raise ConfigError("data.n_folds must be at least 2")
        if self.mode == "ingest" and not (self.directory and self.label_file and self.classes):
            raise ConfigError("ingest mode needs data.directory, data.label_file and data.classes")
        if self.mode == "synthetic" and self.image_size < 16:
            raise ConfigError("data.image_size must be at least 16")

    @property
    def class_count(self) -> int:
        return len(self.classes) if self.mode == "ingest" else self.n_classes


@dataclass
class ModelSection:
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    stem_downsample: bool = False
    seed: int = 0
    normalization: str = "dataset"
    # optional source-task checkpoint; when set, training follows the head-then-full schedule
    pretrained: str = ""

    def validate(self):
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigError("model.widths must be 4 positive channel counts")
        if self.normalization not in ("dataset", "imagenet"):
            raise ConfigError("model.normalization must be 'dataset' or 'imagenet'")


@dataclass
class FinetuneSection:
    learning_rate: float = 1e-5
    early_stop_patience: int = 10
    lr_decay_patience: int = 5
    lr_decay_factor: float = 10.0
    max_epochs: int = 100
    batch_size: int = 16
    freeze_norm_stats: bool = True
    first_groups: list[int] = field(default_factory=lambda: [5, 4, 3, 2, 1])

    def validate(self):
        for g in self.first_groups:
            if g == len(GROUP_NAMES) + 1:
                raise ConfigError("an all-frozen mask trains nothing; unfreeze at least group 5")
            if not 1 <= g <= len(GROUP_NAMES):
                raise ConfigError(f"finetune.first_groups entries must be in 1..{len(GROUP_NAMES)}")

    def config(self, first_group: int, seed: int) -> FinetuneConfig:
        return FinetuneConfig(
            unfreeze=GroupMask.suffix(first_group),
            learning_rate=self.learning_rate,
            early_stop_patience=self.early_stop_patience,
            lr_decay_patience=self.lr_decay_patience,
            lr_decay_factor=self.lr_decay_factor,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            freeze_norm_stats=self.freeze_norm_stats,
            seed=seed,
        )


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    weight_decay: float = 5e-4
    lr_decay_epoch: int | None = 20
    lr_decay_factor: float = 10.0
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    grid_learning_rates: list[float] = field(default_factory=lambda: [1e-3, 3e-4, 1e-4])
    grid_batch_sizes: list[int] = field(default_factory=lambda: [8, 16, 32])
    head_learning_rate: float = 1e-3
    head_batch_size: int = 32
    head_epochs: int = 10
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    def validate(self):
        self.config(self.seed)
        if not self.grid_learning_rates or not self.grid_batch_sizes:
            raise ConfigError("empty grid")
        self.finetune.validate()

    def config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            lr_decay_epoch=self.lr_decay_epoch,
            lr_decay_factor=self.lr_decay_factor,
            seed=self.seed if seed is None else seed,
        )

    def head_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.head_learning_rate,
            batch_size=self.head_batch_size,
            epochs=self.head_epochs,
            weight_decay=self.weight_decay,
            seed=self.seed if seed is None else seed,
        )


@dataclass
class AdversarySection:
    # explicit radius; when null it is derived from eps_ref via the scaling rule
    epsilon: float | None = None
    eps_ref: float = 4.0
    pixels_ref: int = 50_000
    eps_rule: str = "linear"
    norm: str = "L2"
    steps: int = 7
    step_size: float | None = None
    random_start: bool = True
    eval_seed: int = 0
    # sweep values are given at the reference resolution and rescaled like eps_ref
    epsilon_list: list[float] = field(default_factory=lambda: [0.5, 2.0, 4.0, 7.0, 9.0])

    def validate(self):
        if self.eps_rule not in ("linear", "sqrt"):
            raise ConfigError("adversary.eps_rule must be 'linear' or 'sqrt'")
        Norm(self.norm)
        self.budget(1.0)

    def scaled(self, eps_ref: float, image_size: int) -> float:
        if eps_ref == 0:
            return 0.0
        return scale_epsilon(eps_ref, self.pixels_ref, image_size * image_size, self.eps_rule)

    def resolve(self, image_size: int) -> float:
        return self.epsilon if self.epsilon is not None else self.scaled(self.eps_ref, image_size)

    def budget(self, epsilon: float) -> PerturbationBudget:
        return PerturbationBudget(epsilon, self.norm, self.steps, self.step_size, self.random_start)


@dataclass
class AttributionSection:
    methods: list[str] = field(default_factory=lambda: ["gradient", "integrated_gradients"])
    n_images: int = 4
    # None selects the first n_images test images; an explicit list (even empty) is used as given
    image_ids: list[str] | None = None
    include_misclassified: bool = False
    ig_steps: int = 128
    baseline: str = "UNIFORM"
    sigma: float = 1.0
    baseline_seed: int = 0
    occlusion_patch: int = 8
    occlusion_stride: int = 4
    occlusion_mode: str = "probability"
    gradcam_layer: str = "group4"
    percentile: float = 99.0
    cell_size: int = 96
    overlay: bool = False

    def validate(self):
        from .attribution import METHODS, BaselineKind

        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown attribution methods {sorted(unknown)}; choose from {sorted(METHODS)}")
        BaselineKind(self.baseline)
        if self.ig_steps < 1 or self.n_images < 0 or self.cell_size < 8:
            raise ConfigError("ig_steps >= 1, n_images >= 0 and cell_size >= 8 required")
        if self.gradcam_layer not in GROUP_NAMES[:-1]:
            raise ConfigError(f"gradcam_layer must be one of {GROUP_NAMES[:-1]}")
        if not 0 < self.percentile <= 100:
            raise ConfigError("percentile must be in (0, 100]")


@dataclass
class OutputSection:
    root: str = ""
    run_id: str = "default"

    def validate(self):
        if not self.run_id or "/" in self.run_id:
            raise ConfigError("output.run_id must be a non-empty name without '/'")


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    adversary: AdversarySection = field(default_factory=AdversarySection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> "ExperimentConfig":
        for f in dataclasses.fields(self):
            try:
                getattr(self, f.name).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{f.name}: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {}, "").validate()

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output.root or "runs")

    def run_dir(self) -> Path:
        return self.output_root() / self.output.run_id

    def compute_dict(self) -> dict:
        """Everything except output placement; used to key resumable artifacts."""
        d = self.to_dict()
        d.pop("output")
        return d


def _check_value(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(inner[0], value, where)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return [_check_value(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        # YAML 1.1 reads exponents without a dot (3e-4) as strings
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where} must be a finite number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    raise ConfigError(f"unsupported config type at {where}")


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {k: _check_value(hints[k], v, f"{where}.{k}" if where else k) for k, v in d.items()}
    return cls(**kwargs)


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config file and apply ``section.key=value`` overrides."""
    raw = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(value)
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
