"""Experiment drivers behind the command-line front end.

Every artifact is keyed by a hash of the configuration that produced it. A
run record is written only after its checkpoint, so a record whose checkpoint
hash still matches marks finished work, and reruns skip it.
"""

from __future__ import annotations

import io
import itertools
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adversary import PerturbationBudget
from .attribution import (
    BaselineSpec,
    gradient_saliency,
    grad_cam,
    integrated_gradients,
    occlusion,
    postprocess,
    saliency_similarity,
)
from .config import ExperimentConfig
from .data import (
    AugmentPolicy,
    DatasetManifest,
    ImageDataset,
    balanced_subset,
    carve_validation,
    channel_mean_std,
    dataset_from_manifest,
    ingest,
    kfold,
    synth_splits,
)
from .errors import ConfigError, DataError
from .model import (
    GROUP_NAMES,
    IMAGENET_MEAN,
    IMAGENET_STD,
    ClassifierModel,
    group_checksum,
    load_checkpoint,
    replace_head,
    save_checkpoint,
)
from .records import RunRecord, atomic_write, config_hash, read_json, sha256_file, write_json
from .render import heatmap_cell, input_cell, save_grid
from .training import (
    evaluate,
    evaluate_robust,
    grid_search_cv,
    predict,
    robust_finetune,
    train_standard,
    transfer_schedule,
)

log = logging.getLogger(__name__)

MONOTONE_TOLERANCE = 0.02
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def for_config(cls, cfg: ExperimentConfig) -> "RunPaths":
        return cls(cfg.run_dir())

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def figures(self) -> Path:
        return self.root / "figures"

    @property
    def records(self) -> Path:
        return self.root / "records"

    @property
    def data(self) -> Path:
        return self.root / "data"

    def rel(self, path) -> str:
        return Path(path).relative_to(self.root).as_posix()


# ---------------------------------------------------------------------------
# data


def data_key(cfg: ExperimentConfig) -> str:
    return config_hash(asdict(cfg.data))


def _train_policy(cfg: ExperimentConfig) -> AugmentPolicy | None:
    if not cfg.data.augment:
        return None
    # images are already cropped and resized when stored
    return AugmentPolicy(crop_size=None, output_size=cfg.data.image_size)


def prepare_data(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    """Materialize the configured splits as ``manifest.json`` + ``dataset.npz``; no-op if present."""
    d = paths.data / data_key(cfg)
    manifest_path, arrays_path = d / "manifest.json", d / "dataset.npz"
    if manifest_path.exists() and arrays_path.exists():
        return d
    dc = cfg.data
    if dc.mode == "synthetic":
        splits, manifest = synth_splits(
            dc.n_train,
            dc.n_test,
            dc.image_size,
            dc.n_classes,
            dc.seed,
            dc.n_val,
            amplitude=tuple(dc.amplitude),
            faint_fraction=dc.faint_fraction,
            faint_amplitude=tuple(dc.faint_amplitude),
        )
    else:
        raw = ingest(dc.directory, dc.label_file, dc.class_column)
        manifest = balanced_subset(raw, dc.classes, dc.n_train, dc.n_test + dc.n_val, dc.seed)
        if dc.n_val:
            manifest = carve_validation(manifest, dc.n_val * len(dc.classes), dc.seed)
        manifest.rejects = raw.rejects
        policy = AugmentPolicy.identity(dc.crop_size, dc.image_size)
        splits = {tag: dataset_from_manifest(manifest, tag, policy) for tag in SPLITS if manifest.split(tag)}
    manifest = kfold(manifest, dc.n_folds, dc.seed)
    arrays = {}
    for tag, ds in splits.items():
        arrays[f"{tag}_images"] = ds.images.numpy()
        arrays[f"{tag}_labels"] = ds.labels.numpy()
        arrays[f"{tag}_ids"] = np.array(ds.ids)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(arrays_path, buf.getvalue())
    write_json(manifest_path, manifest.to_dict())
    return d


def load_data(cfg: ExperimentConfig, paths: RunPaths) -> dict[str, ImageDataset]:
    d = prepare_data(cfg, paths)
    manifest = DatasetManifest.load(d / "manifest.json")
    out = {}
    with np.load(d / "dataset.npz") as z:
        for tag in SPLITS:
            if f"{tag}_images" in z:
                out[tag] = ImageDataset(
                    torch.from_numpy(z[f"{tag}_images"].copy()),
                    torch.from_numpy(z[f"{tag}_labels"].copy()),
                    [str(i) for i in z[f"{tag}_ids"]],
                    list(manifest.classes),
                    _train_policy(cfg) if tag == "train" else None,
                )
    if "train" not in out or "test" not in out:
        raise DataError("the prepared dataset needs nonempty train and test splits")
    return out


# ---------------------------------------------------------------------------
# models


def build_model(cfg: ExperimentConfig, train: ImageDataset, seed: int) -> ClassifierModel:
    mc = cfg.model
    num_classes = len(train.classes)
    if mc.pretrained:
        model = load_checkpoint(mc.pretrained)
        if model.input_size != cfg.data.image_size:
            raise ConfigError(f"pretrained model expects {model.input_size}px inputs, data has {cfg.data.image_size}px")
        return replace_head(model, num_classes, seed)
    if mc.normalization == "dataset":
        mean, std = channel_mean_std(train)
    else:
        mean, std = IMAGENET_MEAN, IMAGENET_STD
    return ClassifierModel(num_classes, mc.widths, 3, cfg.data.image_size, mc.stem_downsample, mean, std, seed=seed)


def default_epsilon(cfg: ExperimentConfig) -> float:
    return cfg.adversary.resolve(cfg.data.image_size)


def eval_budget(cfg: ExperimentConfig, epsilon: float | None = None) -> PerturbationBudget:
    return cfg.adversary.budget(default_epsilon(cfg) if epsilon is None else epsilon)


def _save_checkpoint_atomic(model, path: Path, extra: dict) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    save_checkpoint(model, tmp, extra)
    os.replace(tmp, path)


def _finished(paths: RunPaths, name: str, key_hash: str) -> RunRecord | None:
    path = paths.records / f"{name}.json"
    if not path.exists():
        return None
    record = RunRecord.load(path)
    if record.config_hash != key_hash:
        return None
    for rel, sha in record.summary.get("checkpoint_sha256", {}).items():
        ckpt = paths.root / rel
        if not ckpt.exists() or sha256_file(ckpt) != sha:
            return None
    return record


def _model_metrics(cfg: ExperimentConfig, model, test: ImageDataset) -> dict:
    budget = eval_budget(cfg)
    return {
        "clean_acc": evaluate(model, test),
        "robust_acc": evaluate_robust(model, test, budget, seed=cfg.adversary.eval_seed),
        "eval_epsilon": budget.epsilon,
        "checksum": group_checksum(model),
    }


def _store(paths: RunPaths, cfg, command, name, key, seed, key_hash, model, trace, summary) -> RunRecord:
    ckpt = paths.checkpoints / f"{name}.pt"
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    _save_checkpoint_atomic(model, ckpt, {"name": name, "config_hash": key_hash})
    summary = dict(summary, checkpoint_sha256={paths.rel(ckpt): sha256_file(ckpt)})
    record = RunRecord(cfg.output.run_id, command, name, key, seed, key_hash, trace, summary, [paths.rel(ckpt)])
    record.save(paths.records / f"{name}.json")
    return record


def train_model(
    cfg: ExperimentConfig, paths: RunPaths, splits: dict, seed: int, epsilon: float = 0.0
) -> tuple[ClassifierModel, RunRecord]:
    """Train (or reload) one model; ``epsilon > 0`` makes it adversarial with the same hyperparameters."""
    budget = cfg.adversary.budget(epsilon) if epsilon > 0 else None
    tc = cfg.train
    key = {
        "data": asdict(cfg.data),
        "model": asdict(cfg.model),
        "train": asdict(tc.config(seed)),
        "transfer": asdict(tc.head_config(seed)) if cfg.model.pretrained else None,
        "budget": budget.to_dict() if budget else None,
        "eval": {"budget": eval_budget(cfg).to_dict(), "seed": cfg.adversary.eval_seed},
    }
    h = config_hash(key)
    name = f"{'robust' if budget else 'standard'}-s{seed}-{h[:8]}"
    record = _finished(paths, name, h)
    if record is not None:
        log.info("%s is up to date", name)
        return load_checkpoint(paths.root / record.checkpoints[0]), record

    model = build_model(cfg, splits["train"], seed)
    if cfg.model.pretrained:
        model, trace = transfer_schedule(model, splits["train"], tc.head_config(seed), tc.config(seed), budget)
    else:
        model, trace = train_standard(model, splits["train"], tc.config(seed), budget, val_data=splits.get("val"))
    summary = {"epsilon": budget.epsilon if budget else 0.0, **_model_metrics(cfg, model, splits["test"])}
    if cfg.model.pretrained:
        # stands in for large-scale natural-image pretraining; not claimed equivalent
        summary["pretraining"] = "substitute source-task checkpoint"
    record = _store(paths, cfg, "train", name, key, seed, h, model, trace, summary)
    return model, record


def finetune_model(
    cfg: ExperimentConfig, paths: RunPaths, splits: dict, robust_ckpt: Path, first_group: int, seed: int
) -> tuple[ClassifierModel, RunRecord]:
    if "val" not in splits:
        raise DataError("robust fine-tuning needs a validation split; set data.n_val > 0")
    ft = cfg.train.finetune.config(first_group, seed)
    key = {
        "data": asdict(cfg.data),
        "source_sha256": sha256_file(robust_ckpt),
        "finetune": ft.to_dict(),
        "eval": {"budget": eval_budget(cfg).to_dict(), "seed": cfg.adversary.eval_seed},
    }
    h = config_hash(key)
    name = f"finetune-g{first_group}-s{seed}-{h[:8]}"
    record = _finished(paths, name, h)
    if record is not None:
        return load_checkpoint(paths.root / record.checkpoints[0]), record

    model = load_checkpoint(robust_ckpt)
    frozen = [g for g, t in zip(GROUP_NAMES, ft.unfreeze.trainable) if not t]
    before = group_checksum(model, frozen)
    model, trace = robust_finetune(model, splits["train"], splits["val"], ft)
    summary = {
        "first_group": first_group,
        "frozen_groups": frozen,
        "frozen_unchanged": group_checksum(model, frozen) == before,
        **_model_metrics(cfg, model, splits["test"]),
    }
    record = _store(paths, cfg, "finetune-groups", name, key, seed, h, model, trace, summary)
    return model, record


# ---------------------------------------------------------------------------
# saliency


def compute_map(cfg: ExperimentConfig, model, image: torch.Tensor, target: int, method: str):
    ac = cfg.attribution
    if method == "gradient":
        raw = gradient_saliency(model, image, target)
    elif method == "integrated_gradients":
        spec = BaselineSpec(ac.baseline, ac.sigma, ac.baseline_seed)
        raw = integrated_gradients(model, image, spec, target, ac.ig_steps)
    elif method == "occlusion":
        raw = occlusion(model, image, target, ac.occlusion_patch, ac.occlusion_stride, mode=ac.occlusion_mode)
    elif method == "grad_cam":
        raw = grad_cam(model, image, target, ac.gradcam_layer)
    else:
        raise ConfigError(f"unknown attribution method {method!r}")
    return postprocess(raw, image.shape[-2:], ac.percentile), raw


def select_images(cfg: ExperimentConfig, models: dict, data: ImageDataset) -> list[dict]:
    """Rows for a figure: correctly classified by every model unless misclassified images are requested."""
    ac = cfg.attribution
    if ac.image_ids is not None:
        index = {image_id: i for i, image_id in enumerate(data.ids)}
        missing = [i for i in ac.image_ids if i not in index]
        if missing:
            raise DataError(f"unknown image ids {missing[:5]}")
        candidates, limit = [index[i] for i in ac.image_ids], len(ac.image_ids)
    else:
        candidates, limit = list(range(len(data))), ac.n_images
    if limit == 0 or not candidates:
        return []
    preds = {name: predict(m, data.subset(candidates)).tolist() for name, m in models.items()}
    rows = []
    for k, i in enumerate(candidates):
        label = int(data.labels[i])
        p = {name: preds[name][k] for name in models}
        wrong = sorted(name for name, v in p.items() if v != label)
        if wrong and not ac.include_misclassified:
            continue
        rows.append({"image_id": data.ids[i], "label": label, "predictions": p, "misclassified": wrong})
        if len(rows) == limit:
            break
    return rows


def render_rows(cfg: ExperimentConfig, models: dict, data: ImageDataset, rows: list[dict]):
    """Fill each row's ``maps`` (model, method) cells; returns grid cells and the completed rows."""
    ac = cfg.attribution
    index = {image_id: i for i, image_id in enumerate(data.ids)}
    cells, done = [], []
    for row in rows:
        image = data.images[index[row["image_id"]]]
        line = [input_cell(image.numpy(), ac.cell_size)]
        maps = []
        for spec in row["maps"]:
            smap, raw = compute_map(cfg, models[spec["model"]], image, row["label"], spec["method"])
            line.append(heatmap_cell(smap.values, ac.cell_size, image.numpy() if ac.overlay else None))
            maps.append(dict(spec, target_class=raw.target_class, cap=smap.cap, params=raw.params))
        cells.append(line)
        done.append(dict(row, maps=maps))
    return cells, done


def emit_figure(
    cfg: ExperimentConfig, paths: RunPaths, name: str, models: dict, checkpoints: dict, data: ImageDataset, rows: list
) -> dict:
    """Render a grid to ``figures/<name>.png`` with a sidecar sufficient to regenerate it."""
    cells, rows = render_rows(cfg, models, data, rows)
    png = save_grid(cells, cfg.attribution.cell_size, paths.figures / f"{name}.png")
    sidecar = {
        "figure": paths.rel(png) if png else None,
        "config": cfg.compute_dict(),
        "split": "test",
        "checkpoints": {m: {"path": paths.rel(p), "sha256": sha256_file(p)} for m, p in checkpoints.items()},
        "columns": ["input"] + [f"{s['model']}/{s['method']}" for s in (rows[0]["maps"] if rows else [])],
        "rows": rows,
    }
    write_json(paths.figures / f"{name}.json", sidecar)
    return sidecar


def regenerate_figure(sidecar_path, out_path) -> Path | None:
    """Re-render a figure from its sidecar alone; checkpoints are verified against their recorded hashes."""
    sidecar_path = Path(sidecar_path)
    side = read_json(sidecar_path)
    paths = RunPaths(sidecar_path.parent.parent)
    cfg = ExperimentConfig.from_dict(side["config"])
    models = {}
    for name, ck in side["checkpoints"].items():
        path = paths.root / ck["path"]
        if sha256_file(path) != ck["sha256"]:
            raise DataError(f"checkpoint {path} changed since the figure was made")
        models[name] = load_checkpoint(path)
    data = load_data(cfg, paths)[side["split"]]
    rows = [dict(r, maps=[{"model": m["model"], "method": m["method"]} for m in r["maps"]]) for r in side["rows"]]
    cells, _ = render_rows(cfg, models, data, rows)
    return save_grid(cells, cfg.attribution.cell_size, out_path)


def comparison_rows(cfg: ExperimentConfig, models: dict, data: ImageDataset) -> list[dict]:
    """Rows = images, columns = methods x models."""
    rows = select_images(cfg, models, data)
    for row in rows:
        row["maps"] = [{"model": m, "method": meth} for m in models for meth in cfg.attribution.methods]
    return rows


# ---------------------------------------------------------------------------
# commands


def command_record(paths: RunPaths, name: str, payload: dict) -> dict:
    write_json(paths.records / f"{name}.json", payload)
    return payload


def attack_eval(cfg: ExperimentConfig, paths: RunPaths, splits: dict, checkpoints: dict, epsilons: list[float]) -> dict:
    test = splits["test"]
    rows = []
    for name, path in checkpoints.items():
        model = load_checkpoint(path)
        accs = {}
        for eps in sorted(set(epsilons)):
            accs[repr(float(eps))] = evaluate_robust(model, test, cfg.adversary.budget(eps), seed=cfg.adversary.eval_seed)
        rows.append({"model": name, "sha256": sha256_file(path), "clean_acc": evaluate(model, test), "robust_acc": accs})
    return {"epsilons": sorted(set(float(e) for e in epsilons)), "rows": rows}


def is_monotone(accs: list[float], tolerance: float = MONOTONE_TOLERANCE) -> bool:
    """Non-increasing up to ``tolerance`` between any earlier and later entry."""
    return all(later <= earlier + tolerance for earlier, later in itertools.combinations(accs, 2))


def sweep_epsilon(cfg: ExperimentConfig, paths: RunPaths, splits: dict, eps_refs: list[float]) -> dict:
    size = cfg.data.image_size
    seed = cfg.train.seed
    scaled = [cfg.adversary.scaled(e, size) for e in eps_refs]
    grid = sorted({0.0, *scaled})
    test = splits["test"]
    models, ckpts, table = {}, {}, []
    for ref, eps in zip(eps_refs, scaled):
        model, record = train_model(cfg, paths, splits, seed, eps)
        name = f"eps{ref:g}"
        models[name], ckpts[name] = model, paths.root / record.checkpoints[0]
        accs = [evaluate_robust(model, test, cfg.adversary.budget(e), seed=cfg.adversary.eval_seed) for e in grid]
        table.append(
            {
                "eps_ref": ref,
                "epsilon": eps,
                "model": record.name,
                "clean_acc": evaluate(model, test),
                "robust_acc": dict(zip((repr(e) for e in grid), accs)),
                "monotone": is_monotone(accs),
            }
        )
    figures = []
    tag = config_hash([sha256_file(p) for p in ckpts.values()])[:8]
    for row in select_images(cfg, models, test):
        row["maps"] = [{"model": m, "method": meth} for m in models for meth in cfg.attribution.methods]
        fig = emit_figure(cfg, paths, f"sweep-{tag}-{row['image_id']}", models, ckpts, test, [row])
        figures.append(fig["figure"])
    return {"eval_epsilons": grid, "table": table, "figures": figures}


@dataclass
class SimilarityReport:
    seeds: list[int]
    models: list[str]
    method: str
    images: list[dict] = field(default_factory=list)

    @property
    def mean(self) -> float:
        scores = [p["similarity"] for img in self.images for p in img["pairs"]]
        return float(np.mean(scores)) if scores else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityReport":
        return cls(**d)

    def save(self, path) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "SimilarityReport":
        return cls.from_dict(read_json(path))


def seed_study(cfg: ExperimentConfig, paths: RunPaths, splits: dict, seeds: list[int], epsilon: float) -> SimilarityReport:
    """One model per seed, pairwise rank correlation of their saliency maps per image."""
    test = splits["test"]
    models, ckpts = {}, {}
    for pos, seed in enumerate(seeds):
        model, record = train_model(cfg, paths, splits, seed, epsilon)
        name = f"run{pos}-seed{seed}"
        models[name], ckpts[name] = model, paths.root / record.checkpoints[0]
    method = cfg.attribution.methods[0]
    rows = select_images(cfg, models, test)
    for row in rows:
        row["maps"] = [{"model": m, "method": method} for m in models]
    report = SimilarityReport(list(seeds), list(models), method)
    index = {image_id: i for i, image_id in enumerate(test.ids)}
    for row in rows:
        image = test.images[index[row["image_id"]]]
        maps = [compute_map(cfg, models[m], image, row["label"], method)[0].values for m in models]
        pairs = [
            {"a": i, "b": j, "similarity": saliency_similarity(maps[i], maps[j])}
            for i, j in itertools.combinations(range(len(maps)), 2)
        ]
        report.images.append({"image_id": row["image_id"], "pairs": pairs})
    emit_figure(cfg, paths, f"seed-study-{config_hash(report.models)[:8]}", models, ckpts, test, rows)
    return report


def finetune_groups(
    cfg: ExperimentConfig, paths: RunPaths, splits: dict, robust_ckpt: Path, standard_ckpt: Path, first_groups: list[int]
) -> dict:
    """Fine-tune each group suffix of a robust model; the table includes both endpoints."""
    test = splits["test"]
    budget = eval_budget(cfg)
    models = {"standard": load_checkpoint(standard_ckpt), "robust": load_checkpoint(robust_ckpt)}
    ckpts = {"standard": Path(standard_ckpt), "robust": Path(robust_ckpt)}
    for g in first_groups:
        model, record = finetune_model(cfg, paths, splits, robust_ckpt, g, cfg.train.seed)
        name = f"groups{g}-{len(GROUP_NAMES)}"
        models[name], ckpts[name] = model, paths.root / record.checkpoints[0]
    table = []
    for name, model in models.items():
        table.append(
            {
                "model": name,
                "clean_acc": evaluate(model, test),
                "robust_acc": evaluate_robust(model, test, budget, seed=cfg.adversary.eval_seed),
            }
        )
    for name in list(models)[2:]:
        record = RunRecord.load(paths.records / f"{Path(ckpts[name]).stem}.json")
        row = next(r for r in table if r["model"] == name)
        row["frozen_unchanged"] = record.summary["frozen_unchanged"]
        row["epochs"] = len(record.metrics) - 1
    rows = comparison_rows(cfg, models, test)
    fig = emit_figure(cfg, paths, f"finetune-groups-{config_hash([sha256_file(p) for p in ckpts.values()])[:8]}", models, ckpts, test, rows)
    return {"eval_epsilon": budget.epsilon, "table": table, "figure": fig["figure"]}


def grid_search(cfg: ExperimentConfig, paths: RunPaths, splits: dict, epsilon: float = 0.0) -> dict:
    train = splits["train"]
    seed = cfg.train.seed
    budget = cfg.adversary.budget(epsilon) if epsilon > 0 else None
    result = grid_search_cv(
        lambda: build_model(cfg, train, seed),
        train,
        cfg.train.config(seed),
        cfg.train.grid_learning_rates,
        cfg.train.grid_batch_sizes,
        folds=cfg.data.n_folds,
        refit=False,
        budget=budget,
    )
    return {
        "table": result.table,
        "best": {"learning_rate": result.best.learning_rate, "batch_size": result.best.batch_size},
        "n_runs": result.n_runs,
    }
