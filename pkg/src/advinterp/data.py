"""Dataset ingestion, splitting, augmentation and a synthetic lesion dataset."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")


@dataclass
class Record:
    image_id: str
    label: int
    path: str = ""
    split: str = "unassigned"
    fold: int = -1


@dataclass
class DatasetManifest:
    records: list[Record]
    classes: list[str]
    image_size: tuple[int, int] | None = None
    rejects: list[dict] = field(default_factory=list)

    def split(self, tag: str) -> list[Record]:
        return [r for r in self.records if r.split == tag]

    def class_counts(self, tag: str | None = None) -> dict[str, int]:
        rows = self.records if tag is None else self.split(tag)
        counts = Counter(r.label for r in rows)
        return {name: counts.get(i, 0) for i, name in enumerate(self.classes)}

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "image_size": list(self.image_size) if self.image_size else None,
            "records": [asdict(r) for r in self.records],
            "rejects": list(self.rejects),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        size = d.get("image_size")
        return cls(
            records=[Record(**r) for r in d["records"]],
            classes=list(d["classes"]),
            image_size=tuple(size) if size else None,
            rejects=list(d.get("rejects", [])),
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _read_labels(label_file: Path, class_column: str) -> dict[str, str]:
    with open(label_file, newline="") as fh:
        text = fh.read()
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else "", delimiters=",;\t")
    except csv.Error:
        dialect = csv.excel
    rows = list(csv.reader(text.splitlines(), dialect))
    if not rows:
        return {}
    header = [h.strip() for h in rows[0]]
    if "image_id" in header:
        id_col = header.index("image_id")
        if class_column not in header:
            raise DataError(f"label file has no {class_column!r} column (columns: {header})")
        cls_col = header.index(class_column)
        rows = rows[1:]
    else:
        id_col, cls_col = 0, 1
    return {r[id_col].strip(): r[cls_col].strip() for r in rows if len(r) > max(id_col, cls_col)}


def ingest(directory, label_file, class_column: str = "class_name") -> DatasetManifest:
    """Build a manifest from a directory of images and a delimiter-separated label file.

    Unreadable images and image/label mismatches are collected in
    ``manifest.rejects`` instead of being dropped silently.
    """
    directory, label_file = Path(directory), Path(label_file)
    if not label_file.is_file():
        raise DataError(f"label file not found: {label_file}")
    labels = _read_labels(label_file, class_column)
    classes = sorted(set(labels.values()))
    index = {c: i for i, c in enumerate(classes)}

    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if directory.is_dir() else []
    if not files:
        log.warning("no images found in %s", directory)
    records, rejects, sizes = [], [], Counter()
    seen = set()
    for p in files:
        image_id = p.stem
        if image_id not in labels:
            rejects.append({"image_id": image_id, "path": str(p), "reason": "no label"})
            continue
        try:
            with Image.open(p) as im:
                im.load()
                sizes[im.size] += 1
        except Exception as exc:  # PIL raises a zoo of types for corrupt files
            rejects.append({"image_id": image_id, "path": str(p), "reason": f"unreadable: {exc}"})
            continue
        seen.add(image_id)
        records.append(Record(image_id=image_id, label=index[labels[image_id]], path=str(p)))
    if files:
        for image_id in sorted(set(labels) - seen - {r["image_id"] for r in rejects}):
            rejects.append({"image_id": image_id, "path": "", "reason": "label without image"})
    for r in rejects:
        log.warning("rejected %s: %s", r["image_id"], r["reason"])
    size = sizes.most_common(1)[0][0] if sizes else None
    return DatasetManifest(records=records, classes=classes, image_size=size, rejects=rejects)


def _take(rng: np.random.Generator, rows: list[Record], n: int) -> tuple[list[Record], list[Record]]:
    order = rng.permutation(len(rows))
    picked = [rows[i] for i in order[:n]]
    rest = [rows[i] for i in order[n:]]
    return picked, rest


def balanced_subset(
    manifest: DatasetManifest,
    classes: Sequence[str],
    per_class_train: int,
    per_class_test: int,
    seed: int,
) -> DatasetManifest:
    """Sample disjoint, exactly balanced train and test splits from the chosen classes."""
    rng = np.random.default_rng(seed)
    by_class = defaultdict(list)
    for r in sorted(manifest.records, key=lambda r: r.image_id):
        by_class[manifest.classes[r.label]].append(r)
    new_classes = list(classes)
    out = []
    for new_label, name in enumerate(new_classes):
        pool = by_class.get(name, [])
        need = per_class_train + per_class_test
        if len(pool) < need:
            raise DataError(f"class {name!r} has {len(pool)} images, need {need}")
        train, rest = _take(rng, pool, per_class_train)
        test, _ = _take(rng, rest, per_class_test)
        out += [replace(r, label=new_label, split="train", fold=-1) for r in train]
        out += [replace(r, label=new_label, split="test", fold=-1) for r in test]
    return DatasetManifest(records=out, classes=new_classes, image_size=manifest.image_size)


def carve_validation(manifest: DatasetManifest, n_val: int, seed: int, source: str = "test") -> DatasetManifest:
    """Move a class-balanced ``n_val`` sample from ``source`` into a ``val`` split."""
    k = len(manifest.classes)
    if n_val % k:
        raise ConfigError(f"n_val={n_val} is not divisible by the {k} classes")
    rng = np.random.default_rng(seed)
    moved = set()
    for label in range(k):
        pool = [r for r in manifest.records if r.split == source and r.label == label]
        if len(pool) < n_val // k:
            raise DataError(f"class {manifest.classes[label]!r} has only {len(pool)} {source} images")
        picked, _ = _take(rng, pool, n_val // k)
        moved |= {r.image_id for r in picked}
    records = [replace(r, split="val") if r.image_id in moved else r for r in manifest.records]
    return replace(manifest, records=records)


def kfold(manifest: DatasetManifest, k: int = 5, seed: int = 0, split: str = "train") -> DatasetManifest:
    """Assign class-stratified fold indices to the records of ``split``.

    Each class is shuffled and dealt round-robin; the starting fold rotates per
    class so fold sizes stay within one image of each other overall.
    """
    if k < 2:
        raise ConfigError("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = {}
    offset = 0
    for label in range(len(manifest.classes)):
        ids = sorted(r.image_id for r in manifest.records if r.split == split and r.label == label)
        for j, i in enumerate(rng.permutation(len(ids))):
            folds[ids[i]] = (offset + j) % k
        offset += len(ids)
    records = [replace(r, fold=folds.get(r.image_id, -1)) for r in manifest.records]
    return replace(manifest, records=records)


# ---------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class AugmentPolicy:
    crop_size: int | None = 450
    output_size: int = 224
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    shear_deg: float = 10.0
    rotation_deg: float = 50.0

    @classmethod
    def identity(cls, crop_size=None, output_size=224) -> "AugmentPolicy":
        return cls(crop_size, output_size, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def eval_transform(image: torch.Tensor, policy: AugmentPolicy) -> torch.Tensor:
    """Center crop then resize. ``image`` is C x H x W in [0, 1]."""
    _, h, w = image.shape
    if policy.crop_size is not None:
        if min(h, w) < policy.crop_size:
            raise DataError(f"image {h}x{w} is smaller than the {policy.crop_size}px crop")
        image = TF.center_crop(image, [policy.crop_size, policy.crop_size])
    if image.shape[-1] != policy.output_size or image.shape[-2] != policy.output_size:
        image = TF.resize(image, [policy.output_size, policy.output_size], antialias=True)
    return image.clamp(0.0, 1.0)


def augment(image: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Stochastic training augmentations on an already cropped/resized image."""
    if rng.random() < policy.hflip_p:
        image = TF.horizontal_flip(image)
    if rng.random() < policy.vflip_p:
        image = TF.vertical_flip(image)
    # jitter factors are uniform in [1 - a, 1 + a]
    b = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
    s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
    if policy.brightness:
        image = TF.adjust_brightness(image, b)
    if policy.contrast:
        image = TF.adjust_contrast(image, c)
    if policy.saturation and image.shape[0] == 3:
        image = TF.adjust_saturation(image, s)
    angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg)
    shear = rng.uniform(-policy.shear_deg, policy.shear_deg)
    if policy.rotation_deg or policy.shear_deg:
        image = TF.affine(image, angle=angle, translate=[0, 0], scale=1.0, shear=[shear, 0.0])
    return image.clamp(0.0, 1.0)


def transform(image: torch.Tensor, policy: AugmentPolicy, split_tag: str, rng: np.random.Generator | None = None):
    out = eval_transform(image, policy)
    if split_tag == "train":
        if rng is None:
            raise ConfigError("training transform needs an rng")
        out = augment(out, policy, rng)
    return out


def item_rng(seed: int, epoch: int, image_id: str) -> np.random.Generator:
    """Augmentation stream keyed by (seed, epoch, image id)."""
    key = int.from_bytes(image_id.encode()[:16].ljust(16, b"\0"), "little") ^ (len(image_id) << 7)
    return np.random.default_rng([seed, epoch, key & (2**63 - 1), key >> 63])


def load_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


# ---------------------------------------------------------------------------
# in-memory datasets


@dataclass
class ImageDataset:
    """Model-ready images (N x C x H x W in [0, 1]) with labels and stable ids."""

    images: torch.Tensor
    labels: torch.Tensor
    ids: list[str]
    classes: list[str]
    policy: AugmentPolicy | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.images) != len(self.ids):
            raise DataError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "ImageDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageDataset(
            self.images[index], self.labels[index], [self.ids[i] for i in index.tolist()], self.classes, self.policy
        )

    def with_policy(self, policy: AugmentPolicy | None) -> "ImageDataset":
        return replace(self, policy=policy)

    def batches(self, batch_size: int, epoch: int = 0, seed: int = 0, shuffle: bool = True) -> Iterator:
        """Yield (images, labels) batches; order and augmentation depend only on (seed, epoch)."""
        n = len(self)
        if shuffle:
            order = torch.from_numpy(np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n))
        else:
            order = torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = self.images[idx]
            if self.policy is not None:
                x = torch.stack([augment(x[j], self.policy, item_rng(seed, epoch, self.ids[i])) for j, i in enumerate(idx.tolist())])
            yield x, self.labels[idx]


def dataset_from_manifest(manifest: DatasetManifest, split: str, policy: AugmentPolicy) -> ImageDataset:
    rows = manifest.split(split)
    if not rows:
        raise DataError(f"split {split!r} is empty")
    images = torch.stack([eval_transform(load_image(r.path), policy) for r in rows])
    return ImageDataset(
        images,
        torch.tensor([r.label for r in rows], dtype=torch.long),
        [r.image_id for r in rows],
        list(manifest.classes),
        policy if split == "train" else None,
    )


def channel_mean_std(data: ImageDataset) -> tuple[list[float], list[float]]:
    x = data.images.double()
    return x.mean(dim=(0, 2, 3)).tolist(), x.std(dim=(0, 2, 3)).tolist()


# ---------------------------------------------------------------------------
# synthetic lesions

SYNTH_CLASSES = ("uniform", "speckled", "blotchy", "streaked")
VARIATION_COLOR = np.array([1.0, 0.8, 1.3])


def _smooth_noise(rng, shape, sigma):
    noise = rng.standard_normal(shape)
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=sigma, mode="wrap")
    return noise / (noise.std() + 1e-12)


def _synth_image(rng, label, size, amplitude, faint_fraction, faint_amplitude) -> np.ndarray:
    faint = rng.random() < faint_fraction
    strength = rng.uniform(*(faint_amplitude if faint else amplitude))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    skin = np.array([0.86, 0.66, 0.56]) + rng.uniform(-0.06, 0.06, 3)
    img = skin[:, None, None] * (1.0 + 0.03 * _smooth_noise(rng, (size, size), size / 5.0))
    img = img + 0.012 * rng.standard_normal((3, size, size))

    cy, cx = rng.uniform(0.35 * size, 0.65 * size, 2)
    ry, rx = rng.uniform(0.2 * size, 0.32 * size, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
    r = np.sqrt(u**2 + v**2)
    mask = np.clip((1.0 - r) * size / 3.0, 0.0, 1.0)

    lesion = np.array([0.45, 0.30, 0.22]) * rng.uniform(0.7, 1.15)
    body = np.broadcast_to(lesion[:, None, None], (3, size, size)).copy()
    if label > 0:
        # zero-mean color variation; the class sets its spatial scale
        if label == 1:
            pattern = _smooth_noise(rng, (size, size), 0.0)
        elif label == 2:
            pattern = _smooth_noise(rng, (size, size), size / 20.0)
        else:
            pattern = np.sin(2 * np.pi * (u * rx) / 4.0 + rng.uniform(0, 2 * np.pi))
            pattern = pattern / pattern.std()
        body = body + strength * VARIATION_COLOR[:, None, None] * pattern[None]
    img = img * (1.0 - mask) + body * mask
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(
    n_per_class: int,
    image_size: int = 32,
    n_classes: int = 3,
    seed: int = 0,
    amplitude: tuple[float, float] = (0.06, 0.12),
    faint_fraction: float = 0.15,
    faint_amplitude: tuple[float, float] = (0.01, 0.03),
) -> tuple[ImageDataset, DatasetManifest]:
    """Lesion-like images whose class is carried by within-lesion color variation.

    Class 0 lesions are flat-colored, class 1 carry pixel-scale speckle and
    class 2 carry coarser blotches (class 3, if requested, periodic streaks).
    The variation is zero-mean, so no linear function of the pixels separates
    the classes. Its strength is drawn per image from ``amplitude``, except for
    a ``faint_fraction`` of lesions drawn from ``faint_amplitude``; a small
    perturbation can erase those, which is where robust and standard models
    part ways.
    """
    if image_size < 16:
        raise ConfigError("image_size must be at least 16")
    if not 2 <= n_classes <= len(SYNTH_CLASSES):
        raise ConfigError(f"n_classes must be in 2..{len(SYNTH_CLASSES)}")
    images, labels, ids, records = [], [], [], []
    for label in range(n_classes):
        for j in range(n_per_class):
            rng = np.random.default_rng([seed, label, j])
            images.append(_synth_image(rng, label, image_size, amplitude, faint_fraction, faint_amplitude))
            labels.append(label)
            image_id = f"synth_{label}_{j:05d}"
            ids.append(image_id)
            records.append(Record(image_id=image_id, label=label))
    classes = list(SYNTH_CLASSES[:n_classes])
    x = torch.from_numpy(np.stack(images)) if images else torch.zeros(0, 3, image_size, image_size)
    data = ImageDataset(x, torch.tensor(labels, dtype=torch.long), ids, classes)
    return data, DatasetManifest(records=records, classes=classes, image_size=(image_size, image_size))


def split_dataset(data: ImageDataset, manifest: DatasetManifest, split: str) -> ImageDataset:
    wanted = {r.image_id for r in manifest.split(split)}
    return data.subset([i for i, image_id in enumerate(data.ids) if image_id in wanted])


def synth_splits(
    n_train: int,
    n_test: int,
    image_size: int = 32,
    n_classes: int = 3,
    seed: int = 0,
    n_val: int = 0,
    **generator,
):
    """Balanced synthetic train/val/test splits (per-class counts), disjoint by construction."""
    data, manifest = synth_dataset(n_train + n_val + n_test, image_size, n_classes, seed, **generator)
    subset = balanced_subset(manifest, manifest.classes, n_train, n_val + n_test, seed)
    if n_val:
        subset = carve_validation(subset, n_val * n_classes, seed)
    out = {tag: split_dataset(data, subset, tag) for tag in ("train", "val", "test") if subset.split(tag)}
    return out, subset


def fold_indices(data: ImageDataset, manifest: DatasetManifest, fold: int) -> tuple[list[int], list[int]]:
    """(train, validation) row indices of ``data`` for one cross-validation fold."""
    folds = {r.image_id: r.fold for r in manifest.records}
    val = [i for i, image_id in enumerate(data.ids) if folds.get(image_id) == fold]
    train = [i for i, image_id in enumerate(data.ids) if folds.get(image_id, -1) not in (-1, fold)]
    return train, val


def expected_fold_size(n: int, k: int) -> tuple[int, int]:
    return n // k, math.ceil(n / k)
