"""Saliency methods (Gradient, Integrated Gradients, Occlusion, Grad-CAM) and heatmap post-processing."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.stats import spearmanr

from .errors import ConfigError, InputShapeError
from .model import capture, class_score, forward, input_gradient


class BaselineKind(str, enum.Enum):
    BLACK = "BLACK"
    UNIFORM = "UNIFORM"
    GAUSSIAN = "GAUSSIAN"


@dataclass(frozen=True)
class BaselineSpec:
    kind: BaselineKind = BaselineKind.UNIFORM
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")

    def realize(self, image: torch.Tensor) -> torch.Tensor:
        """One concrete baseline image. Gaussian samples are deliberately not clipped to [0, 1]."""
        if self.kind is BaselineKind.BLACK:
            return torch.zeros_like(image)
        g = torch.Generator().manual_seed(self.seed)
        if self.kind is BaselineKind.UNIFORM:
            return torch.rand(image.shape, generator=g, dtype=torch.float64).to(image.dtype)
        noise = torch.randn(image.shape, generator=g, dtype=torch.float64).to(image.dtype)
        return image + self.sigma * noise

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "sigma": self.sigma, "seed": self.seed}


@dataclass
class AttributionRaw:
    """Signed attributions: C x H x W per input feature, or a 2D grid."""

    values: np.ndarray
    method: str
    target_class: int
    params: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"{self.method} produced non-finite attributions")


@dataclass
class SaliencyMap:
    values: np.ndarray
    cap: float
    meta: dict = field(default_factory=dict)


def _single(image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 4 and image.shape[0] == 1:
        image = image[0]
    if image.dim() != 3:
        raise InputShapeError(f"expected a single C x H x W image, got shape {tuple(image.shape)}")
    return image


def _model_dtype(model):
    return model.normalize.mean.dtype


def gradient_saliency(model, image: torch.Tensor, target_class: int) -> AttributionRaw:
    image = _single(image)
    grad = input_gradient(model, image[None], target_class)[0]
    return AttributionRaw(grad.double().numpy(), "gradient", int(target_class))


def trapezoid_weights(steps: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    alphas = torch.linspace(0.0, 1.0, steps + 1, dtype=dtype)
    weights = torch.full((steps + 1,), 1.0 / steps, dtype=dtype)
    weights[0] = weights[-1] = 0.5 / steps
    return alphas, weights


def integrated_gradients(
    model,
    image: torch.Tensor,
    baseline: BaselineSpec | torch.Tensor,
    target_class: int,
    steps: int = 128,
    batch_size: int = 64,
) -> AttributionRaw:
    """Path-integrated gradients from a baseline, with trapezoidal quadrature over ``steps`` intervals."""
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    image = _single(image).to(_model_dtype(model))
    if isinstance(baseline, BaselineSpec):
        ref = baseline.realize(image)
        bparams = baseline.to_dict()
    else:
        ref = baseline.to(image.dtype)
        bparams = {"kind": "EXPLICIT"}
    if ref.shape != image.shape:
        raise InputShapeError("baseline must have the image's shape")
    diff = image - ref
    alphas, weights = trapezoid_weights(steps, image.dtype)
    total = torch.zeros_like(image)
    for start in range(0, steps + 1, batch_size):
        a = alphas[start : start + batch_size].view(-1, 1, 1, 1)
        grads = input_gradient(model, ref[None] + a * diff[None], target_class)
        total += (weights[start : start + batch_size].view(-1, 1, 1, 1) * grads).sum(0)
    phi = diff * total
    return AttributionRaw(
        phi.double().numpy(),
        "integrated_gradients",
        int(target_class),
        {"baseline": bparams, "steps": steps},
        {"baseline_image": ref.double().numpy()},
    )


def completeness_gap(model, image: torch.Tensor, raw: AttributionRaw) -> tuple[float, float]:
    """(|sum(phi) - (f(x) - f(x'))|, |f(x) - f(x')|) for an IG attribution."""
    image = _single(image).to(_model_dtype(model))
    ref = torch.from_numpy(raw.extras["baseline_image"]).to(image.dtype)
    logits = forward(model, torch.stack([image, ref]))
    delta = (logits[0, raw.target_class] - logits[1, raw.target_class]).item()
    return abs(float(raw.values.sum()) - delta), abs(delta)


def window_starts(size: int, patch: int, stride: int) -> list[int]:
    """Strided window origins plus one edge-aligned window if the stride misses the border."""
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def occlusion(
    model,
    image: torch.Tensor,
    target_class: int,
    patch: int = 50,
    stride: int = 25,
    fill=None,
    mode: str = "probability",
    batch_size: int = 64,
) -> AttributionRaw:
    """Mean score drop over all occluding windows that cover each pixel.

    ``fill`` is a per-channel value; by default the model's normalization mean,
    i.e. the training-set mean color.
    """
    image = _single(image).to(_model_dtype(model))
    c, h, w = image.shape
    mode = mode.lower()
    if mode not in ("probability", "logit"):
        raise ConfigError(f"unknown occlusion mode {mode!r}")
    if stride < 1:
        raise ConfigError("stride must be at least 1")
    if patch < 1 or patch > min(h, w):
        raise ConfigError(f"patch {patch} does not fit a {h}x{w} image")
    if stride > patch:
        raise ConfigError(f"stride {stride} exceeds patch {patch}; some pixels would never be occluded")
    if fill is None:
        fill = model.normalize.mean.flatten()
    fill = torch.as_tensor(fill, dtype=image.dtype).flatten()
    if fill.numel() != c:
        raise ConfigError(f"fill has {fill.numel()} values for {c} channels")

    rows, cols = window_starts(h, patch, stride), window_starts(w, patch, stride)
    windows = [(r, q) for r in rows for q in cols]

    def score(batch):
        logits = forward(model, batch)
        if mode == "probability":
            logits = torch.softmax(logits, dim=1)
        return logits[:, target_class]

    base = score(image[None])[0]
    drops = torch.empty(len(windows), dtype=torch.float64)
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        batch = image[None].repeat(len(chunk), 1, 1, 1)
        for j, (r, q) in enumerate(chunk):
            batch[j, :, r : r + patch, q : q + patch] = fill.view(c, 1, 1)
        drops[start : start + len(chunk)] = (base - score(batch)).double()
    # a window already holding the fill leaves the image untouched; avoid batch-dependent round-off
    for i, (r, q) in enumerate(windows):
        if torch.equal(image[:, r : r + patch, q : q + patch], fill.view(c, 1, 1).expand(c, patch, patch)):
            drops[i] = 0.0

    total = torch.zeros(h, w, dtype=torch.float64)
    count = torch.zeros(h, w, dtype=torch.float64)
    for d, (r, q) in zip(drops, windows):
        total[r : r + patch, q : q + patch] += d
        count[r : r + patch, q : q + patch] += 1
    return AttributionRaw(
        (total / count).numpy(),
        "occlusion",
        int(target_class),
        {"patch": patch, "stride": stride, "fill": fill.tolist(), "mode": mode},
        {"windows": windows, "drops": drops.numpy()},
    )


def grad_cam(model, image: torch.Tensor, target_class: int, layer_group_name: str = "group4") -> AttributionRaw:
    image = _single(image)
    acts, grads = capture(model, image[None], layer_group_name, target_class)
    alpha = grads[0].mean(dim=(1, 2))
    cam = torch.relu((alpha.view(-1, 1, 1) * acts[0]).sum(0))
    return AttributionRaw(cam.double().numpy(), "grad_cam", int(target_class), {"layer": layer_group_name})


METHODS = {
    "gradient": gradient_saliency,
    "integrated_gradients": integrated_gradients,
    "occlusion": occlusion,
    "grad_cam": grad_cam,
}


def upsample_nearest(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = grid.shape
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return grid[np.ix_(rows, cols)]


def postprocess(raw: AttributionRaw, image_size, percentile: float = 99.0) -> SaliencyMap:
    """Channel-summed magnitudes, capped at a percentile and rescaled to [0, 1]."""
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    v = np.abs(np.asarray(raw.values, dtype=np.float64))
    if v.ndim == 3:
        v = v.sum(axis=0)
    if v.shape != tuple(image_size):
        v = upsample_nearest(v, tuple(image_size))
    cap = float(np.percentile(v, percentile))
    v = np.minimum(v, cap)
    top = v.max()
    if top > 0:
        v = v / top
    meta = {
        "method": raw.method,
        "target_class": raw.target_class,
        "params": raw.params,
        "percentile": percentile,
        "cap": cap,
    }
    return SaliencyMap(v, cap, meta)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_saliency(smap: SaliencyMap, path) -> tuple[Path, Path]:
    """Write an 8-bit grayscale PNG plus a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(smap.values), mode="L").save(path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(smap.meta, indent=1, sort_keys=True, default=float) + "\n")
    return path, sidecar


def saliency_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation between two maps' pixels."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if np.array_equal(a, b):
        return 1.0
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    rho = spearmanr(a, b).statistic
    return float(rho) if np.isfinite(rho) else 0.0
