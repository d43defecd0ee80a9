"""Grouped residual classifier with input-space gradient utilities.

The network is split into five named groups (four convolutional blocks and the
fully connected head) so that fine-tuning can freeze or unfreeze whole groups.
Input normalization is a fixed first stage, so every public function here takes
raw pixels in [0, 1].
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputShapeError

GROUP_NAMES = ("group1", "group2", "group3", "group4", "group5")
ARCH_ID = "grouped-resnet-v1"

# softplus gives a smooth variant of the same network, used where quadrature or
# finite-difference checks need a differentiable function
ACTIVATIONS = {"relu": F.relu, "softplus": F.softplus}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class GroupMask:
    """Per-group trainability flags, ordered first group to last."""

    trainable: tuple[bool, ...]

    def __post_init__(self):
        if len(self.trainable) != len(GROUP_NAMES):
            raise ConfigError(f"GroupMask needs exactly {len(GROUP_NAMES)} flags, got {len(self.trainable)}")
        object.__setattr__(self, "trainable", tuple(bool(t) for t in self.trainable))

    @classmethod
    def all(cls, value: bool = True) -> "GroupMask":
        return cls((value,) * len(GROUP_NAMES))

    @classmethod
    def suffix(cls, first_group: int) -> "GroupMask":
        """Unfreeze groups ``first_group..5`` (1-based); ``first_group=6`` freezes everything."""
        if not 1 <= first_group <= len(GROUP_NAMES) + 1:
            raise ConfigError(f"first_group must be in 1..{len(GROUP_NAMES) + 1}")
        return cls(tuple(i + 1 >= first_group for i in range(len(GROUP_NAMES))))

    @property
    def is_suffix(self) -> bool:
        flags = list(self.trainable)
        return flags == sorted(flags)

    @property
    def any(self) -> bool:
        return any(self.trainable)


class Normalize(nn.Module):
    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projection) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, activation: str = "relu"):
        super().__init__()
        self.act = ACTIVATIONS[activation]
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class Stem(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, activation: str = "relu"):
        super().__init__()
        self.act = ACTIVATIONS[activation]
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Head(nn.Module):
    def __init__(self, in_features: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_features, num_classes)

    def forward(self, x):
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


class ClassifierModel(nn.Module):
    """Miniature ResNet with five named layer groups.

    With ``stem_downsample=True`` the network downsamples 32x in total, like
    ResNet-18, so a 224 input gives a 7x7 final feature map. With ``False`` the
    stem keeps full resolution and the total factor is 8 (32 -> 4x4).

    Subclasses (or hand-built instances used in tests) only need to provide the
    ``group1..group5`` attributes and a ``normalize`` stage.
    """

    def __init__(
        self,
        num_classes: int = 3,
        widths: Sequence[int] = (8, 16, 32, 64),
        in_channels: int = 3,
        input_size: int = 32,
        stem_downsample: bool = False,
        mean: Sequence[float] = IMAGENET_MEAN,
        std: Sequence[float] = IMAGENET_STD,
        seed: int = 0,
        activation: str = "relu",
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if len(widths) != 4:
            raise ConfigError("widths must list 4 channel counts, one per convolutional group")
        if len(mean) != in_channels or len(std) != in_channels:
            raise ConfigError("normalization constants must have one entry per channel")
        self.num_classes = int(num_classes)
        self.in_channels = int(in_channels)
        self.input_size = int(input_size)
        self.arch = {
            "arch_id": ARCH_ID,
            "widths": [int(w) for w in widths],
            "in_channels": int(in_channels),
            "input_size": int(input_size),
            "stem_downsample": bool(stem_downsample),
            "activation": activation,
        }
        self.seed = int(seed)
        self.normalize = Normalize(mean, std)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            first_stride = 2 if stem_downsample else 1
            w1, w2, w3, w4 = widths
            act = activation
            self.group1 = nn.Sequential(
                OrderedDict(stem=Stem(in_channels, w1, first_stride, act), block=BasicBlock(w1, w1, first_stride, act))
            )
            self.group2 = nn.Sequential(OrderedDict(block=BasicBlock(w1, w2, 2, act)))
            self.group3 = nn.Sequential(OrderedDict(block=BasicBlock(w2, w3, 2, act)))
            self.group4 = nn.Sequential(OrderedDict(block=BasicBlock(w3, w4, 2, act)))
            self.group5 = Head(w4, num_classes)
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        self.eval()

    @property
    def groups(self) -> "OrderedDict[str, nn.Module]":
        return OrderedDict((name, getattr(self, name)) for name in GROUP_NAMES)

    @property
    def feature_dim(self) -> int:
        return self.group5.fc.in_features

    def check_input(self, x: torch.Tensor) -> None:
        expected = (self.in_channels, self.input_size, self.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InputShapeError(f"expected input of shape N x {expected}, got {tuple(x.shape)}")

    def features(self, x: torch.Tensor, upto: str | None = None) -> torch.Tensor:
        h = self.normalize(x)
        for name in GROUP_NAMES[:-1]:
            h = getattr(self, name)(h)
            if name == upto:
                return h
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        x = x.to(self.normalize.mean.dtype)
        return self.group5(self.features(x))


def _dtype(model: nn.Module) -> torch.dtype:
    return model.normalize.mean.dtype


def forward(model: ClassifierModel, batch: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode logits without autograd."""
    model.eval()
    with torch.no_grad():
        return model(batch.to(_dtype(model)))


def _check_targets(model, target_class, n):
    target = torch.as_tensor(target_class, dtype=torch.long).reshape(-1)
    if target.numel() == 1 and n > 1:
        target = target.expand(n)
    if target.numel() != n:
        raise InputShapeError(f"need one target class per image ({n}), got {target.numel()}")
    if (target < 0).any() or (target >= model.num_classes).any():
        raise IndexError(f"target class out of range [0, {model.num_classes})")
    return target


def class_score(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return logits.gather(1, target.view(-1, 1)).squeeze(1)


def input_gradient(model: ClassifierModel, batch: torch.Tensor, target_class) -> torch.Tensor:
    """Gradient of the target logit with respect to raw [0, 1] pixels."""
    model.eval()
    x = batch.detach().to(_dtype(model)).clone().requires_grad_(True)
    target = _check_targets(model, target_class, x.shape[0])
    score = class_score(model(x), target)
    (grad,) = torch.autograd.grad(score.sum(), x)
    return grad.detach()


def replace_head(model: ClassifierModel, num_classes: int, seed: int = 0) -> ClassifierModel:
    """Swap the final linear layer for a freshly Kaiming-initialized one, in place."""
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    gen = torch.Generator().manual_seed(seed)
    head = Head(model.feature_dim, num_classes).to(_dtype(model))
    with torch.no_grad():
        nn.init.kaiming_normal_(head.fc.weight, mode="fan_in", nonlinearity="relu", generator=gen)
        head.fc.bias.zero_()
    model.group5 = head
    model.num_classes = int(num_classes)
    return model


def capture(model: ClassifierModel, batch: torch.Tensor, layer_group_name: str, target_class):
    """Activations of a convolutional group and the target logit's gradient w.r.t. them.

    Returns two tensors of shape N x K x h x w.
    """
    if layer_group_name not in GROUP_NAMES[:-1]:
        raise KeyError(f"no convolutional layer group named {layer_group_name!r}")
    model.eval()
    model.check_input(batch)
    x = batch.detach().to(_dtype(model))
    target = _check_targets(model, target_class, x.shape[0])
    acts = model.features(x, upto=layer_group_name)
    acts_leaf = acts.detach().requires_grad_(True)
    h = acts_leaf
    for name in GROUP_NAMES[GROUP_NAMES.index(layer_group_name) + 1 : -1]:
        h = getattr(model, name)(h)
    score = class_score(model.group5(h), target)
    (grad,) = torch.autograd.grad(score.sum(), acts_leaf, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(acts_leaf)
    return acts_leaf.detach(), grad.detach()


def set_trainable(model: ClassifierModel, mask: GroupMask) -> None:
    for flag, (_, module) in zip(mask.trainable, model.groups.items()):
        for p in module.parameters():
            p.requires_grad_(flag)


def group_parameters(model: ClassifierModel) -> "OrderedDict[str, torch.Tensor]":
    """Parameters keyed ``group{n}/{layer}/{tensor}``."""
    out = OrderedDict()
    for gname, module in model.groups.items():
        for pname, p in module.named_parameters():
            layer, _, tensor = pname.rpartition(".")
            out[f"{gname}/{layer or '_'}/{tensor}"] = p
    return out


def group_buffers(model: ClassifierModel) -> "OrderedDict[str, torch.Tensor]":
    """Normalization running statistics, keyed like :func:`group_parameters`."""
    out = OrderedDict()
    for gname, module in model.groups.items():
        for bname, b in module.named_buffers():
            layer, _, tensor = bname.rpartition(".")
            out[f"{gname}/{layer or '_'}/{tensor}"] = b
    return out


def group_checksum(model: ClassifierModel, groups: Sequence[str] = GROUP_NAMES) -> str:
    h = hashlib.sha256()
    state = OrderedDict(group_parameters(model))
    state.update(group_buffers(model))
    for key, p in state.items():
        if key.split("/", 1)[0] in groups:
            h.update(key.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: ClassifierModel, path, extra: dict | None = None) -> None:
    params = OrderedDict((k, v.detach().cpu().clone()) for k, v in group_parameters(model).items())
    buffers = OrderedDict((k, v.detach().cpu().clone()) for k, v in group_buffers(model).items())
    meta = {
        "arch": dict(model.arch),
        "num_classes": model.num_classes,
        "mean": model.normalize.mean.flatten().tolist(),
        "std": model.normalize.std.flatten().tolist(),
        "seed": model.seed,
    }
    if extra:
        meta["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"params": params, "buffers": buffers, "meta": meta}, path)


def load_checkpoint(path) -> ClassifierModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    meta = blob["meta"]
    arch = meta["arch"]
    if arch.get("arch_id") != ARCH_ID:
        raise ConfigError(f"unknown architecture {arch.get('arch_id')!r}")
    model = ClassifierModel(
        num_classes=meta["num_classes"],
        widths=arch["widths"],
        in_channels=arch["in_channels"],
        input_size=arch["input_size"],
        stem_downsample=arch["stem_downsample"],
        mean=meta["mean"],
        std=meta["std"],
        seed=meta["seed"],
        activation=arch.get("activation", "relu"),
    )
    for kind, live in (("params", group_parameters(model)), ("buffers", group_buffers(model))):
        stored = blob.get(kind, {})
        mismatch = set(live) ^ set(stored)
        if mismatch:
            raise ConfigError(f"checkpoint {kind} keys do not match architecture: {sorted(mismatch)[:5]}")
        with torch.no_grad():
            for key, t in live.items():
                t.copy_(stored[key])
    return model


def checkpoint_meta(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=True)["meta"]
