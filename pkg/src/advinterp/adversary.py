"""PGD adversary in L2 / Linf balls with a [0, 1] box constraint."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError


class Norm(str, enum.Enum):
    L2 = "L2"
    LINF = "LINF"


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float
    norm: Norm = Norm.L2
    steps: int = 7
    step_size: float | None = None
    random_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 5.0)
        if self.epsilon > 0 and not self.step_size > 0:
            raise ConfigError("step_size must be positive when epsilon > 0")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "norm": self.norm.value,
            "steps": self.steps,
            "step_size": self.step_size,
            "random_start": self.random_start,
        }


def scale_epsilon(eps_ref: float, pixels_ref: int, pixels_target: int, rule: str = "linear") -> float:
    """Rescale a perturbation radius from one image size to another.

    ``rule="linear"`` scales with the pixel-count ratio; ``rule="sqrt"`` with
    its square root, which keeps the per-pixel RMS perturbation constant.
    """
    if eps_ref <= 0 or pixels_ref <= 0 or pixels_target <= 0:
        raise ConfigError("scale_epsilon needs positive arguments")
    ratio = pixels_target / pixels_ref
    if rule == "linear":
        return eps_ref * ratio
    if rule == "sqrt":
        return eps_ref * math.sqrt(ratio)
    raise ConfigError(f"unknown scaling rule {rule!r}")


def _per_image_norm(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).norm(dim=1).view(-1, *([1] * (t.dim() - 1)))


def project(delta: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Project a batch of perturbations onto the budget's norm ball (per image)."""
    eps = budget.epsilon
    if budget.norm is Norm.LINF:
        return delta.clamp(-eps, eps)
    norms = _per_image_norm(delta)
    scale = torch.where(norms > eps, eps / norms.clamp_min(1e-30), torch.ones_like(norms))
    return delta * scale


def _normalize_step(grad: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    if budget.norm is Norm.LINF:
        return grad.sign() * budget.step_size
    norms = _per_image_norm(grad)
    # zero gradients stay zero instead of dividing by 0
    return grad / norms.clamp_min(1e-12) * budget.step_size


def random_start(shape, budget: PerturbationBudget, generator: torch.Generator, dtype=torch.float32):
    """One uniform draw from the ball per image, each from its own child seed."""
    n = shape[0]
    seeds = torch.randint(0, 2**62, (n,), generator=generator).tolist()
    out = torch.empty(shape, dtype=torch.float64)
    d = math.prod(shape[1:])
    for i, s in enumerate(seeds):
        g = torch.Generator().manual_seed(s)
        if budget.norm is Norm.LINF:
            out[i] = (torch.rand(shape[1:], generator=g, dtype=torch.float64) * 2 - 1) * budget.epsilon
        else:
            direction = torch.randn(shape[1:], generator=g, dtype=torch.float64)
            direction /= direction.norm()
            u = torch.rand((), generator=g, dtype=torch.float64)
            out[i] = direction * budget.epsilon * u ** (1.0 / d)
    return out.to(dtype)


def cross_entropy_loss(logits, labels):
    return F.cross_entropy(logits, labels, reduction="sum")


@dataclass
class AttackResult:
    adversarial: torch.Tensor
    # norm of the last perturbation before the box clip, one per image
    preclip_norms: torch.Tensor
    losses: list[float] = field(default_factory=list)


def pgd_attack(
    model,
    batch: torch.Tensor,
    labels: torch.Tensor,
    budget: PerturbationBudget,
    loss=cross_entropy_loss,
    generator: torch.Generator | None = None,
    return_details: bool = False,
):
    """Maximize ``loss(model(x), labels)`` over the budget ball intersected with [0, 1].

    Each iteration takes a normalized ascent step, projects onto the ball and
    clips to the box. ``loss`` must reduce by summing over images so that one
    image's gradient does not depend on the others.
    """
    x = batch.detach()
    if budget.epsilon == 0:
        result = AttackResult(x.clone(), torch.zeros(x.shape[0], dtype=x.dtype))
        return result if return_details else result.adversarial
    was_training = model.training
    model.eval()
    if budget.random_start:
        if generator is None:
            raise ConfigError("random_start needs a torch.Generator")
        delta = random_start(x.shape, budget, generator, x.dtype)
        preclip = delta
        x_adv = (x + delta).clamp(0.0, 1.0)
    else:
        preclip = torch.zeros_like(x)
        x_adv = x.clone()
    losses = []
    for _ in range(budget.steps):
        x_adv.requires_grad_(True)
        value = loss(model(x_adv), labels)
        if not torch.isfinite(value):
            model.train(was_training)
            raise NumericError(f"non-finite attack loss {value.item()}")
        (grad,) = torch.autograd.grad(value, x_adv)
        losses.append(value.item())
        with torch.no_grad():
            step = x_adv + _normalize_step(grad, budget)
            preclip = project(step - x, budget)
            x_adv = (x + preclip).clamp(0.0, 1.0)
    model.train(was_training)
    result = AttackResult(x_adv.detach(), _per_image_norm(preclip).flatten().detach(), losses)
    return result if return_details else result.adversarial
