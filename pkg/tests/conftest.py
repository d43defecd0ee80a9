import re

import pytest
import torch
import torch.nn as nn

from advinterp.model import ClassifierModel, Normalize

torch.use_deterministic_algorithms(True)


def small_model(
    seed=0, num_classes=3, input_size=32, widths=(4, 8, 8, 16), stem_downsample=False, dtype=torch.float64, activation="relu"
):
    model = ClassifierModel(
        num_classes, widths, 3, input_size, stem_downsample, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25), seed, activation
    )
    # give BatchNorm non-trivial running statistics so eval mode is not an identity map
    g = torch.Generator().manual_seed(seed + 1)
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.running_mean.copy_(0.1 * torch.randn(m.num_features, generator=g))
            m.running_var.copy_(torch.rand(m.num_features, generator=g) + 0.5)
    return model.to(dtype).eval()


class LinearToy(nn.Module):
    """f(x) = W vec(x) + b, with the attributes attribution code expects from a classifier."""

    def __init__(self, weight, bias):
        super().__init__()
        self.normalize = Normalize((0.0,) * 3, (1.0,) * 3).double()
        self.weight = nn.Parameter(weight.double())
        self.bias = nn.Parameter(bias.double())
        self.num_classes = weight.shape[0]

    def forward(self, x):
        return x.flatten(1) @ self.weight.T + self.bias


@pytest.fixture
def model64():
    return small_model()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and rep.when == "call":
                rows.append((int(m.group(1)), m.group(2), "PASS" if outcome == "passed" else "FAIL"))
            elif m and outcome == "error":
                rows.append((int(m.group(1)), m.group(2), "FAIL"))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n, name, status in sorted(set(rows)):
            terminalreporter.write_line(f"criterion {n:2d} {name.replace('_', ' ')}: {status}")
