"""Integrated-gradients completeness gap against the number of quadrature steps.

    python3 scripts/ig_convergence.py --images 5

Compares the default ReLU mini-ResNet with its softplus twin. The ReLU path
integral crosses activation kinks, so its gap need not shrink monotonically.
"""

import argparse

import torch

from advinterp.attribution import BaselineSpec, completeness_gap, integrated_gradients
from advinterp.model import ClassifierModel

STEPS = (16, 64, 128, 256, 1024)


def random_model(activation, seed):
    model = ClassifierModel(3, (4, 8, 8, 16), mean=(0.5,) * 3, std=(0.25,) * 3, seed=seed, activation=activation)
    # non-trivial running statistics, otherwise eval-mode BatchNorm flattens the logits
    g = torch.Generator().manual_seed(seed + 1)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(0.1 * torch.randn(m.num_features, generator=g))
            m.running_var.copy_(torch.rand(m.num_features, generator=g) + 0.5)
    return model.double().eval()


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--images", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.use_deterministic_algorithms(True)
    g = torch.Generator().manual_seed(args.seed)
    images = [torch.rand(3, 32, 32, generator=g, dtype=torch.float64) for _ in range(args.images)]
    print("activation baseline image " + " ".join(f"{s:>9d}" for s in STEPS) + "  monotone")
    for activation in ("relu", "softplus"):
        model = random_model(activation, args.seed)
        for kind in ("BLACK", "UNIFORM", "GAUSSIAN"):
            for i, x in enumerate(images):
                gaps = []
                for steps in STEPS:
                    raw = integrated_gradients(model, x, BaselineSpec(kind, 1.0, 1000 + i), i % 3, steps, batch_size=257)
                    gap, delta = completeness_gap(model, x, raw)
                    gaps.append(gap / delta if delta > 0 else float("nan"))
                if delta == 0:
                    print(f"{activation:10s} {kind:8s} {i:5d}  f(x) = f(x'), no relative gap")
                    continue
                mono = all(b < a for a, b in zip(gaps, gaps[1:]))
                print(f"{activation:10s} {kind:8s} {i:5d} " + " ".join(f"{v:9.2e}" for v in gaps) + f"  {mono}")


if __name__ == "__main__":
    main()
