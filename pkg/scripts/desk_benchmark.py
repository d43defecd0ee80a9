"""Standard vs robust accuracy, and robust vs fine-tuned accuracy, on the synthetic desk benchmark.

    python3 scripts/desk_benchmark.py --seeds 0 1 2

The pair comparison uses the linearly scaled radius; the fine-tuning study
starts from robust models trained at the square-root-scaled radius.
"""

import argparse
import copy
import json
import time
from dataclasses import replace

import torch

from advinterp.desk import FINETUNE_EPS_RULE, DeskSetup, finetune_robust, finetune_source, pair_metrics, train_pair
from advinterp.training import evaluate, evaluate_robust


def rounded(row):
    return {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--first-group", type=int, default=3)
    ap.add_argument("--skip-finetune", action="store_true")
    args = ap.parse_args()
    torch.use_deterministic_algorithms(True)
    setup = DeskSetup()
    if args.epochs:
        setup = replace(setup, train=replace(setup.train, epochs=args.epochs))
    strong = replace(setup, eps_rule=FINETUNE_EPS_RULE)
    splits = setup.data()
    print(f"pair epsilon={setup.epsilon:.4f} ({setup.eps_rule}); finetune source epsilon={strong.epsilon:.4f}")
    for seed in args.seeds:
        t0 = time.time()
        row = pair_metrics(setup, train_pair(setup, seed, splits), splits["test"], seed)
        if not args.skip_finetune:
            source = finetune_source(setup, seed, splits)
            tuned, trace = finetune_robust(setup, copy.deepcopy(source), splits, seed, args.first_group)
            row["source_clean"] = evaluate(source, splits["test"])
            row["source_robust"] = evaluate_robust(source, splits["test"], strong.budget, seed=seed)
            row["finetuned_clean"] = evaluate(tuned, splits["test"])
            row["finetuned_robust"] = evaluate_robust(tuned, splits["test"], strong.budget, seed=seed)
            row["finetune_epochs"] = len(trace) - 1
        row["seconds"] = round(time.time() - t0, 1)
        print(json.dumps({"seed": seed, **rounded(row)}), flush=True)


if __name__ == "__main__":
    main()
