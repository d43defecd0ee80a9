"""Command-line front end: ``advinterp <command> --config cfg.yaml [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, InputShapeError, NumericError
from .records import config_hash

log = logging.getLogger("advinterp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _checkpoint_arg(text: str) -> tuple[str, Path]:
    name, sep, path = text.partition("=")
    if not sep:
        path, name = text, Path(text).stem
    return name, Path(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advinterp", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--run-id", help="output subdirectory (overrides output.run_id)")
    common.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", parents=[common], help="generate or ingest the dataset and write its manifest")

    p = sub.add_parser("train", parents=[common], help="train one standard or adversarial model")
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--epsilon", type=float, help="perturbation radius at the model's input size")

    p = sub.add_parser("grid-search", parents=[common], help="k-fold CV over learning rate x batch size")
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("attack-eval", parents=[common], help="clean and PGD accuracy of checkpoints")
    p.add_argument("--checkpoint", action="append", type=_checkpoint_arg, default=[], metavar="[NAME=]PATH")
    p.add_argument("--epsilons", type=_floats, help="radii at the model's input size")

    p = sub.add_parser("attribute", parents=[common], help="saliency grid for standard vs robust checkpoints")
    p.add_argument("--checkpoint", action="append", type=_checkpoint_arg, default=[], metavar="[NAME=]PATH")
    p.add_argument("--images", help="comma-separated test image ids; an empty string selects none")
    p.add_argument("--methods", help="comma-separated attribution methods")
    p.add_argument("--include-misclassified", action="store_true")

    p = sub.add_parser("sweep-epsilon", parents=[common], help="robust models over a list of adversary powers")
    p.add_argument("--epsilons", type=_floats, help="radii at the reference resolution, rescaled to the data")

    p = sub.add_parser("seed-study", parents=[common], help="models differing only in seed, with saliency similarity")
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("finetune-groups", parents=[common], help="fine-tune group suffixes of a robust model")
    p.add_argument("--checkpoint", type=Path, help="robust checkpoint (trained from the config if omitted)")
    p.add_argument("--standard-checkpoint", type=Path, help="standard endpoint (trained from the config if omitted)")
    p.add_argument("--first-groups", type=_ints, help="first unfrozen group of each suffix mask, e.g. '5 4 3 2 1'")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.run_id is not None:
        overrides.append(f"output.run_id={args.run_id}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "epsilon", None) is not None:
        overrides.append(f"adversary.epsilon={args.epsilon}")
    if getattr(args, "methods", None):
        overrides.append(f"attribution.methods=[{args.methods}]")
    if getattr(args, "include_misclassified", False):
        overrides.append("attribution.include_misclassified=true")
    if getattr(args, "first_groups", None) is not None:
        overrides.append(f"train.finetune.first_groups={args.first_groups}")
    cfg = load_config(args.config, overrides)
    if getattr(args, "images", None) is not None:
        cfg.attribution.image_ids = [i for i in args.images.split(",") if i]
        cfg.validate()
    return cfg


def _train_epsilon(cfg: ExperimentConfig, adversarial: bool) -> float:
    return pipeline.default_epsilon(cfg) if adversarial else 0.0


def _endpoints(cfg, paths, splits) -> dict[str, Path]:
    seed = cfg.train.seed
    _, std = pipeline.train_model(cfg, paths, splits, seed, 0.0)
    _, rob = pipeline.train_model(cfg, paths, splits, seed, pipeline.default_epsilon(cfg))
    return {"standard": paths.root / std.checkpoints[0], "robust": paths.root / rob.checkpoints[0]}


def run(args) -> dict:
    cfg = _config(args)
    paths = pipeline.RunPaths.for_config(cfg)
    cmd = args.command
    if cmd == "prepare":
        d = pipeline.prepare_data(cfg, paths)
        return {"data_dir": str(d), "manifest": str(d / "manifest.json")}

    splits = pipeline.load_data(cfg, paths)
    if cmd == "train":
        _, record = pipeline.train_model(cfg, paths, splits, cfg.train.seed, _train_epsilon(cfg, args.adversarial))
        return {"name": record.name, "checkpoint": record.checkpoints[0], **record.summary}

    key = config_hash({"command": cmd, "config": cfg.compute_dict(), "args": _arg_key(args)})[:8]
    if cmd == "grid-search":
        out = pipeline.grid_search(cfg, paths, splits, _train_epsilon(cfg, args.adversarial))
    elif cmd == "attack-eval":
        ckpts = dict(args.checkpoint) or _endpoints(cfg, paths, splits)
        eps = args.epsilons if args.epsilons is not None else [pipeline.default_epsilon(cfg)]
        out = pipeline.attack_eval(cfg, paths, splits, ckpts, eps)
    elif cmd == "attribute":
        from .model import load_checkpoint

        ckpts = dict(args.checkpoint) or _endpoints(cfg, paths, splits)
        models = {name: load_checkpoint(path) for name, path in ckpts.items()}
        rows = pipeline.comparison_rows(cfg, models, splits["test"])
        fig = pipeline.emit_figure(cfg, paths, f"attribute-{key}", models, ckpts, splits["test"], rows)
        out = {"figure": fig["figure"], "sidecar": f"figures/attribute-{key}.json", "n_images": len(rows)}
    elif cmd == "sweep-epsilon":
        eps = args.epsilons if args.epsilons is not None else cfg.adversary.epsilon_list
        out = pipeline.sweep_epsilon(cfg, paths, splits, eps)
    elif cmd == "seed-study":
        seeds = args.seeds if args.seeds is not None else cfg.train.seeds
        report = pipeline.seed_study(cfg, paths, splits, seeds, _train_epsilon(cfg, args.adversarial))
        report.save(paths.records / f"seed-study-{key}.json")
        return {"report": f"records/seed-study-{key}.json", "mean_similarity": report.mean}
    elif cmd == "finetune-groups":
        if "val" not in splits:
            raise DataError("robust fine-tuning needs a validation split; set data.n_val > 0")
        ends = _endpoints(cfg, paths, splits) if args.checkpoint is None or args.standard_checkpoint is None else {}
        robust = args.checkpoint or ends["robust"]
        standard = args.standard_checkpoint or ends["standard"]
        out = pipeline.finetune_groups(cfg, paths, splits, robust, standard, cfg.train.finetune.first_groups)
    else:  # pragma: no cover - argparse rejects unknown commands
        raise ConfigError(f"unknown command {cmd!r}")
    pipeline.command_record(paths, f"{cmd}-{key}", out)
    return {"record": f"records/{cmd}-{key}.json", **out}


def _arg_key(args) -> dict:
    skip = {"config", "overrides", "run_id", "verbose", "command"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        out = run(args)
    except (ConfigError, InputShapeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(out, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
