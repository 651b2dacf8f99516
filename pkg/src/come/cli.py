"""Command-line entry point: ``come <subcommand> [--config PATH] [--seed N] [--out DIR] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 missing input artifact,
4 numeric failure (non-finite loss or activations).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, RunConfig, load_config
from .evaluate import write_csv
from .numerics import NumericError
from .training import StageError

log = logging.getLogger("come")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

# subcommand -> stage function taking (rc, ws, args)
COMMANDS = {
    "gen-data": lambda rc, ws, a: P.gen_data(rc, ws),
    "train-base": lambda rc, ws, a: P.train_base(rc, ws),
    "train-expert": lambda rc, ws, a: P.train_expert(rc, ws, a.stage),
    "assemble": lambda rc, ws, a: P.assemble(rc, ws),
    "train-router": lambda rc, ws, a: P.train_router(rc, ws),
    "train-cot": lambda rc, ws, a: P.train_cot(rc, ws),
    "train-rm": lambda rc, ws, a: P.train_rm(rc, ws),
    "sample": lambda rc, ws, a: P.sample(rc, ws),
    "build-dpo": lambda rc, ws, a: P.build_dpo(rc, ws),
    "train-dpo": lambda rc, ws, a: P.train_dpo(rc, ws),
    "eval": lambda rc, ws, a: P.evaluate(rc, ws, a.checkpoint),
    "report": lambda rc, ws, a: P.report(rc, ws),
}

HELP = {
    "gen-data": "generate the synthetic episodes and write train/val/test JSONL",
    "train-base": "full-parameter SFT of the dense parent model",
    "train-expert": "Expert-FT: train the FFNs of one specialist on one stage",
    "assemble": "build the four-channel model from the specialists",
    "train-router": "Router-FT: train only the channel router",
    "train-cot": "CoT-FT: full-trace SFT with the router-norm regulariser",
    "train-rm": "train the four stage-conditioned reward models",
    "sample": "sample K traces per step from the CoT-FT policy and score them",
    "build-dpo": "select chosen/rejected pairs from the sampled sets",
    "train-dpo": "Info-DPO fine-tuning of the CoT-FT policy",
    "eval": "greedy decoding on the test split and action-match metrics",
    "report": "summary CSV, FLOPs table and SVG plots",
    "run-all": "every subcommand above, in order",
    "experiment": "ablation arms and DPO strategies for several seeds (in-process)",
}

PIPELINE_ORDER = (
    ["gen-data", "train-base"]
    + [f"train-expert:{s}" for s in ("ss", "sp", "ad", "af")]
    + ["assemble", "train-router", "train-cot", "train-rm", "sample", "build-dpo", "train-dpo", "eval:cot",
       "eval:dpo", "report"]
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set cot.epochs=2 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="come", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "train-expert":
            sp.add_argument("--stage", required=True, choices=["ss", "sp", "ad", "af"])
        if name == "eval":
            sp.add_argument("--checkpoint", choices=P.EVAL_CHECKPOINTS,
                            help="checkpoint to evaluate (default: eval.checkpoint); 'gold' scores the gold traces")
        if name == "experiment":
            sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def _run_stage(command: str, rc: RunConfig, ws: P.Workspace, args: argparse.Namespace) -> None:
    t0 = time.perf_counter()
    log.info("%s: start", command)
    outputs = COMMANDS[command](rc, ws, args)
    wall = time.perf_counter() - t0
    tag = command if command != "train-expert" else f"train-expert-{args.stage}"
    if command == "eval":
        tag = f"eval-{args.checkpoint or rc.eval.checkpoint}"
    P.write_manifest(ws, tag, rc, outputs, wall)
    log.info("%s: done in %.1fs", command, wall)


def _run_all(rc: RunConfig, ws: P.Workspace, args: argparse.Namespace) -> None:
    for item in PIPELINE_ORDER:
        command, _, arg = item.partition(":")
        ns = argparse.Namespace(**vars(args))
        ns.stage = arg if command == "train-expert" else None
        ns.checkpoint = arg if command == "eval" else None
        _run_stage(command, rc, ws, ns)
    summary = ws.report("summary.csv")
    for row in csv.DictReader(open(summary, encoding="utf-8")):
        print(f"{row['checkpoint']}: match_acc={row['match_acc']} type_acc={row['type_acc']} n={row['count']}")


EXPERIMENT_FIELDS = ("seed",) + P.EXPERIMENT_ARMS + ("selection_acc", "ig_chosen_cc_cw", "ig_rejected_cc_cw",
                                                     "ig_chosen_cw", "ig_rejected_cw", "wall_time_s")


def _experiment(rc: RunConfig, ws: P.Workspace, args: argparse.Namespace) -> None:
    """Results already stored for the same config and sources are reused."""
    rows = []
    for seed in args.seeds:
        src = replace(rc, seed=seed)
        path = ws.root / "experiment" / f"seed{seed}.json"
        res = P.load_experiment(path, src)
        if res is None:
            res = P.run_experiment(src, log=lambda s: log.info("seed %d %s", seed, s))
            P.save_experiment(path, src, res)
        rows.append({"seed": seed, **{k: f"{v:.6f}" for k, v in res.match.items()},
                     "selection_acc": f"{res.selection_acc:.6f}",
                     "ig_chosen_cc_cw": f"{res.pair_ig['dpo_cc_cw']['chosen']:.6f}",
                     "ig_rejected_cc_cw": f"{res.pair_ig['dpo_cc_cw']['rejected']:.6f}",
                     "ig_chosen_cw": f"{res.pair_ig['dpo_cw']['chosen']:.6f}",
                     "ig_rejected_cw": f"{res.pair_ig['dpo_cw']['rejected']:.6f}",
                     "wall_time_s": f"{sum(res.timings.values()):.1f}"})
        print(json.dumps(res.to_json(), sort_keys=True))
    write_csv(ws.root / "experiment" / "summary.csv", EXPERIMENT_FIELDS, rows)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        rc = load_config(args.config, args.overrides, args.seed, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ws = P.Workspace(Path(rc.out))
    ws.root.mkdir(parents=True, exist_ok=True)
    rc.dump(ws.root / "config.yaml")
    try:
        if args.command == "run-all":
            _run_all(rc, ws, args)
        elif args.command == "experiment":
            _experiment(rc, ws, args)
        else:
            _run_stage(args.command, rc, ws, args)
            if args.command == "eval":
                name = args.checkpoint or rc.eval.checkpoint
                for row in csv.DictReader(open(ws.report(f"metrics_{name}.csv"), encoding="utf-8")):
                    print(f"{row['action']}: count={row['count']} type_acc={row['type_acc']} "
                          f"match_acc={row['match_acc']}")
    except P.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, StageError) as exc:
        cause = exc.cause if isinstance(exc, StageError) else exc
        if isinstance(cause, NumericError):
            print(f"error: numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
