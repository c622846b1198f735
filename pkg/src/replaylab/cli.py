"""Command-line entry point: ``replaylab <subcommand> [--config FILE] [overrides]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .data import RECIPES, recipe_from_dict
from .errors import ConfigError, ReplayLabError
from .experiments import (
    ExperimentConfig,
    final_regime_means,
    mean_trajectories,
    run_benchmark,
    run_hybrid_curve,
    run_rotation_analysis,
    run_tune,
)

log = logging.getLogger("replaylab")

DEFAULT_RECIPE = {"rotation-analysis": "rotation"}


def _seeds(text: str) -> list[int]:
    """``0,1,2`` or a range ``0-4``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("no seeds given")
    return out


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _recipe(text: str) -> dict:
    """A recipe kind name or an inline JSON object."""
    if text in RECIPES:
        return {"kind": text}
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError(f"expected one of {sorted(RECIPES)} or a JSON object") from None
    if not isinstance(d, dict):
        raise argparse.ArgumentTypeError("recipe JSON must be an object")
    return d


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaylab", description="Continual learning with tiny episodic memories.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags below override its fields")
    common.add_argument("--recipe", type=_recipe, help="recipe kind or JSON object, e.g. '{\"kind\": \"permuted\"}'")
    common.add_argument("--learner", choices=("finetune", "er", "agem", "ewc"))
    common.add_argument("--policy", choices=("reservoir", "ring", "kmeans", "mof", "hybrid", "ring-full", "none"))
    common.add_argument("--spc", type=int, dest="samples_per_class", help="memory slots per class")
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-sz", type=int)
    common.add_argument("--ewc-lambda", type=float)
    common.add_argument("--seeds", type=_seeds, help="comma list or range, e.g. 0-4")
    common.add_argument("--output-dir")
    common.add_argument("--data-dir", help="MNIST IDX directory (default: $REPLAYLAB_DATA_DIR)")
    common.add_argument("--subsample", type=int, help="training examples per task for MNIST recipes")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--no-plots", dest="plots", action="store_false", default=None)

    sub.add_parser("benchmark", parents=[common], help="single-pass run over the evaluation stream")
    rot = sub.add_parser("rotation-analysis", parents=[common], help="two-task rotation generalization curves")
    rot.add_argument("--regimes", type=lambda s: s.split(","), help="subset of m1,d2,d2+m1,agem")
    rot.add_argument("--eval-every", type=int)
    hyb = sub.add_parser("hybrid-curve", parents=[common], help="A_k trajectories for several memory policies")
    hyb.add_argument("--policies", type=lambda s: s.split(","))
    tune = sub.add_parser("tune", parents=[common], help="grid search on the cross-validation tasks")
    tune.add_argument("--lr-grid", type=_floats)
    tune.add_argument("--lambda-grid", type=_floats)
    return parser


OVERRIDES = (
    "recipe",
    "learner",
    "policy",
    "samples_per_class",
    "lr",
    "batch_sz",
    "ewc_lambda",
    "seeds",
    "output_dir",
    "data_dir",
    "jobs",
    "plots",
    "regimes",
    "eval_every",
    "policies",
    "lr_grid",
    "lambda_grid",
)


def config_from_args(args) -> ExperimentConfig:
    d: dict = {}
    if args.config:
        with open(args.config) as f:
            d = json.load(f)
        if not isinstance(d, dict):
            raise ReplayLabError(f"{args.config}: config must be a JSON object")
    for key in OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    d.setdefault("recipe", {"kind": DEFAULT_RECIPE.get(args.command, "permuted")})
    if isinstance(d["recipe"], dict):
        d["recipe"] = recipe_from_dict(d["recipe"])
    if args.subsample is not None:
        d["recipe"] = subsample_recipe(d["recipe"], args.subsample)
    if args.command == "hybrid-curve":
        d["learner"] = "er"
    if d.get("learner") in ("finetune", "ewc") and "policy" not in d:
        d["policy"] = "none"
    return ExperimentConfig.from_dict(d)


def subsample_recipe(recipe, n: int):
    """Cap the per-task training set of an MNIST recipe at ``n`` examples."""
    if recipe.kind == "permuted":
        return dataclasses.replace(recipe, per_task_train=n)
    if recipe.kind == "rotation":
        return dataclasses.replace(recipe, task1_train_count=n, task2_train_count=n)
    raise ConfigError("--subsample applies to MNIST recipes only")


def _pct(x) -> str:
    return "n/a" if x is None or x != x else f"{100 * x:.1f}%"


def _report_failures(result) -> int:
    failures = result.failures if hasattr(result, "failures") else result["failures"]
    for f in failures:
        print(f"FAILED {f['args']}: {f['error']}", file=sys.stderr)
    return 1 if failures else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = config_from_args(args)
        if args.command == "benchmark":
            result = run_benchmark(config)
            s = result.stats()
            print(
                f"{config.label}: A_T {_pct(s['A_T_mean'])} (std {_pct(s['A_T_std'])}), "
                f"F_T {s['F_T_mean']:.3f} over {len(result.runs)} seed(s) -> {config.output_dir}"
            )
        elif args.command == "rotation-analysis":
            result = run_rotation_analysis(config)
            for regime, acc in final_regime_means(result).items():
                mem = final_regime_means(result, "memory_accuracy")[regime]
                print(f"{regime:>6}: task-1 test {_pct(acc)}, memory {_pct(mem)}")
        elif args.command == "hybrid-curve":
            result = run_hybrid_curve(config)
            for policy, traj in mean_trajectories(result).items():
                print(f"{policy:>10}: final A_T {_pct(traj[-1])}")
            for r in result["runs"]:
                if r["policy"] == "hybrid":
                    print(f"seed {r['seed']}: switch at task {r['switch_task'] or 'never'}")
        else:
            result = run_tune(config)
            best = result["best"]
            if best:
                extra = f", lambda {best['ewc_lambda']:g}" if "ewc_lambda" in best else ""
                print(f"best: lr {best['lr']:g}{extra} with A_T {_pct(best['A_T_mean'])}")
            failed = sum(row["failures"] for row in result["grid"])
            return 1 if failed else 0
    except (ReplayLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return _report_failures(result)


if __name__ == "__main__":
    sys.exit(main())
