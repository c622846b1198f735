"""Batch experiments: benchmark sweeps, rotation analysis, hybrid curves, tuning.

Each runner takes an :class:`ExperimentConfig`, runs every seed, writes its
delimited outputs under ``config.output_dir`` and returns the in-memory
results.  Accuracies are stored as fractions everywhere.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    PermutedMnistRecipe,
    RotatedMnistPairRecipe,
    TaskStream,
    build_stream,
    recipe_from_dict,
    recipe_to_dict,
)
from .errors import ConfigError
from .learners import LEARNERS, AGem, make_learner
from .memory import POLICIES, HybridMemory, make_memory
from .nn import Batch, MlpModel, project_agem
from .protocol import AccuracyMatrix, RunConfig, average_accuracy, evaluate, forgetting, iter_batches, run_single_pass

log = logging.getLogger(__name__)

ROTATION_REGIMES = ("m1", "d2", "d2+m1", "agem")
DEFAULT_REGIMES = ("m1", "d2", "d2+m1")


@dataclass
class ExperimentConfig:
    recipe: object = field(default_factory=PermutedMnistRecipe)
    learner: str = "er"
    policy: str = "ring"
    samples_per_class: int = 1
    lr: float = 0.1
    batch_sz: int = 10
    replay_batch_sz: int = 10
    ewc_lambda: float = 10.0
    fisher_decay: float = 0.9
    ewc_normalize_fisher: bool = True
    mof_alpha: float = 0.9
    hidden: tuple[int, ...] = (256, 256)
    shared_head: bool = True
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "results"
    data_dir: str | None = None
    eval_every: int = 10
    regimes: tuple[str, ...] = DEFAULT_REGIMES
    policies: tuple[str, ...] = ("reservoir", "ring", "hybrid")
    lr_grid: tuple[float, ...] = (0.003, 0.01, 0.03, 0.1, 0.3)
    lambda_grid: tuple[float, ...] = (1.0, 10.0, 100.0)
    jobs: int = 1
    plots: bool = True

    def __post_init__(self):
        if isinstance(self.recipe, dict):
            self.recipe = recipe_from_dict(self.recipe)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.seeds = tuple(int(s) for s in self.seeds)
        for name in ("regimes", "policies", "lr_grid", "lambda_grid"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.learner not in LEARNERS:
            raise ConfigError(f"unknown learner {self.learner!r}; choose from {LEARNERS}")
        if self.policy not in POLICIES + ("none",):
            raise ConfigError(f"unknown memory policy {self.policy!r}")
        if self.policy == "none" and self.learner in ("er", "agem"):
            raise ConfigError(f"learner {self.learner!r} needs a memory policy")
        if self.policy != "none" and self.learner in ("finetune", "ewc"):
            raise ConfigError(f"memory policy must be 'none' for learner {self.learner!r}")
        if self.policy != "none" and self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1 when a memory is used")
        if not self.lr > 0 or self.batch_sz < 1 or self.replay_batch_sz < 1:
            raise ConfigError("lr, batch_sz and replay_batch_sz must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if min(self.seeds) < 0:
            raise ConfigError("seeds must be non-negative")
        if self.jobs < 1 or self.eval_every < 1:
            raise ConfigError("jobs and eval_every must be positive")
        bad = set(self.regimes) - set(ROTATION_REGIMES)
        if bad:
            raise ConfigError(f"unknown rotation regimes {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["recipe"] = recipe_to_dict(self.recipe)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def label(self) -> str:
        if self.policy == "none":
            return self.learner
        return f"{self.learner}-{self.policy}-spc{self.samples_per_class}"


# ---------------------------------------------------------------- single runs


def seeded_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for model init and for the training stream."""
    model_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(model_ss), np.random.default_rng(train_ss)


def stream_for_seed(config: ExperimentConfig, seed: int) -> TaskStream:
    recipe = dataclasses.replace(config.recipe, seed=config.recipe.seed + seed)
    return build_stream(recipe, config.data_dir)


def total_classes(tasks) -> int:
    return sum(len(t.classes) for t in tasks)


def build_model(config: ExperimentConfig, stream: TaskStream, rng) -> MlpModel:
    return MlpModel(stream.input_dim, config.hidden, stream.num_classes, rng, shared_head=config.shared_head)


def build_learner(config: ExperimentConfig, tasks, policy: str | None = None):
    policy = config.policy if policy is None else policy
    memory = None
    if policy != "none":
        classes = total_classes(tasks)
        memory = make_memory(policy, config.samples_per_class * classes, classes, config.mof_alpha)
    return make_learner(
        config.learner, memory, config.replay_batch_sz, config.ewc_lambda, config.fisher_decay, config.ewc_normalize_fisher
    )


def run_seed(config: ExperimentConfig, seed: int, policy: str | None = None, cv: bool = False) -> dict:
    """One full single-pass run; returns a JSON-ready record."""
    stream = stream_for_seed(config, seed)
    tasks = stream.cv_tasks if cv else stream.ev_tasks
    if not tasks:
        raise ConfigError("the stream has no tasks for this run")
    model_rng, train_rng = seeded_rngs(seed)
    model = build_model(config, stream, model_rng)
    learner = build_learner(config, tasks, policy)
    matrix, _, memory = run_single_pass(stream, learner, model, RunConfig(config.lr, config.batch_sz), train_rng, tasks)
    T = matrix.rows_written
    record = {
        "seed": seed,
        "policy": config.policy if policy is None else policy,
        "matrix": matrix_to_list(matrix),
        "A_T": average_accuracy(matrix, T),
        "F_T": forgetting(matrix, T) if T >= 2 else None,
        "trajectory": matrix.trajectory(),
        "memory_size": None if memory is None else len(memory),
    }
    if isinstance(memory, HybridMemory):
        record["switch_task"] = memory.switch_task
    if isinstance(learner, AGem):
        record["projections"] = learner.projections
    return record


def matrix_to_list(m: AccuracyMatrix) -> list[list[float | None]]:
    return [[None if math.isnan(v) else float(v) for v in row] for row in m.a]


def matrix_from_list(rows) -> AccuracyMatrix:
    a = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)
    return AccuracyMatrix.from_array(a)


def _map_seeds(fn, args: list[tuple], jobs: int) -> tuple[list, list]:
    """Run ``fn(*a)`` for each tuple; collect results and failures in order."""
    results, failures = [], []
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(fn, *a) for a in args]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append((fut.result(), None))
                except Exception as exc:  # noqa: BLE001 - reported per seed
                    outcomes.append((None, exc))
    else:
        outcomes = []
        for a in args:
            try:
                outcomes.append((fn(*a), None))
            except Exception as exc:  # noqa: BLE001
                outcomes.append((None, exc))
    for a, (res, exc) in zip(args, outcomes):
        if exc is None:
            results.append(res)
        else:
            log.error("run %s failed: %s", a[1:], exc)
            failures.append({"args": repr(a[1:]), "error": f"{type(exc).__name__}: {exc}"})
    return results, failures


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = [v for v in values if v is not None]
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- benchmark


@dataclass
class RunResult:
    config: dict
    runs: list[dict]
    failures: list[dict]
    wall_clock_seconds: float

    @property
    def A_T(self) -> list[float]:
        return [r["A_T"] for r in self.runs]

    @property
    def F_T(self) -> list[float | None]:
        return [r["F_T"] for r in self.runs]

    def stats(self) -> dict:
        a_mean, a_std = summarize(self.A_T)
        f_mean, f_std = summarize(self.F_T)
        return {"A_T_mean": a_mean, "A_T_std": a_std, "F_T_mean": f_mean, "F_T_std": f_std}

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "runs": self.runs,
            "failures": self.failures,
            "summary": self.stats(),
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(d["config"], d["runs"], d.get("failures", []), d["wall_clock_seconds"])

    def summary_row(self) -> list:
        c = self.config
        s = self.stats()
        return [
            c["learner"],
            c["policy"],
            c["samples_per_class"] if c["policy"] != "none" else "",
            len(self.runs),
            repr(s["A_T_mean"]),
            repr(s["A_T_std"]),
            repr(s["F_T_mean"]),
            repr(s["F_T_std"]),
        ]


SUMMARY_HEADER = ["learner", "policy", "spc", "n_seeds", "A_T_mean", "A_T_std", "F_T_mean", "F_T_std"]


def run_benchmark(config: ExperimentConfig, write: bool = True) -> RunResult:
    """Run every seed of one configuration and write its result files."""
    start = time.perf_counter()
    runs, failures = _map_seeds(run_seed, [(config, s) for s in config.seeds], config.jobs)
    result = RunResult(config.to_dict(), runs, failures, time.perf_counter() - start)
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "results.json", result.to_dict())
        for r in runs:
            (out / f"matrix_{r['seed']}.csv").write_text(matrix_from_list(r["matrix"]).to_csv())
        _write_csv(out / "summary.csv", SUMMARY_HEADER, [result.summary_row()])
        if config.plots and runs:
            from .plotting import plot_benchmark

            plot_benchmark(result, out / "trajectory.png")
    return result


# ---------------------------------------------------------------- rotation analysis


def _memory_accuracy(model: MlpModel, memory) -> float:
    slots = memory.slots
    if not slots:
        return math.nan
    x = np.stack([s.input for s in slots])
    pred = model.predict(x, slots[0].task_id)
    return float(np.mean(pred == np.array([s.label for s in slots])))


def _train_accuracy(model: MlpModel, task) -> float:
    return float(np.mean(model.predict(task.train_x, task.task_id) == task.train_y))


def rotation_seed(config: ExperimentConfig, seed: int) -> dict:
    """Train task 1, then replay each regime over task 2 from the same snapshot."""
    recipe = config.recipe
    if not isinstance(recipe, RotatedMnistPairRecipe):
        raise ConfigError("rotation analysis needs a rotation recipe")
    stream = stream_for_seed(config, seed)
    task1, task2 = stream.ev_tasks
    model_rng, train_rng = seeded_rngs(seed)
    model = build_model(config, stream, model_rng)
    # memory holds samples_per_class examples of each task-1 class
    policy = "ring" if config.policy == "none" else config.policy
    classes = len(task1.classes)
    memory = make_memory(policy, config.samples_per_class * classes, classes, config.mof_alpha)
    learner = make_learner("er", memory, config.replay_batch_sz)
    for batch in iter_batches(task1, config.batch_sz, train_rng):
        learner.observe(model, batch, config.lr, train_rng)
    snapshot = model.copy()
    task2_batches = list(iter_batches(task2, config.batch_sz, train_rng))
    regime_seed = int(train_rng.integers(2**63))

    curves, finals = [], []
    for regime in config.regimes:
        m = snapshot.copy()
        rng = np.random.default_rng(regime_seed)
        curves.append((regime, 0, evaluate(m, task1)))
        for it, b2 in enumerate(task2_batches, start=1):
            replay = memory.sample(config.replay_batch_sz, rng)
            if regime == "m1":
                _, g = m.loss_and_grad(replay)
            elif regime == "d2":
                _, g = m.loss_and_grad(b2)
            elif regime == "d2+m1":
                _, g = m.loss_and_grad(Batch.concat([b2, replay]))
            else:
                _, g = m.loss_and_grad(b2)
                _, g_ref = m.loss_and_grad(replay)
                g = project_agem(g, g_ref.align(g.heads))
            m.sgd_step(g, config.lr)
            if it % config.eval_every == 0 or it == len(task2_batches):
                curves.append((regime, it, evaluate(m, task1)))
        finals.append(
            {
                "regime": regime,
                "train_accuracy": _train_accuracy(m, task1),
                "memory_accuracy": _memory_accuracy(m, memory),
                "test_accuracy": curves[-1][2],
            }
        )
    return {
        "seed": seed,
        "post_task1_accuracy": evaluate(snapshot, task1),
        "curves": [{"regime": r, "iteration": i, "accuracy": a} for r, i, a in curves],
        "finals": finals,
    }


def run_rotation_analysis(config: ExperimentConfig, write: bool = True) -> dict:
    start = time.perf_counter()
    runs, failures = _map_seeds(rotation_seed, [(config, s) for s in config.seeds], config.jobs)
    result = {
        "config": config.to_dict(),
        "runs": runs,
        "failures": failures,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "results.json", result)
        _write_csv(
            out / "curves.csv",
            ["regime", "iteration", "accuracy", "seed"],
            [[c["regime"], c["iteration"], repr(c["accuracy"]), r["seed"]] for r in runs for c in r["curves"]],
        )
        _write_csv(
            out / "rotation_summary.csv",
            ["seed", "regime", "train_accuracy", "memory_accuracy", "test_accuracy"],
            [
                [r["seed"], f["regime"], repr(f["train_accuracy"]), repr(f["memory_accuracy"]), repr(f["test_accuracy"])]
                for r in runs
                for f in r["finals"]
            ],
        )
        if config.plots and runs:
            from .plotting import plot_rotation

            plot_rotation(result, out / "curves.png")
    return result


def final_regime_means(result: dict, key: str = "test_accuracy") -> dict[str, float]:
    by_regime: dict[str, list[float]] = {}
    for r in result["runs"]:
        for f in r["finals"]:
            by_regime.setdefault(f["regime"], []).append(f[key])
    return {k: float(np.mean(v)) for k, v in by_regime.items()}


# ---------------------------------------------------------------- hybrid curve


def run_hybrid_curve(config: ExperimentConfig, write: bool = True) -> dict:
    """ER with each memory policy on the same seeds; per-task A_k trajectories."""
    start = time.perf_counter()
    config = config.replace(learner="er")
    args = [(config, s, p) for s in config.seeds for p in config.policies]
    runs, failures = _map_seeds(run_seed, args, config.jobs)
    result = {
        "config": config.to_dict(),
        "runs": runs,
        "failures": failures,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "results.json", result)
        _write_csv(
            out / "hybrid_curve.csv",
            ["seed", "policy", "task", "average_accuracy"],
            [[r["seed"], r["policy"], k, repr(a)] for r in runs for k, a in enumerate(r["trajectory"], start=1)],
        )
        _write_csv(
            out / "hybrid_switch.csv",
            ["seed", "switch_task"],
            [
                [r["seed"], "never" if r["switch_task"] is None else r["switch_task"]]
                for r in runs
                if r["policy"] == "hybrid"
            ],
        )
        if config.plots and runs:
            from .plotting import plot_hybrid

            plot_hybrid(result, out / "hybrid_curve.png")
    return result


def mean_trajectories(result: dict) -> dict[str, np.ndarray]:
    by_policy: dict[str, list] = {}
    for r in result["runs"]:
        by_policy.setdefault(r["policy"], []).append(r["trajectory"])
    return {p: np.mean(np.array(v), axis=0) for p, v in by_policy.items()}


# ---------------------------------------------------------------- tuning


def run_tune(config: ExperimentConfig, write: bool = True) -> dict:
    """Grid search over the cross-validation tasks; ranks settings by mean A_T."""
    if config.learner == "ewc":
        grid = [{"lr": lr, "ewc_lambda": lam} for lr in config.lr_grid for lam in config.lambda_grid]
    else:
        grid = [{"lr": lr} for lr in config.lr_grid]
    start = time.perf_counter()
    rows = []
    for point in grid:
        cfg = config.replace(**point)
        runs, failures = _map_seeds(run_seed, [(cfg, s, None, True) for s in cfg.seeds], cfg.jobs)
        mean, std = summarize([r["A_T"] for r in runs])
        rows.append({**point, "A_T_mean": mean, "A_T_std": std, "n_seeds": len(runs), "failures": len(failures)})
    finite = [r for r in rows if not math.isnan(r["A_T_mean"])]
    best = max(finite, key=lambda r: r["A_T_mean"]) if finite else None
    result = {
        "config": config.to_dict(),
        "grid": rows,
        "best": best,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "results.json", result)
        keys = ["lr", "ewc_lambda"] if config.learner == "ewc" else ["lr"]
        _write_csv(
            out / "tune.csv",
            keys + ["n_seeds", "A_T_mean", "A_T_std"],
            [[r[k] for k in keys] + [r["n_seeds"], repr(r["A_T_mean"]), repr(r["A_T_std"])] for r in rows],
        )
        if config.plots and finite:
            from .plotting import plot_tune

            plot_tune(result, out / "tune.png")
    return result
