"""PNG figures rendered next to the CSV outputs.  The CSVs remain the record."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_benchmark(result, path) -> Path:
    """Per-seed A_k trajectories plus the seed mean."""
    fig, ax = plt.subplots(figsize=(6, 4))
    trajs = [r["trajectory"] for r in result.runs]
    for r in result.runs:
        ks = np.arange(1, len(r["trajectory"]) + 1)
        ax.plot(ks, r["trajectory"], color="0.75", lw=0.8)
    if len({len(t) for t in trajs}) == 1:
        mean = np.mean(np.array(trajs), axis=0)
        ax.plot(np.arange(1, len(mean) + 1), mean, color="C0", lw=2, label="mean")
        ax.legend()
    c = result.config
    label = c["learner"] if c["policy"] == "none" else f"{c['learner']} / {c['policy']} / {c['samples_per_class']} spc"
    ax.set(xlabel="tasks learned", ylabel="average accuracy", title=label, ylim=(0, 1))
    return _save(fig, path)


def plot_rotation(result: dict, path) -> Path:
    """Seed-averaged task-1 test accuracy along task-2 iterations, one line per regime."""
    fig, ax = plt.subplots(figsize=(6, 4))
    curves: dict[str, dict[int, list[float]]] = {}
    for r in result["runs"]:
        for c in r["curves"]:
            curves.setdefault(c["regime"], {}).setdefault(c["iteration"], []).append(c["accuracy"])
    for regime, points in curves.items():
        its = sorted(points)
        ax.plot(its, [np.mean(points[i]) for i in its], label=regime)
    recipe = result["config"]["recipe"]
    ax.set(
        xlabel="iterations on task 2",
        ylabel="task 1 test accuracy",
        title=f"{recipe['angle_task1']:g} vs {recipe['angle_task2']:g} degrees",
        ylim=(0, 1),
    )
    ax.legend()
    return _save(fig, path)


def plot_hybrid(result: dict, path) -> Path:
    """Seed-averaged A_k per memory policy."""
    from .experiments import mean_trajectories

    fig, ax = plt.subplots(figsize=(6, 4))
    for policy, traj in mean_trajectories(result).items():
        ax.plot(np.arange(1, len(traj) + 1), traj, marker="o", ms=3, label=policy)
    ax.set(xlabel="tasks learned", ylabel="average accuracy", ylim=(0, 1))
    ax.legend()
    return _save(fig, path)


def plot_tune(result: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    groups: dict[object, list[tuple[float, float]]] = {}
    for row in result["grid"]:
        groups.setdefault(row.get("ewc_lambda"), []).append((row["lr"], row["A_T_mean"]))
    for lam, pts in groups.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label="lr" if lam is None else f"lambda={lam:g}")
    ax.set(xscale="log", xlabel="learning rate", ylabel="average accuracy (CV tasks)", ylim=(0, 1))
    ax.legend()
    return _save(fig, path)
