"""Single-pass training protocol and the accuracy / forgetting metrics.

Task indices in the public metric functions are 1-based, matching the way
results are usually reported (``a[i][j]`` is accuracy on task ``j`` after
training task ``i``).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import TaskData, TaskStream
from .errors import ConfigError
from .nn import Batch, MlpModel


class AccuracyMatrix:
    """Lower-triangular record of test accuracies; undefined cells are NaN."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ConfigError("an accuracy matrix needs at least one task")
        self.a = np.full((num_tasks, num_tasks), np.nan)
        self.rows_written = 0

    @property
    def num_tasks(self) -> int:
        return self.a.shape[0]

    def record_row(self, i: int, accuracies) -> None:
        """Write row ``i`` (1-based): accuracies on tasks ``1..i``."""
        if i != self.rows_written + 1:
            raise ConfigError(f"row {i} written out of order (next is {self.rows_written + 1})")
        accuracies = np.asarray(accuracies, dtype=np.float64)
        if accuracies.shape != (i,):
            raise ConfigError(f"row {i} needs {i} accuracies, got {accuracies.shape}")
        if np.any((accuracies < 0) | (accuracies > 1)):
            raise ConfigError("accuracies must lie in [0, 1]")
        self.a[i - 1, :i] = accuracies
        self.rows_written = i

    @classmethod
    def from_array(cls, a) -> "AccuracyMatrix":
        a = np.asarray(a, dtype=np.float64)
        m = cls(a.shape[0])
        for i in range(1, a.shape[0] + 1):
            m.record_row(i, a[i - 1, :i])
        return m

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{j}" for j in range(1, self.num_tasks + 1)])
        for i in range(self.rows_written):
            writer.writerow([i + 1] + [repr(float(v)) if j <= i else "" for j, v in enumerate(self.a[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        m = cls(len(rows))
        for i, row in enumerate(rows, start=1):
            m.record_row(i, [float(v) for v in row[1 : i + 1]])
        return m

    def tobytes(self) -> bytes:
        return self.a.tobytes()

    def trajectory(self) -> list[float]:
        """Average accuracy after each recorded task."""
        return [average_accuracy(self, k) for k in range(1, self.rows_written + 1)]


def _check_row(m: AccuracyMatrix, T: int) -> None:
    if not 1 <= T <= m.rows_written:
        raise ConfigError(f"task {T} has not been recorded ({m.rows_written} rows available)")


def average_accuracy(m: AccuracyMatrix, T: int) -> float:
    """Mean of row ``T`` over tasks ``1..T``."""
    _check_row(m, T)
    return float(np.mean(m.a[T - 1, :T]))


def forgetting(m: AccuracyMatrix, T: int) -> float:
    """Mean over tasks ``j < T`` of best earlier accuracy minus accuracy after ``T``.

    The best earlier accuracy of task ``j`` ranges over rows ``j..T-1``,
    the rows in which task ``j`` has a recorded accuracy.
    """
    if T < 2:
        raise ConfigError("forgetting is undefined before the second task")
    _check_row(m, T)
    a = m.a
    drops = [a[j - 1 : T - 1, j - 1].max() - a[T - 1, j - 1] for j in range(1, T)]
    return float(np.mean(drops))


def evaluate(model: MlpModel, task: TaskData, batch_size: int = 10000) -> float:
    """Fraction of the task's test set classified correctly by its head."""
    n = len(task.test_y)
    if n == 0:
        raise ConfigError(f"task {task.task_id} has an empty test set")
    x = task.test_x
    correct = 0
    for start in range(0, n, batch_size):
        pred = model.predict(x[start : start + batch_size], task.task_id)
        correct += int(np.sum(pred == task.test_y[start : start + batch_size]))
    return correct / n


@dataclass
class RunConfig:
    lr: float = 0.1
    batch_sz: int = 10


def iter_batches(task: TaskData, batch_sz: int, rng: np.random.Generator):
    """Shuffle once, then yield disjoint mini-batches (the last may be short)."""
    if task.n_train == 0:
        raise ConfigError(f"task {task.task_id} has an empty training set")
    x = task.train_x
    order = rng.permutation(task.n_train)
    for start in range(0, task.n_train, batch_sz):
        idx = order[start : start + batch_sz]
        yield Batch.for_task(x[idx], task.train_y[idx], task.task_id)


def run_single_pass(
    stream: TaskStream,
    learner,
    model: MlpModel,
    config: RunConfig,
    rng: np.random.Generator,
    tasks: list[TaskData] | None = None,
    on_batch: Callable[[int, Batch, float], None] | None = None,
):
    """Train once over each task in order, evaluating after every task.

    ``tasks`` defaults to the evaluation stream.  Returns the filled
    accuracy matrix, the trained model and the learner's memory (or None).
    """
    tasks = stream.ev_tasks if tasks is None else tasks
    if config.batch_sz < 1 or not config.lr > 0:
        raise ConfigError("batch size and learning rate must be positive")
    matrix = AccuracyMatrix(len(tasks))
    for i, task in enumerate(tasks, start=1):
        for batch in iter_batches(task, config.batch_sz, rng):
            loss = learner.observe(model, batch, config.lr, rng)
            if on_batch is not None:
                on_batch(i, batch, loss)
        learner.on_task_boundary(model, task.task_id)
        matrix.record_row(i, [evaluate(model, t) for t in tasks[:i]])
    return matrix, model, getattr(learner, "memory", None)
