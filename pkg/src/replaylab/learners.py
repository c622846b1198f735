"""Training strategies sharing one interface.

A learner turns each current-task mini-batch into exactly one SGD step via
``observe(model, batch, lr, rng)`` and is told when a task ends through
``on_task_boundary(model, task_id)``.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .memory import EpisodicMemory
from .nn import Batch, GradientVector, MlpModel, project_agem


def _current_task(batch: Batch) -> int:
    tasks = np.unique(batch.task_ids)
    if tasks.size != 1:
        raise ConfigError(f"a current-task batch must carry one task id, got {tasks.tolist()}")
    return int(tasks[0])


class Finetune:
    """Plain SGD on the incoming batch; no memory, no regularizer."""

    name = "finetune"
    memory: EpisodicMemory | None = None

    def observe(self, model: MlpModel, batch: Batch, lr: float, rng: np.random.Generator) -> float:
        loss, grad = model.loss_and_grad(batch)
        model.sgd_step(grad, lr)
        return loss

    def on_task_boundary(self, model: MlpModel, task_id: int) -> None:
        pass


class _MemoryLearner:
    def __init__(self, memory: EpisodicMemory, replay_batch_sz: int = 10):
        if replay_batch_sz < 1:
            raise ConfigError("replay batch size must be positive")
        self.memory = memory
        self.replay_batch_sz = int(replay_batch_sz)

    def write_memory(self, model: MlpModel, batch: Batch, task_id: int, rng) -> None:
        features = model.features(batch.inputs) if self.memory.needs_features else None
        self.memory.update(task_id, batch, rng, features=features)

    def on_task_boundary(self, model: MlpModel, task_id: int) -> None:
        pass


class ExperienceReplay(_MemoryLearner):
    """One step on the current batch stacked with a replay batch, then a memory write."""

    name = "er"

    def observe(self, model, batch, lr, rng):
        task_id = _current_task(batch)
        replay = self.memory.sample(self.replay_batch_sz, rng)
        stacked = Batch.concat([batch, replay]) if len(replay) else batch
        loss, grad = model.loss_and_grad(stacked)
        model.sgd_step(grad, lr)
        self.write_memory(model, batch, task_id, rng)
        return loss


class AGem(_MemoryLearner):
    """Step along the current-task gradient, projected against the replay gradient.

    Both gradients are compared on the trunk plus the current task's head;
    head segments the replay batch does not touch count as zero.
    """

    name = "agem"

    def __init__(self, memory: EpisodicMemory, replay_batch_sz: int = 10):
        super().__init__(memory, replay_batch_sz)
        self.projections = 0

    def direction(self, model: MlpModel, batch: Batch, rng) -> tuple[float, GradientVector, GradientVector | None]:
        loss, g = model.loss_and_grad(batch)
        replay = self.memory.sample(self.replay_batch_sz, rng)
        if not len(replay):
            return loss, g, None
        _, g_ref = model.loss_and_grad(replay)
        g_ref = g_ref.align(g.heads)
        d = project_agem(g, g_ref)
        if d is not g:
            self.projections += 1
        return loss, d, g_ref

    def observe(self, model, batch, lr, rng):
        task_id = _current_task(batch)
        loss, d, _ = self.direction(model, batch, rng)
        model.sgd_step(d, lr)
        self.write_memory(model, batch, task_id, rng)
        return loss


class OnlineEwc:
    """Quadratic pull toward the last task's parameters.

    A single diagonal Fisher estimate is kept as an exponential moving
    average of squared mini-batch gradients across the whole stream; the
    penalty ``lam/2 * sum(F * (theta - anchor)^2)`` applies to the trunk and
    to the current head once that head has an anchor.

    With ``normalize_fisher`` the penalty instead uses the estimate frozen at
    the last boundary, min-max scaled to [0, 1] across all parameters.  Raw
    squared mini-batch gradients are tiny, so without scaling ``lam`` has to
    be orders of magnitude larger to have any effect.
    """

    name = "ewc"
    memory: EpisodicMemory | None = None

    def __init__(self, lam: float = 10.0, fisher_decay: float = 0.9, normalize_fisher: bool = False):
        if lam < 0:
            raise ConfigError("EWC strength must be non-negative")
        if not 0.0 < fisher_decay < 1.0:
            raise ConfigError("Fisher decay must lie in (0, 1)")
        self.lam = float(lam)
        self.fisher_decay = float(fisher_decay)
        self.normalize_fisher = bool(normalize_fisher)
        self.fisher_trunk: np.ndarray | None = None
        self.fisher_heads: dict[int, np.ndarray] = {}
        self.anchor: GradientVector | None = None
        self.frozen_trunk: np.ndarray | None = None
        self.frozen_heads: dict[int, np.ndarray] = {}

    def penalty_grad(self, model: MlpModel, head: int) -> GradientVector:
        """Penalty gradient on the trunk plus head ``head`` (a head key)."""
        params = model.parameters([head])
        out = np.zeros_like(params.values)
        f_trunk, f_heads = self.penalty_weights()
        if self.anchor is None or f_trunk is None:
            return params.with_values(out)
        ts = params.trunk_size
        out[:ts] = self.lam * f_trunk * (params.trunk - self.anchor.trunk)
        if head in self.anchor.heads and head in f_heads:
            out[ts:] = self.lam * f_heads[head] * (params.head(head) - self.anchor.head(head))
        return params.with_values(out)

    def observe(self, model, batch, lr, rng):
        head = model.head_key(_current_task(batch))
        loss, g = model.loss_and_grad(batch)
        step = g
        if self.lam > 0 and self.anchor is not None:
            step = g.with_values(g.values + self.penalty_grad(model, head).values)
        model.sgd_step(step, lr)
        self._update_fisher(g, head)
        return loss

    def _update_fisher(self, g: GradientVector, head: int) -> None:
        a = self.fisher_decay
        if self.fisher_trunk is None:
            self.fisher_trunk = np.zeros(g.trunk_size)
        self.fisher_trunk = a * self.fisher_trunk + (1 - a) * g.trunk**2
        prev = self.fisher_heads.get(head, np.zeros(g.head_size))
        self.fisher_heads[head] = a * prev + (1 - a) * g.head(head) ** 2

    def penalty_weights(self) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        if self.normalize_fisher:
            return self.frozen_trunk, self.frozen_heads
        return self.fisher_trunk, self.fisher_heads

    def on_task_boundary(self, model: MlpModel, task_id: int) -> None:
        self.anchor = model.parameters(sorted(model.heads))
        if self.normalize_fisher and self.fisher_trunk is not None:
            parts = [self.fisher_trunk, *self.fisher_heads.values()]
            lo = min(float(p.min()) for p in parts)
            span = max(float(p.max()) for p in parts) - lo
            scale = 1.0 / span if span > 0 else 0.0
            self.frozen_trunk = (self.fisher_trunk - lo) * scale
            self.frozen_heads = {k: (v - lo) * scale for k, v in self.fisher_heads.items()}


LEARNERS = ("finetune", "er", "agem", "ewc")


def make_learner(
    kind: str,
    memory: EpisodicMemory | None = None,
    replay_batch_sz: int = 10,
    ewc_lambda: float = 10.0,
    fisher_decay: float = 0.9,
    normalize_fisher: bool = False,
):
    if kind == "finetune":
        return Finetune()
    if kind == "ewc":
        return OnlineEwc(ewc_lambda, fisher_decay, normalize_fisher)
    if kind in ("er", "agem"):
        if memory is None:
            raise ConfigError(f"learner {kind!r} needs an episodic memory")
        cls = ExperienceReplay if kind == "er" else AGem
        return cls(memory, replay_batch_sz)
    raise ConfigError(f"unknown learner {kind!r}; choose from {LEARNERS}")
