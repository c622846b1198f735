"""Dense multi-head network with hand-written backprop.

The trunk is shared by every task; each task id owns a linear classifier
head created lazily the first time the id shows up.  Gradients travel as
flat vectors with a fixed layout: trunk parameters in layer order
(weight, then bias), followed by the heads in ascending task-id order.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64


@dataclass
class Batch:
    """A stack of labeled examples, possibly drawn from several tasks."""

    inputs: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=DTYPE))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64).reshape(-1)
        k = self.inputs.shape[0]
        if self.labels.shape[0] != k or self.task_ids.shape[0] != k:
            raise ShapeError(
                f"batch has {k} inputs but {self.labels.shape[0]} labels "
                f"and {self.task_ids.shape[0]} task ids"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def empty(cls, input_dim: int) -> "Batch":
        return cls(np.zeros((0, input_dim)), np.zeros(0), np.zeros(0))

    @classmethod
    def for_task(cls, inputs, labels, task_id: int) -> "Batch":
        labels = np.asarray(labels)
        return cls(inputs, labels, np.full(labels.shape[0], task_id))

    @classmethod
    def concat(cls, batches: Iterable["Batch"]) -> "Batch":
        batches = [b for b in batches if len(b)]
        return cls(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.task_ids for b in batches]),
        )


@dataclass(frozen=True)
class GradientVector:
    """Flat vector over the trunk plus the listed heads.

    ``heads`` is sorted ascending and fixes where each head segment sits.
    The same container is used for parameter snapshots (EWC anchors).
    """

    values: np.ndarray
    heads: tuple[int, ...]
    trunk_size: int
    head_size: int

    def __post_init__(self):
        expected = self.trunk_size + len(self.heads) * self.head_size
        if self.values.shape != (expected,):
            raise ShapeError(f"vector has shape {self.values.shape}, layout needs ({expected},)")
        if list(self.heads) != sorted(set(self.heads)):
            raise ShapeError(f"head ids must be unique and ascending, got {self.heads}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def trunk(self) -> np.ndarray:
        return self.values[: self.trunk_size]

    def head(self, task_id: int) -> np.ndarray:
        pos = self.heads.index(task_id)
        start = self.trunk_size + pos * self.head_size
        return self.values[start : start + self.head_size]

    def align(self, heads: Sequence[int]) -> "GradientVector":
        """Re-express on another head layout; absent segments become zero."""
        heads = tuple(sorted(set(heads)))
        out = np.zeros(self.trunk_size + len(heads) * self.head_size, dtype=DTYPE)
        out[: self.trunk_size] = self.trunk
        for i, t in enumerate(heads):
            if t in self.heads:
                start = self.trunk_size + i * self.head_size
                out[start : start + self.head_size] = self.head(t)
        return GradientVector(out, heads, self.trunk_size, self.head_size)

    def with_values(self, values: np.ndarray) -> "GradientVector":
        return GradientVector(np.asarray(values, dtype=DTYPE), self.heads, self.trunk_size, self.head_size)


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy, computed through log-sum-exp."""
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    return float(np.mean(log_norm - z[np.arange(len(labels)), labels]))


class MlpModel:
    """Fully connected ReLU trunk with one classifier head per task.

    Weights are stored as ``(out, in)`` matrices.  ``seed`` drives every
    initialization, including heads created later on.  With
    ``shared_head=True`` every task id maps onto head 0, giving a single
    classifier over a shared label space.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int] = (256, 256),
        num_classes: int = 10,
        seed: int | np.random.Generator = 0,
        shared_head: bool = False,
    ):
        if input_dim < 1 or num_classes < 1 or not hidden or min(hidden) < 1:
            raise ShapeError("input_dim, hidden widths and num_classes must be positive")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.num_classes = int(num_classes)
        self.shared_head = bool(shared_head)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.trunk: list[tuple[np.ndarray, np.ndarray]] = []
        fan_in = self.input_dim
        for width in self.hidden:
            self.trunk.append((glorot_uniform(self.rng, width, fan_in), np.zeros(width, dtype=DTYPE)))
            fan_in = width
        self.heads: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    @property
    def trunk_size(self) -> int:
        return sum(w.size + b.size for w, b in self.trunk)

    @property
    def head_size(self) -> int:
        return self.num_classes * self.feature_dim + self.num_classes

    def head_key(self, task_id: int) -> int:
        return 0 if self.shared_head else int(task_id)

    def head_keys(self, task_ids) -> np.ndarray:
        task_ids = np.asarray(task_ids, dtype=np.int64)
        return np.zeros_like(task_ids) if self.shared_head else task_ids

    def ensure_head(self, key: int) -> tuple[np.ndarray, np.ndarray]:
        """Head stored under ``key`` (see :meth:`head_key`), created on first use."""
        key = int(key)
        if key not in self.heads:
            w = glorot_uniform(self.rng, self.num_classes, self.feature_dim)
            self.heads[key] = (w, np.zeros(self.num_classes, dtype=DTYPE))
        return self.heads[key]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def _check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=DTYPE))
        if inputs.ndim != 2 or inputs.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of shape (K, {self.input_dim}), got {inputs.shape}")
        return inputs

    def _trunk_forward(self, inputs: np.ndarray) -> list[np.ndarray]:
        acts = [inputs]
        for w, b in self.trunk:
            acts.append(np.maximum(acts[-1] @ w.T + b, 0.0))
        return acts

    def features(self, inputs: np.ndarray) -> np.ndarray:
        """Post-ReLU activations of the last hidden layer."""
        return self._trunk_forward(self._check_inputs(inputs))[-1]

    def _heads_forward(self, feats: np.ndarray, task_ids: np.ndarray) -> np.ndarray:
        logits = np.empty((feats.shape[0], self.num_classes), dtype=DTYPE)
        for t in np.unique(task_ids):
            w, b = self.ensure_head(t)
            idx = task_ids == t
            logits[idx] = feats[idx] @ w.T + b
        return logits

    def forward(self, inputs: np.ndarray, task_ids) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(logits, features)``; row k of logits uses head ``task_ids[k]``."""
        inputs = self._check_inputs(inputs)
        task_ids = np.broadcast_to(np.asarray(task_ids, dtype=np.int64), (inputs.shape[0],))
        feats = self._trunk_forward(inputs)[-1]
        return self._heads_forward(feats, self.head_keys(task_ids)), feats

    def predict(self, inputs: np.ndarray, task_id: int) -> np.ndarray:
        logits, _ = self.forward(inputs, task_id)
        return logits.argmax(axis=1)

    def loss_and_grad(self, batch: Batch) -> tuple[float, GradientVector]:
        """Mean cross-entropy over the batch and its gradient.

        Each example routes through its own head; the gradient covers the
        trunk plus every head the batch touches, keyed by :meth:`head_key`.
        """
        if len(batch) == 0:
            raise ShapeError("cannot compute a gradient on an empty batch")
        if batch.labels.min() < 0 or batch.labels.max() >= self.num_classes:
            raise ShapeError(f"labels must lie in [0, {self.num_classes})")
        inputs = self._check_inputs(batch.inputs)
        k = inputs.shape[0]
        acts = self._trunk_forward(inputs)
        feats = acts[-1]
        keys = self.head_keys(batch.task_ids)
        logits = self._heads_forward(feats, keys)
        loss = cross_entropy(logits, batch.labels)

        dlogits = softmax(logits)
        dlogits[np.arange(k), batch.labels] -= 1.0
        dlogits /= k

        heads = tuple(int(t) for t in np.unique(keys))
        head_grads = []
        dfeat = np.empty_like(feats)
        for t in heads:
            w, _ = self.heads[t]
            idx = keys == t
            head_grads.append((dlogits[idx].T @ feats[idx], dlogits[idx].sum(axis=0)))
            dfeat[idx] = dlogits[idx] @ w

        trunk_grads = []
        delta = dfeat
        for layer in range(len(self.trunk) - 1, -1, -1):
            w, _ = self.trunk[layer]
            delta = delta * (acts[layer + 1] > 0)
            trunk_grads.append((delta.T @ acts[layer], delta.sum(axis=0)))
            if layer:
                delta = delta @ w
        trunk_grads.reverse()
        return loss, self.flatten(trunk_grads, dict(zip(heads, head_grads)))

    def flatten(self, trunk_parts, head_parts: dict) -> GradientVector:
        """Pack per-layer ``(dW, db)`` pairs into the canonical flat layout."""
        heads = tuple(sorted(int(t) for t in head_parts))
        chunks = [a.ravel() for pair in trunk_parts for a in pair]
        chunks += [a.ravel() for t in heads for a in head_parts[t]]
        values = np.concatenate(chunks).astype(DTYPE, copy=False)
        return GradientVector(values, heads, self.trunk_size, self.head_size)

    def unflatten(self, vec: GradientVector):
        """Inverse of :meth:`flatten`: returns ``(trunk_parts, head_parts)``."""
        if vec.trunk_size != self.trunk_size or vec.head_size != self.head_size:
            raise ShapeError("vector layout does not match this model")
        pos = 0
        trunk_parts = []
        for w, b in self.trunk:
            dw = vec.values[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            db = vec.values[pos : pos + b.size]
            pos += b.size
            trunk_parts.append((dw, db))
        head_parts = {}
        c, f = self.num_classes, self.feature_dim
        for t in vec.heads:
            dw = vec.values[pos : pos + c * f].reshape(c, f)
            pos += c * f
            head_parts[t] = (dw, vec.values[pos : pos + c])
            pos += c
        return trunk_parts, head_parts

    def parameters(self, heads: Sequence[int]) -> GradientVector:
        """Flat copy of the trunk and the requested heads (by head key)."""
        return self.flatten(self.trunk, {t: self.ensure_head(t) for t in heads})

    def sgd_step(self, grad: GradientVector, lr: float) -> "MlpModel":
        """In-place ``p <- p - lr * g`` over every segment present in ``grad``."""
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not np.all(np.isfinite(grad.values)):
            raise NumericError("refusing SGD step with non-finite gradient entries")
        trunk_parts, head_parts = self.unflatten(grad)
        for (w, b), (dw, db) in zip(self.trunk, trunk_parts):
            w -= lr * dw
            b -= lr * db
        for t, (dw, db) in head_parts.items():
            w, b = self.ensure_head(t)
            w -= lr * dw
            b -= lr * db
        return self


def project_agem(g, g_ref):
    """Project ``g`` so it does not conflict with ``g_ref``.

    Returns ``g`` itself when ``g . g_ref >= 0`` (or ``g_ref`` is zero);
    otherwise ``g - (g . g_ref / g_ref . g_ref) g_ref``.  Accepts raw
    arrays or :class:`GradientVector` pairs sharing a layout.
    """
    if isinstance(g, GradientVector):
        if not isinstance(g_ref, GradientVector) or g.heads != g_ref.heads:
            raise ShapeError("g and g_ref must share a head layout")
        values = project_agem(g.values, g_ref.values)
        return g if values is g.values else g.with_values(values)
    g = np.asarray(g)
    g_ref = np.asarray(g_ref)
    if g.shape != g_ref.shape:
        raise ShapeError(f"length mismatch: {g.shape} vs {g_ref.shape}")
    dot = float(g @ g_ref)
    ref_sq = float(g_ref @ g_ref)
    if dot >= 0.0 or ref_sq == 0.0:
        return g
    out = g - (dot / ref_sq) * g_ref
    # second pass removes the rounding residue left along g_ref
    out = out - (float(out @ g_ref) / ref_sq) * g_ref
    if np.linalg.norm(out) <= 1e-12 * np.linalg.norm(g):
        # g was antiparallel to g_ref up to rounding
        return np.zeros_like(out)
    return out
