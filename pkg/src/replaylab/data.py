"""MNIST IDX ingestion and task-stream construction."""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_ENV = "REPLAYLAB_DATA_DIR"
NUM_CV_TASKS = 3


@dataclass
class RawDataset:
    images: np.ndarray  # (N, 784) in [0, 1]
    labels: np.ndarray  # (N,) in 0..9

    def __post_init__(self):
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise ConfigError("a raw dataset needs N > 0 images with one label each")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TaskData:
    """One task's train and test split.

    Inputs are kept as shared base arrays plus an optional row selection
    and pixel permutation, so many permuted copies of MNIST cost no extra
    memory; ``train_x`` and ``test_x`` materialize them on access.
    """

    task_id: int
    train_base: np.ndarray
    train_y: np.ndarray
    test_base: np.ndarray
    test_y: np.ndarray
    classes: tuple[int, ...]
    perm: np.ndarray | None = None
    train_rows: np.ndarray | None = None
    test_rows: np.ndarray | None = None

    @staticmethod
    def _view(base, rows, perm) -> np.ndarray:
        x = base if rows is None else base[rows]
        return x if perm is None else x[:, perm]

    @property
    def train_x(self) -> np.ndarray:
        return self._view(self.train_base, self.train_rows, self.perm)

    @property
    def test_x(self) -> np.ndarray:
        return self._view(self.test_base, self.test_rows, self.perm)

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def input_dim(self) -> int:
        return self.train_base.shape[1]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "classes": list(self.classes),
            "train": {"inputs": self.train_x.tolist(), "labels": self.train_y.tolist()},
            "test": {"inputs": self.test_x.tolist(), "labels": self.test_y.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskData":
        return cls(
            int(d["task_id"]),
            np.asarray(d["train"]["inputs"], dtype=np.float64),
            np.asarray(d["train"]["labels"], dtype=np.int64),
            np.asarray(d["test"]["inputs"], dtype=np.float64),
            np.asarray(d["test"]["labels"], dtype=np.int64),
            tuple(d["classes"]),
        )


@dataclass
class TaskStream:
    """Cross-validation tasks (ids -T_cv..-1) and evaluation tasks (ids 1..T)."""

    cv_tasks: list[TaskData]
    ev_tasks: list[TaskData]

    @property
    def input_dim(self) -> int:
        return self.ev_tasks[0].input_dim

    @property
    def num_classes(self) -> int:
        return 1 + max(max(t.classes) for t in self.ev_tasks + self.cv_tasks)

    def to_json(self) -> str:
        return json.dumps(
            {"cv_tasks": [t.to_dict() for t in self.cv_tasks], "ev_tasks": [t.to_dict() for t in self.ev_tasks]}
        )

    @classmethod
    def from_json(cls, text: str) -> "TaskStream":
        d = json.loads(text)
        return cls([TaskData.from_dict(t) for t in d["cv_tasks"]], [TaskData.from_dict(t) for t in d["ev_tasks"]])


# ---------------------------------------------------------------- IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, what: str, dims: int) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * dims
    if len(buf) < header:
        raise IdxTruncatedError(f"{what} file is shorter than its {header}-byte header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxMagicError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}")
    shape = struct.unpack(f">{dims}I", buf[4:header])
    need = int(np.prod(shape))
    payload = buf[header:]
    if len(payload) < need:
        raise IdxTruncatedError(f"{what} payload has {len(payload)} bytes, header promises {need}")
    return shape, payload[:need]


def load_idx(images_path, labels_path) -> RawDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    shape, pix = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, "image", 3)
    (n_labels,), lab = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, "label", 1)
    if shape[0] != n_labels:
        raise IdxCountMismatchError(f"{shape[0]} images but {n_labels} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(shape[0], shape[1] * shape[2]) / 255.0
    return RawDataset(images, np.frombuffer(lab, dtype=np.uint8).astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes())


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            p = root / (name + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")


def data_dir(explicit=None) -> Path:
    root = explicit or os.environ.get(DATA_ENV)
    if not root:
        raise ConfigError(f"set {DATA_ENV} or pass a data directory holding the MNIST IDX files")
    return Path(root)


def load_mnist(root=None) -> tuple[RawDataset, RawDataset]:
    """``(train, test)`` splits from the standard four IDX files."""
    root = data_dir(root)
    train = load_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"))
    test = load_idx(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"))
    return train, test


# ---------------------------------------------------------------- recipes


@dataclass
class PermutedMnistRecipe:
    total_tasks: int = 23
    cv_tasks: int = NUM_CV_TASKS
    per_task_train: int = 1000
    per_task_test: int = 10000
    seed: int = 0
    kind: str = field(default="permuted", init=False)

    def __post_init__(self):
        if self.total_tasks <= self.cv_tasks:
            raise ConfigError("total_tasks must exceed cv_tasks")
        if self.per_task_train < 1 or self.per_task_test < 1:
            raise ConfigError("per-task sizes must be positive")


@dataclass
class RotatedMnistPairRecipe:
    angle_task1: float = 0.0
    angle_task2: float = 10.0
    task2_train_count: int = 1000
    task1_train_count: int = 1000
    per_task_test: int = 10000
    seed: int = 0
    kind: str = field(default="rotation", init=False)

    def __post_init__(self):
        for a in (self.angle_task1, self.angle_task2):
            if not 0.0 <= a < 360.0:
                raise ConfigError(f"angles must lie in [0, 360), got {a}")


@dataclass
class SyntheticGaussianRecipe:
    tasks: int = 2
    classes: int = 2
    dim: int = 8
    samples: int = 200  # per class, train; test gets a quarter of that
    noise: float = 0.1
    cv_tasks: int = 0
    seed: int = 0
    kind: str = field(default="synthetic", init=False)

    def __post_init__(self):
        if self.classes < 2 or self.dim < 2:
            raise ConfigError("synthetic streams need classes >= 2 and dim >= 2")
        if self.tasks < 1 or self.samples < 1 or self.noise < 0:
            raise ConfigError("synthetic streams need tasks >= 1, samples >= 1, noise >= 0")


RECIPES = {r.kind: r for r in (PermutedMnistRecipe(), RotatedMnistPairRecipe(), SyntheticGaussianRecipe())}


def recipe_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "permuted")
    if kind not in RECIPES:
        raise ConfigError(f"unknown recipe kind {kind!r}; choose from {sorted(RECIPES)}")
    try:
        return type(RECIPES[kind])(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} recipe: {exc}") from None


def recipe_to_dict(recipe) -> dict:
    return asdict(recipe)


# ---------------------------------------------------------------- transforms


def permutation_for(key: int, seed: int, dim: int = 784) -> np.ndarray:
    """Seeded pixel permutation; ``key`` separates tasks of one stream."""
    return np.random.default_rng([seed, key]).permutation(dim)


def rotate_images(images: np.ndarray, angle: float, side: int = 28) -> np.ndarray:
    """Rotate flattened square images about their center.

    Bilinear resampling, zero outside the source frame.
    """
    if angle % 360.0 == 0.0:
        return np.array(images, dtype=np.float64)
    stack = np.asarray(images, dtype=np.float64).reshape(-1, side, side)
    out = ndimage.rotate(stack, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    return out.reshape(len(stack), side * side)


def _subset(rng: np.random.Generator, n: int, k: int, what: str) -> np.ndarray:
    if k > n:
        raise ConfigError(f"requested {k} {what} examples but only {n} are available")
    return np.sort(rng.choice(n, size=k, replace=False))


def make_permuted_stream(train: RawDataset, test: RawDataset, recipe: PermutedMnistRecipe) -> TaskStream:
    """Cross-validation tasks first, then the evaluation tasks.

    The first evaluation task keeps raw pixel order; every other task gets
    its own seeded permutation.  Each task draws its own training subset;
    test sets use the first ``per_task_test`` test images.
    """
    if recipe.per_task_test > len(test):
        raise ConfigError(f"requested {recipe.per_task_test} test examples but only {len(test)} exist")
    dim = train.images.shape[1]
    test_rows = np.arange(recipe.per_task_test)
    tasks = []
    for pos in range(recipe.total_tasks):
        perm = None if pos == recipe.cv_tasks else permutation_for(pos, recipe.seed, dim)
        rows = _subset(np.random.default_rng([recipe.seed, 1000 + pos]), len(train), recipe.per_task_train, "train")
        task_id = pos - recipe.cv_tasks + (1 if pos >= recipe.cv_tasks else 0)
        tasks.append(
            TaskData(
                task_id,
                train.images,
                train.labels[rows],
                test.images,
                test.labels[test_rows],
                tuple(range(10)),
                perm=perm,
                train_rows=rows,
                test_rows=test_rows,
            )
        )
    return TaskStream(tasks[: recipe.cv_tasks], tasks[recipe.cv_tasks :])


def make_rotation_pair(train: RawDataset, test: RawDataset, recipe: RotatedMnistPairRecipe) -> TaskStream:
    """Two evaluation tasks: digits at ``angle_task1`` then at ``angle_task2``."""
    rng = np.random.default_rng([recipe.seed, 7])
    counts = (recipe.task1_train_count, recipe.task2_train_count)
    if sum(counts) > len(train):
        raise ConfigError(f"requested {sum(counts)} train examples but only {len(train)} exist")
    if recipe.per_task_test > len(test):
        raise ConfigError(f"requested {recipe.per_task_test} test examples but only {len(test)} exist")
    order = rng.permutation(len(train))
    splits = (np.sort(order[: counts[0]]), np.sort(order[counts[0] : counts[0] + counts[1]]))
    tasks = []
    for task_id, angle, idx in zip((1, 2), (recipe.angle_task1, recipe.angle_task2), splits):
        tasks.append(
            TaskData(
                task_id,
                rotate_images(train.images[idx], angle),
                train.labels[idx],
                rotate_images(test.images[: recipe.per_task_test], angle),
                test.labels[: recipe.per_task_test],
                tuple(range(10)),
            )
        )
    return TaskStream([], tasks)


def make_synthetic_stream(recipe: SyntheticGaussianRecipe) -> TaskStream:
    """Gaussian blobs around task-and-class specific means.

    Means are drawn at scale ``sqrt(dim)`` per coordinate direction, so
    classes stay linearly separable while ``noise`` is small.
    """
    tasks = []
    for pos in range(recipe.cv_tasks + recipe.tasks):
        rng = np.random.default_rng([recipe.seed, pos])
        means = rng.normal(0.0, 1.0, size=(recipe.classes, recipe.dim))
        n_test = max(1, recipe.samples // 4)
        xs, ys = [], []
        for n in (recipe.samples, n_test):
            y = np.repeat(np.arange(recipe.classes), n)
            x = means[y] + recipe.noise * rng.normal(size=(len(y), recipe.dim))
            order = rng.permutation(len(y))
            xs.append(x[order])
            ys.append(y[order])
        task_id = pos - recipe.cv_tasks + (1 if pos >= recipe.cv_tasks else 0)
        tasks.append(TaskData(task_id, xs[0], ys[0], xs[1], ys[1], tuple(range(recipe.classes))))
    return TaskStream(tasks[: recipe.cv_tasks], tasks[recipe.cv_tasks :])


def build_stream(recipe, data_root=None) -> TaskStream:
    if recipe.kind == "synthetic":
        return make_synthetic_stream(recipe)
    train, test = load_mnist(data_root)
    if recipe.kind == "permuted":
        return make_permuted_stream(train, test, recipe)
    return make_rotation_pair(train, test, recipe)
