import functools
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from replaylab.data import DATA_ENV, load_mnist
from replaylab.errors import ConfigError

PKG_SRC = Path(__file__).resolve().parents[1] / "src" / "replaylab"
CACHE_DIR = Path(os.environ.get("REPLAYLAB_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))

CRITERIA: list[tuple[str, bool | None, str]] = []


def report(criterion: str, passed: bool | None, detail: str = "") -> None:
    """Record one acceptance line; ``passed=None`` marks a skip."""
    CRITERIA.append((criterion, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in CRITERIA:
        tag = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"[{tag}] {name}" + (f" :: {detail}" if detail else ""))


@functools.lru_cache(maxsize=None)
def mnist_dir():
    root = os.environ.get(DATA_ENV)
    if not root:
        return None
    try:
        load_mnist(root)
    except (ConfigError, OSError):
        return None
    return root


@pytest.fixture
def mnist_root(request):
    root = mnist_dir()
    if root is None:
        report(request.node.name, None, f"MNIST IDX files not found; set {DATA_ENV}")
        pytest.skip(f"MNIST IDX files not found; set {DATA_ENV}")
    return root


def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(PKG_SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def cached(kind: str, payload: dict, compute):
    """Memoize an expensive run on disk, keyed by its inputs and the package source."""
    key = hashlib.sha256(json.dumps([kind, payload, source_hash()], sort_keys=True).encode()).hexdigest()[:24]
    path = CACHE_DIR / f"{kind}-{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    result = compute()
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result))
    return result


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
