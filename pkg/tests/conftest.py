"""Shared fixtures and the finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from pyoodbench.autodiff import Tensor, backward
from pyoodbench.bench_util import load_experiment_config
from pyoodbench.data import gen_gaussian_benchmark
from pyoodbench.nn import Classifier, MlpConfig, train

# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def numeric_grad(fn: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], index: int,
                 h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar *fn* with respect to ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros_like(base)
    for pos in np.ndindex(base.shape):
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[index][pos] += h
        minus[index][pos] -= h
        grad[pos] = (fn(plus) - fn(minus)) / (2.0 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Relative error of two gradient arrays."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def gradcheck(build: Callable[[Sequence[Tensor]], Tensor], arrays: list[np.ndarray],
              h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences.

    *build* maps input tensors to any tensor; it is reduced to a scalar with
    fixed random weights so that no gradient is identically zero by symmetry.
    """
    probe = build([Tensor(a) for a in arrays])
    weights = np.random.default_rng(1234).normal(size=probe.shape)

    def scalar(values: list[np.ndarray]) -> float:
        return float(np.sum(build([Tensor(v) for v in values]).data * weights))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    backward((out * Tensor(weights)).sum())
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_err(analytic, numeric_grad(scalar, arrays, i, h)))
    return worst


# ---------------------------------------------------------------------------
# Shared data and models
# ---------------------------------------------------------------------------

SMALL_OVERRIDES = {
    "benchmark": {
        "gaussian": {"n_per_class": 80, "n_test_per_class": 40, "n_ood": 60},
        "moons": {"n_per_class": 80, "n_test_per_class": 40, "n_ood": 60},
    },
    "model": {"hidden_dims": [16], "epochs": 8, "batch_size": 32},
    "methods": {
        "mcdp": {"n_passes": 4},
        "ensemble": {"size": 2},
        "duq": {"embedding_dim": 4, "epochs": 2},
    },
    "run": {"seeds": [0]},
}


@pytest.fixture
def small_config():
    """Resolved default config shrunk to a few seconds of work."""
    return load_experiment_config("default", overrides=SMALL_OVERRIDES)


@pytest.fixture(scope="session")
def blobs():
    """Well separated two-class Gaussian benchmark, normalised."""
    return gen_gaussian_benchmark(
        d=2, num_classes=2, n_per_class=100, ood_shift=8.0, spread=1.0, seed=3,
        n_test_per_class=50, n_ood=80, normalize=True,
    )


@pytest.fixture(scope="session")
def trained_clf(blobs):
    """Small MLP trained on :func:`blobs`; scorers never mutate it."""
    cfg = MlpConfig(input_dim=2, hidden_dims=(16, 16), epochs=15, batch_size=32, seed=0)
    return train(Classifier.initialize(cfg), blobs.train).classifier
