"""Shared fixtures: the synthetic corpus and finite-difference helpers.

Thread pools are pinned to one worker before numpy loads so that float
reductions keep a fixed order; several tests compare runs bit for bit.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from bsl.data import ensure_dataset, load_dataset


def numerical_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. x, perturbed in place."""
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric):
    """Max-norm relative error between an analytic and a numeric gradient."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    num = np.abs(analytic - numeric).max()
    den = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(num / den)


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    """Render the synthetic digit corpus once per test session."""
    d = tmp_path_factory.mktemp("corpus")
    return ensure_dataset(d, n_train=12000, n_test=2000, seed=1234)


@pytest.fixture(scope="session")
def dataset(data_dir):
    return load_dataset(data_dir)


@pytest.fixture(scope="session")
def small_dataset(dataset):
    """A trimmed view for fast protocol and CLI tests."""
    return {
        "x_train": dataset["x_train"][:640],
        "y_train": dataset["y_train"][:640],
        "x_test": dataset["x_test"][:128],
        "y_test": dataset["y_test"][:128],
        "info": dict(dataset["info"], train=640, test=128),
    }
