"""Shared test helpers: finite-difference oracles and tolerance checks.

The finite-difference helper only ever calls forward functions, so the
gradient checks stay independent of the analytic backward code they pin.
"""

import numpy as np
import pytest


def fd_gradient(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f()`` w.r.t. ``arr``.

    ``f`` must read ``arr`` afresh on every call; entries are perturbed in
    place and restored.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def assert_grads_close(analytic, numeric, rtol: float = 1e-4,
                       floor: float = 1e-4, label: str = "") -> None:
    """Relative comparison with an absolute floor for near-zero entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    assert a.shape == n.shape, f"{label}: shape {a.shape} != {n.shape}"
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    rel = np.abs(a - n) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst <= rtol, f"{label}: max relative error {worst:.3e} > {rtol:.1e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
