"""Error metrics and permutation alignment for unmixing results."""
from __future__ import annotations

from itertools import permutations

import numpy as np

from .core import AbundanceMatrix, EndmemberSet


def are(Y: np.ndarray, Yhat: np.ndarray) -> float:
    """Average reconstruction error: RMS of per-pixel spectral residuals.

    sqrt( sum_n ||yhat_n - y_n||^2 / (L*N) ) for N x L inputs.
    """
    Y = np.asarray(Y, float)
    Yhat = np.asarray(Yhat, float)
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch {Y.shape} vs {Yhat.shape}")
    return float(np.sqrt(np.mean((Yhat - Y) ** 2)))


def rnmse(A: np.ndarray, Ahat: np.ndarray) -> float:
    """Root normalized mean square abundance error over pre-aligned columns."""
    A = np.asarray(A, float)
    Ahat = np.asarray(Ahat, float)
    if A.shape != Ahat.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {Ahat.shape}")
    return float(np.sqrt(np.mean((Ahat - A) ** 2)))


def sam(m: np.ndarray, mhat: np.ndarray) -> float:
    """Spectral angle between two spectra, in radians.

    Evaluates arccos of the normalized inner product through the arctan
    form, which stays exact for identical inputs and keeps full precision
    for nearly parallel spectra.
    """
    m = np.asarray(m, float).reshape(-1)
    mhat = np.asarray(mhat, float).reshape(-1)
    nm, nh = np.linalg.norm(m), np.linalg.norm(mhat)
    if nm == 0.0 or nh == 0.0:
        raise ValueError("SAM is undefined for zero vectors")
    u, v = m / nm, mhat / nh
    return float(2.0 * np.arctan2(np.linalg.norm(u - v), np.linalg.norm(u + v)))


def _columns(obj) -> np.ndarray:
    if isinstance(obj, EndmemberSet):
        return obj.spectra
    if isinstance(obj, AbundanceMatrix):
        return obj.values
    return np.asarray(obj, float)


def align_columns(truth, est) -> tuple[int, ...]:
    """Permutation ``p`` minimizing total SAM of ``est[:, p]`` against truth.

    Exhaustive search; fine for the handful of endmembers used here.  Apply
    the returned permutation to estimated abundance columns as well so the
    two stay consistent.
    """
    T = _columns(truth)
    E = _columns(est)
    if T.shape[1] != E.shape[1]:
        raise ValueError("column counts differ")
    R = T.shape[1]
    if R > 8:
        raise ValueError("exhaustive alignment only supported for R <= 8")
    best, best_perm = np.inf, tuple(range(R))
    for perm in permutations(range(R)):
        total = sum(sam(T[:, r], E[:, perm[r]]) for r in range(R))
        if total < best:
            best, best_perm = total, perm
    return best_perm
