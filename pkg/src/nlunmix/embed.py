"""PCA subspace basis, locally-linear-embedding weights, and latent init.

These three pieces prepare the inputs of the latent-variable fit: the fixed
spectral basis that anchors the prior on the mixing subspace, the sparse
neighborhood-reconstruction weights behind the locality-preserving prior,
and a deterministic starting point for the latent matrix.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

GRAM_REG = 1e-9


@dataclass(frozen=True)
class PcaBasis:
    """Top-D eigenvectors of the sample covariance, with eigenvalues.

    ``residual_variance`` is the mean of the discarded eigenvalues (0 when
    nothing is discarded); it seeds the noise-variance initialization of the
    latent fit.
    """

    basis: np.ndarray  # L x D, orthonormal columns
    eigenvalues: np.ndarray  # length D, nonincreasing
    residual_variance: float

    def __post_init__(self):
        b = np.array(self.basis, float)
        ev = np.array(self.eigenvalues, float)
        if b.ndim != 2 or ev.shape != (b.shape[1],):
            raise ValueError("basis must be L x D with one eigenvalue per column")
        if np.max(np.abs(b.T @ b - np.eye(b.shape[1]))) > 1e-10:
            raise ValueError("basis columns must be orthonormal")
        if np.any(np.diff(ev) > 0) or np.any(ev < 0):
            raise ValueError("eigenvalues must be nonincreasing and >= 0")
        b.flags.writeable = False
        ev.flags.writeable = False
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class LleWeights:
    """K-nearest-neighbor reconstruction weights, one row per pixel.

    ``neighbors[i]`` holds the K neighbor indices of pixel i and
    ``weights[i]`` the matching reconstruction coefficients, so exactly N*K
    entries are stored.  The weights solve the local least-squares
    reconstruction of each pixel from its neighbors; no sum constraint is
    imposed.
    """

    neighbors: np.ndarray  # N x K int
    weights: np.ndarray  # N x K float

    def __post_init__(self):
        nb = np.array(self.neighbors, np.int64)
        w = np.array(self.weights, float)
        if nb.shape != w.shape or nb.ndim != 2:
            raise ValueError("neighbors and weights must both be N x K")
        if np.any(nb == np.arange(nb.shape[0])[:, None]):
            raise ValueError("self-neighbors are not allowed")
        nb.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "weights", w)

    @property
    def n_pixels(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def matrix(self) -> scipy.sparse.csr_matrix:
        """The sparse N x N weight matrix (support on (i, neighbors of i))."""
        n, k = self.neighbors.shape
        rows = np.repeat(np.arange(n), k)
        return scipy.sparse.csr_matrix(
            (self.weights.ravel(), (rows, self.neighbors.ravel())), shape=(n, n)
        )

    def residual_operator(self) -> scipy.sparse.csr_matrix:
        """I - Lambda, mapping X to its neighborhood reconstruction residual."""
        return scipy.sparse.identity(self.n_pixels, format="csr") - self.matrix()

    def objective(self, Y: np.ndarray) -> float:
        """Total squared reconstruction error of Y under these weights."""
        return float(np.sum(np.asarray(self.residual_operator() @ Y) ** 2))


def pca_basis(Yc: np.ndarray, D: int) -> PcaBasis:
    """Top-D principal directions of centered pixels Yc (N x L).

    Sign convention: the largest-magnitude entry of every column is made
    positive, so the decomposition is reproducible.
    """
    Yc = np.asarray(Yc, float)
    n, l = Yc.shape
    if D > min(n - 1, l) or D < 1:
        raise ValueError(f"D must be in [1, min(N-1, L)] = [1, {min(n - 1, l)}]")
    cov = Yc.T @ Yc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    for d in range(l):
        lead = np.argmax(np.abs(evecs[:, d]))
        if evecs[lead, d] < 0:
            evecs[:, d] = -evecs[:, d]
    residual = float(evals[D:].mean()) if D < l else 0.0
    return PcaBasis(basis=evecs[:, :D], eigenvalues=evals[:D], residual_variance=residual)


def lle_weights(Y: np.ndarray, K: int) -> LleWeights:
    """Neighbor sets and local reconstruction weights for every pixel.

    Neighbors are the K nearest points in Euclidean distance (self excluded,
    ties broken toward the lower index).  Per row the weights solve the K x K
    normal equations of min ||y_i - sum_j w_j y_j||^2; a singular local Gram
    matrix is ridged by 1e-9 * trace before solving.
    """
    Y = np.asarray(Y, float)
    n = Y.shape[0]
    if K < 1 or K >= n:
        raise ValueError("need 1 <= K < N")
    sq = np.sum(Y**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T)
    np.fill_diagonal(d2, np.inf)
    # stable argsort keeps lower indices first among ties
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :K]
    weights = np.empty((n, K))
    for i in range(n):
        Z = Y[neighbors[i]]  # K x L
        G = Z @ Z.T
        b = Z @ Y[i]
        try:
            with warnings.catch_warnings():
                # near-singular neighborhoods are expected on structured
                # data; the finiteness check below arbitrates
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                w = scipy.linalg.solve(G, b, assume_a="pos")
            if not np.all(np.isfinite(w)):
                raise np.linalg.LinAlgError
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            try:
                Greg = G + GRAM_REG * np.trace(G) * np.eye(K)
                w = scipy.linalg.solve(Greg, b, assume_a="pos")
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
                # zero-trace Gram (all neighbors at the origin): minimum norm
                w = np.linalg.lstsq(G, b, rcond=None)[0]
        weights[i] = w
    return LleWeights(neighbors=neighbors, weights=weights)


def init_latents(Yc: np.ndarray, basis_top: np.ndarray) -> np.ndarray:
    """Deterministic latent starting point from the top R-1 principal axes.

    Scores are standardized to zero mean and per-axis standard deviation
    1/(2R); the last latent coordinate completes each row to sum 1.  The
    1/(2R) spread keeps the starting cloud small enough that the simplex
    geometry stays recoverable; it is a tunable convention, not a fitted
    quantity.
    """
    Yc = np.asarray(Yc, float)
    basis_top = np.asarray(basis_top, float)
    r_minus_1 = basis_top.shape[1]
    R = r_minus_1 + 1
    scores = Yc @ basis_top
    scores = scores - scores.mean(axis=0)
    std = scores.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    scores = scores / scale / (2.0 * R)
    return np.hstack([scores, 1.0 - scores.sum(axis=1, keepdims=True)])
