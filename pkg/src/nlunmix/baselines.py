"""Linear unmixing baselines: VCA endmember extraction and fully
constrained least-squares (FCLS) abundance estimation.

VCA follows the published algorithm of Nascimento & Bioucas-Dias: an
SNR-dependent subspace projection followed by iterative orthogonal-direction
vertex hunting.  FCLS is solved exactly per pixel by an active-set method,
so the KKT conditions hold to solver precision rather than to an iteration
budget.
"""
from __future__ import annotations

import numpy as np

from .core import AbundanceMatrix, EndmemberSet, HyperImage

KKT_TOL = 1e-9


def simplex_lstsq(M: np.ndarray, y: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Minimize ||y - M a||^2 subject to a >= 0 and sum(a) = 1, exactly.

    Active-set iteration in the style of Lawson-Hanson, with the sum-to-one
    constraint carried inside the equality-constrained subproblem.  ``M``
    may be any L x R matrix whose passive-column subsets stay affinely
    independent (endmember spectra, or simplex vertices in latent space).
    """
    M = np.asarray(M, float)
    y = np.asarray(y, float).reshape(-1)
    L, R = M.shape
    if max_iter is None:
        max_iter = 6 * R * R + 30
    G = M.T @ M
    q = M.T @ y

    a = np.full(R, 1.0 / R)
    passive = np.ones(R, dtype=bool)

    def eq_solve(mask):
        idx = np.flatnonzero(mask)
        k = idx.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = G[np.ix_(idx, idx)]
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([q[idx], [1.0]])
        sol = np.linalg.solve(kkt, rhs)
        full = np.zeros(R)
        full[idx] = sol[:k]
        return full, sol[k]

    nu = 0.0
    for _ in range(max_iter):
        trial, nu = eq_solve(passive)
        if trial[passive].min() > -1e-13:
            a = np.where(passive, trial, 0.0)
            a[~passive] = 0.0
            # dual feasibility of the pinned coordinates
            lam = G @ a - q + nu
            blocked = ~passive
            if not blocked.any() or lam[blocked].min() >= -KKT_TOL:
                return np.maximum(a, 0.0)
            release = np.flatnonzero(blocked)[np.argmin(lam[blocked])]
            passive[release] = True
            continue
        # step from the feasible point toward the subproblem solution until
        # the first coordinate hits zero, then pin it
        drops = passive & (trial <= 0.0)
        denom = a - trial
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(drops & (denom > 0), a / denom, np.inf)
        ratios = np.where(drops & (denom <= 0), 0.0, ratios)
        t = min(1.0, float(ratios[drops].min()))
        a = a + t * (trial - a)
        a[~passive] = 0.0
        newly = passive & drops & (a <= 1e-13)
        if not newly.any():
            raise RuntimeError("active-set step made no progress")
        a[newly] = 0.0
        passive[newly] = False
    raise RuntimeError("active-set iteration failed to converge")


def kkt_residual(M: np.ndarray, y: np.ndarray, a: np.ndarray) -> float:
    """Worst violation of the FCLS optimality system at ``a``."""
    M = np.asarray(M, float)
    y = np.asarray(y, float).reshape(-1)
    a = np.asarray(a, float).reshape(-1)
    g = M.T @ (M @ a - y)
    passive = a > 0
    if passive.any():
        nu = -g[passive].mean()
    else:
        nu = 0.0
    stationarity = np.abs(g[passive] + nu).max() if passive.any() else 0.0
    dual = max(0.0, -(g[~passive] + nu).min()) if (~passive).any() else 0.0
    primal = abs(a.sum() - 1.0)
    neg = max(0.0, -a.min())
    return float(max(stationarity, dual, primal, neg))


def fcls(Y: HyperImage | np.ndarray, M: EndmemberSet) -> AbundanceMatrix:
    """Per-pixel fully constrained least squares against the endmembers."""
    pixels = Y.pixels if isinstance(Y, HyperImage) else np.asarray(Y, float)
    S = M.spectra
    if pixels.shape[1] != S.shape[0]:
        raise ValueError("pixel band count must match endmember band count")
    if np.linalg.matrix_rank(S) < S.shape[1]:
        raise ValueError("endmember matrix is rank deficient")
    out = np.empty((pixels.shape[0], S.shape[1]))
    for n in range(pixels.shape[0]):
        out[n] = simplex_lstsq(S, pixels[n])
    return AbundanceMatrix(out)


def _estimate_snr(Y: np.ndarray, y_mean: np.ndarray, x_p: np.ndarray) -> float:
    L, N = Y.shape
    R = x_p.shape[0]
    p_y = float(np.sum(Y**2)) / N
    p_x = float(np.sum(x_p**2)) / N + float(y_mean @ y_mean)
    denom = p_y - p_x
    if denom <= 0:
        return np.inf
    return float(10.0 * np.log10((p_x - R / L * p_y) / denom))


def vca(Y: HyperImage | np.ndarray, R: int, seed: int) -> EndmemberSet:
    """Vertex component analysis on uncentered pixels.

    The random direction vectors come from the given seed, so repeated runs
    are identical.
    """
    pixels = Y.pixels if isinstance(Y, HyperImage) else np.asarray(Y, float)
    if isinstance(Y, HyperImage) and Y.centered:
        raise ValueError("VCA expects uncentered reflectance data")
    Ym = pixels.T  # L x N, pixels as columns
    L, N = Ym.shape
    if R > L:
        raise ValueError("need R <= L")
    sv = np.linalg.svd(Ym, compute_uv=False)
    if (sv > 1e-10 * sv[0]).sum() < R:
        raise ValueError("data rank is below the requested endmember count")
    rng = np.random.default_rng(seed)

    y_mean = Ym.mean(axis=1)
    Yo = Ym - y_mean[:, None]
    U_cent, _, _ = np.linalg.svd(Yo @ Yo.T / N)
    x_p = U_cent[:, :R].T @ Yo
    snr = _estimate_snr(Ym, y_mean, x_p)
    snr_threshold = 15.0 + 10.0 * np.log10(R)

    if snr > snr_threshold:
        # projective projection on the raw second-moment subspace
        Ud, _, _ = np.linalg.svd(Ym @ Ym.T / N)
        Ud = Ud[:, :R]
        x = Ud.T @ Ym
        Yp = Ud @ x
        u = x.mean(axis=1)
        y = x / (u @ x)[None, :]
    else:
        # affine projection to R-1 dimensions plus a constant coordinate
        Ud = U_cent[:, : R - 1]
        x = Ud.T @ Yo
        Yp = Ud @ x + y_mean[:, None]
        c = np.sqrt(np.max(np.sum(x**2, axis=0)))
        y = np.vstack([x, c * np.ones((1, N))])

    indices = np.zeros(R, dtype=int)
    A = np.zeros((R, R))
    A[-1, 0] = 1.0
    for i in range(R):
        w = rng.standard_normal(R)
        f = w - A @ (np.linalg.pinv(A) @ w)
        f /= np.linalg.norm(f)
        v = f @ y
        indices[i] = int(np.argmax(np.abs(v)))
        A[:, i] = y[:, indices[i]]

    return EndmemberSet(Yp[:, indices], names=tuple(f"vca_{i + 1}" for i in range(R)))
