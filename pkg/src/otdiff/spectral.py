"""Leading eigenpairs of a diffusion operator and Laplacian eigenvalue estimates.

``Q = Lambda S Lambda`` is self-adjoint for ``<f, g>_M``.  Conjugating by
``M^{1/2}`` gives the ordinary symmetric operator

    B = M^{1/2} Lambda K Lambda M^{1/2},   B y = M^{1/2} Q (M^{-1/2} y),

whose top eigenvectors ``y`` map back to ``M``-orthonormal ``phi = M^{-1/2} y``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .normalize import DiffusionOperator


@dataclass
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    converged: bool = True
    matvecs: int = 0

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]


def _orthonormal_block(Z, V, rng, drop_tol=1e-10):
    """Orthonormalize ``Z`` against the columns of ``V`` and itself.

    Columns that vanish (Krylov space exhausted, exact degeneracy) are
    replaced with fresh random directions.
    """
    n, b = Z.shape
    for _ in range(4):
        if V is not None and V.shape[1]:
            Z = Z - V @ (V.T @ Z)
            Z = Z - V @ (V.T @ Z)
        norms = np.linalg.norm(Z, axis=0)
        Q, R = np.linalg.qr(Z)
        good = np.abs(np.diag(R)) > drop_tol * max(1.0, norms.max(initial=0.0))
        if np.all(good):
            if V is not None and V.shape[1]:
                Q = Q - V @ (V.T @ Q)
                Q, _ = np.linalg.qr(Q)
            return Q
        Z = np.where(good[None, :], Q, rng.standard_normal((n, b)))
    raise RuntimeError("could not extend the Krylov basis")


def _fix_signs(vectors):
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs[None, :]


def top_eigenpairs(
    diff: DiffusionOperator,
    k: int,
    solver_tol: float = 1e-8,
    max_iters: int = 5000,
    block_size: int | None = None,
    seed: int = 0,
) -> SpectralBasis:
    """Largest ``k`` eigenpairs of ``Q`` by block Lanczos with full reorthogonalization.

    ``max_iters`` bounds the number of operator applications.  Convergence
    means every returned pair has ``|Q phi - lam phi|_M <= solver_tol``;
    otherwise the best Ritz pairs are returned with ``converged=False``.
    """
    n = diff.n
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    if block_size is None:
        block_size = min(4, k + 1)
    block_size = max(1, min(block_size, n))
    rng = np.random.default_rng(seed)
    sqrt_m = np.sqrt(diff.masses)[:, None]

    def apply_b(Y):
        return sqrt_m * diff.matvec(Y / sqrt_m)

    V = np.empty((n, 0))
    W = np.empty((n, 0))
    T = np.empty((0, 0))
    X = _orthonormal_block(rng.standard_normal((n, block_size)), None, rng)
    matvecs = 0
    converged = False
    while True:
        BX = apply_b(X)
        matvecs += X.shape[1]
        m0 = V.shape[1]
        V = np.hstack([V, X])
        W = np.hstack([W, BX])
        cross = V.T @ BX
        T_new = np.zeros((V.shape[1], V.shape[1]))
        T_new[:m0, :m0] = T
        T_new[:, m0:] = cross
        T_new[m0:, :] = cross.T
        T = 0.5 * (T_new + T_new.T)

        theta, S = np.linalg.eigh(T)
        order = np.argsort(-theta)[:k]
        theta, S = theta[order], S[:, order]
        Y = V @ S
        resid = np.linalg.norm(W @ S - Y * theta[None, :], axis=0)
        full = V.shape[1] >= n
        if Y.shape[1] == k and (np.all(resid <= solver_tol) or full):
            # a basis spanning the whole space gives exact Ritz pairs
            converged = True
            break
        if matvecs >= max_iters and Y.shape[1] == k:
            break
        b = min(block_size, n - V.shape[1])
        X = _orthonormal_block(BX[:, :b], V, rng)

    theta = np.where((theta > 1.0) & (theta - 1.0 <= solver_tol), 1.0, theta)
    theta = np.where((theta < 0.0) & (-theta <= solver_tol), 0.0, theta)
    phi = _fix_signs(Y / sqrt_m)
    return SpectralBasis(theta, phi, resid, converged, matvecs)


def estimate_laplacian_eigenvalues(
    eigenvalues,
    sigma: float,
    modality: str = "points",
    gmm_trace_avg: float | None = None,
    d: int | None = None,
) -> np.ndarray:
    """Map diffusion eigenvalues to Laplacian eigenvalue estimates.

    Points and voxels use ``-2 / sigma^2 * log(lam)``.  Gaussian mixtures
    replace ``sigma^2`` by ``sigma^2 + (2 / d) * mean_trace`` where
    ``mean_trace`` is the mass-weighted average covariance trace and ``d``
    is 2 for surfaces and 3 for volumes.  Non-positive eigenvalues have no
    estimate and are dropped with a warning.
    """
    lam = np.asarray(getattr(eigenvalues, "eigenvalues", eigenvalues), dtype=float)
    if modality in ("points", "voxels", "gaussian", "exponential"):
        width = sigma**2
    elif modality == "gmm":
        if gmm_trace_avg is None or d not in (2, 3):
            raise ValueError("gmm estimates need the mean covariance trace and d in {2, 3}")
        width = sigma**2 + (2.0 / d) * gmm_trace_avg
    else:
        raise ValueError(f"no eigenvalue heuristic for modality {modality!r}")
    keep = lam > 0
    if not np.all(keep):
        warnings.warn(f"dropping {np.sum(~keep)} non-positive diffusion eigenvalue(s)", RuntimeWarning, stacklevel=2)
    est = -2.0 / width * np.log(np.minimum(lam[keep], 1.0))
    return np.maximum(est, 0.0)
