"""Dense brute-force references for small problems.

Nothing here is fast.  These routines exist so that the matrix-free code
paths can be checked against something obviously correct: explicit
matrices, a plain fixed-point loop, and a Jacobi eigensolver.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, SizeError
from .geometry_io import VoxelGrid
from .normalize import DiffusionOperator, ScalingVector
from .operators import SmoothingOperator, smatvec, voxel_tap_radius

ASSEMBLE_MAX_N = 4096
EIGS_MAX_N = 512


def dense_assemble(op: SmoothingOperator) -> np.ndarray:
    """Explicit ``S`` whose column ``j`` is ``smatvec(op, e_j)``."""
    n = op.n
    if n > ASSEMBLE_MAX_N:
        raise SizeError(f"N = {n} exceeds dense assembly limit {ASSEMBLE_MAX_N}")
    out = np.empty((n, n))
    step = 512
    for start in range(0, n, step):
        stop = min(n, start + step)
        basis = np.zeros((n, stop - start))
        basis[np.arange(start, stop), np.arange(stop - start)] = 1.0
        out[:, start:stop] = smatvec(op, basis)
    return out


def dense_kernel(op: SmoothingOperator) -> np.ndarray:
    """Explicit ``K = S M^{-1}``."""
    return dense_assemble(op) / op.masses[None, :]


def dense_diffusion(diff: DiffusionOperator) -> np.ndarray:
    """Explicit ``Q = Lambda S Lambda``."""
    lam = diff.scaling.scales
    return lam[:, None] * dense_assemble(diff.op) * lam[None, :]


def dense_voxel_kernel(grid: VoxelGrid, sigma: float) -> np.ndarray:
    """Explicit pairwise Gaussian over voxel centers with per-axis tap truncation.

    A pair contributes only if every axis offset is within the tap radius
    used by the separable operator, so the two agree to rounding.
    """
    if grid.n > ASSEMBLE_MAX_N:
        raise SizeError(f"N = {grid.n} exceeds dense assembly limit {ASSEMBLE_MAX_N}")
    c = grid.centers()
    offsets = np.abs(grid.indices[:, None, :] - grid.indices[None, :, :])
    inside = np.all(offsets <= voxel_tap_radius(sigma, grid.spacing), axis=2)
    diff = c[:, None, :] - c[None, :, :]
    return np.where(inside, np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / (2.0 * sigma**2)), 0.0)


def dense_sinkhorn(S, masses, tol: float = 1e-12, max_iter: int = 100_000) -> ScalingVector:
    """Fixed-point loop ``lam <- sqrt(lam / (S lam))`` on an explicit matrix."""
    S = np.asarray(S, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if np.any(S <= 0):
        raise NumericalError("dense Sinkhorn reference needs strictly positive entries")
    lam = np.ones(S.shape[0])
    history = []
    for it in range(max_iter + 1):
        d = S @ lam
        err = float(np.sum(masses * np.abs(lam * d - 1.0)) / np.sum(masses))
        if not np.isfinite(err):
            raise NumericalError("NaN in dense Sinkhorn")
        history.append(err)
        if err <= tol:
            return ScalingVector(np.log(lam), True, err, it, history)
        lam = np.sqrt(lam / d)
    return ScalingVector(np.log(lam), False, history[-1], max_iter, history)


def _round_robin(m: int):
    """Rounds of disjoint pairs covering every pair of ``range(m)`` once (``m`` even)."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        rounds.append([(players[i], players[m - 1 - i]) for i in range(m // 2)])
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(B, tol: float = 1e-15, max_sweeps: int = 60):
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Rotations are scheduled in round-robin order so that each round applies
    ``N/2`` disjoint Givens rotations at once.  Returns eigenvalues in
    descending order and orthonormal eigenvectors as columns.
    """
    A = np.array(B, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    m = n + (n % 2)
    rounds = []
    for pairs in _round_robin(m):
        pairs = [(p, q) for p, q in pairs if p < n and q < n]
        p = np.array([min(a, b) for a, b in pairs])
        q = np.array([max(a, b) for a, b in pairs])
        rounds.append((p, q))
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(n), V
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            app = A[p, p]
            aqq = A[q, q]
            # tan of the rotation angle, written so tiny apq cannot overflow
            d = aqq - app
            two = 2.0 * apq
            denom = np.abs(d) + np.hypot(d, two)
            t = np.where(apq != 0, np.where(d >= 0, 1.0, -1.0) * two / np.where(denom > 0, denom, 1.0), 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
    else:
        raise NumericalError("Jacobi sweeps did not converge")
    w = A.diagonal().copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def dense_generalized_eigs(sym, masses):
    """Solve ``sym phi = lam M phi`` for the full spectrum.

    ``sym`` is the symmetric matrix ``M Q = Lambda M K M Lambda``.  The
    problem is conjugated by ``M^{1/2}`` and handed to :func:`jacobi_eigh`.
    Eigenvalues come back descending; ``phi^T M phi = I``.
    """
    sym = np.asarray(sym, dtype=float)
    masses = np.asarray(masses, dtype=float)
    n = sym.shape[0]
    if n > EIGS_MAX_N:
        raise SizeError(f"N = {n} exceeds dense eigensolver limit {EIGS_MAX_N}")
    w = 1.0 / np.sqrt(masses)
    B = w[:, None] * sym * w[None, :]
    lam, Y = jacobi_eigh(B)
    return lam, w[:, None] * Y


def diffusion_spectrum(diff: DiffusionOperator):
    """Full generalized spectrum of a diffusion operator (dense)."""
    Q = dense_diffusion(diff)
    return dense_generalized_eigs(diff.masses[:, None] * Q, diff.masses)
