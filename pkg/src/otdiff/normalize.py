"""Symmetric Sinkhorn scaling of smoothing operators, and baselines.

Given ``S = K M``, :func:`sinkhorn_normalize` finds the positive diagonal
``Lambda = diag(exp(l))`` such that ``Q = Lambda S Lambda`` preserves
constants.  Because ``M Q`` stays symmetric, ``Q`` then also conserves mass
``<1, f>_M``.  The scaling is stored as log-scales in both evaluation modes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericalError, ShapeError, SizeError
from .geometry_io import Graph, read_table, write_table
from .operators import SmoothingOperator, _as_2d, smatvec, smatvec_log


@dataclass
class ScalingVector:
    log_scales: np.ndarray
    converged: bool = False
    final_error: float = float("nan")
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def n(self) -> int:
        return self.log_scales.shape[0]


def _weighted_error(masses, q_one) -> float:
    return float(np.sum(masses * np.abs(q_one - 1.0)) / np.sum(masses))


def sinkhorn_normalize(
    op: SmoothingOperator,
    tol: float = 1e-6,
    max_iter: int = 200,
    mode: str = "linear",
    init=None,
) -> ScalingVector:
    """Symmetric Sinkhorn iteration ``l <- (l - log(S exp(l))) / 2``.

    Parameters
    ----------
    op : SmoothingOperator
        Operator with strictly positive kernel (for graphs: ``epsilon > 0``
        or a connected graph).
    tol : float
        Stop once the mass-weighted mean of ``|Q 1 - 1|`` is below ``tol``.
    max_iter : int
        Maximum number of scaling updates.
    mode : {"linear", "log"}
        ``"log"`` evaluates ``log(S exp(l))`` with :func:`smatvec_log` and
        never leaves the log domain.
    init : array_like, optional
        Initial log-scales (default zeros, i.e. ``Lambda = I``).

    Returns
    -------
    ScalingVector
        ``history[i]`` is the error after ``i`` updates; ``converged`` is
        False when ``max_iter`` was exhausted.
    """
    if mode not in ("linear", "log"):
        raise ValueError(f"unknown mode {mode!r}")
    n = op.n
    ell = np.zeros(n) if init is None else np.array(init, dtype=float).reshape(n)
    history = []
    converged = False
    updates = 0
    while True:
        if mode == "log":
            log_d = smatvec_log(op, ell)
        else:
            with np.errstate(divide="ignore"):
                log_d = np.log(smatvec(op, np.exp(ell)))
        if not np.all(np.isfinite(log_d)):
            raise NumericalError(
                f"non-finite S Lambda 1 after {updates} updates; "
                "the kernel may underflow (try mode='log') or have empty rows"
            )
        err = _weighted_error(op.masses, np.exp(ell + log_d))
        if not np.isfinite(err):
            raise NumericalError(f"NaN convergence error after {updates} updates")
        history.append(err)
        if err <= tol:
            converged = True
            break
        if updates >= max_iter:
            break
        ell = 0.5 * (ell - log_d)
        updates += 1
    return ScalingVector(ell, converged, history[-1], updates, history)


def convergence_error(op: SmoothingOperator, scaling: ScalingVector) -> float:
    """Mass-weighted mean deviation ``sum_i m_i |(Q 1)_i - 1| / sum_i m_i``."""
    if scaling.n != op.n:
        raise ShapeError(f"scaling has {scaling.n} entries, operator has {op.n}")
    lam = scaling.scales
    return _weighted_error(op.masses, lam * smatvec(op, lam))


@dataclass(frozen=True)
class DiffusionOperator:
    """``Q = Lambda S Lambda``."""

    op: SmoothingOperator
    scaling: ScalingVector

    def __post_init__(self):
        if self.scaling.n != self.op.n:
            raise ShapeError(f"scaling has {self.scaling.n} entries, operator has {self.op.n}")

    @property
    def n(self) -> int:
        return self.op.n

    @property
    def masses(self) -> np.ndarray:
        return self.op.masses

    def matvec(self, f) -> np.ndarray:
        arr, squeeze = _as_2d(f, self.n)
        lam = self.scaling.scales[:, None]
        out = lam * smatvec(self.op, lam * arr)
        return out[:, 0] if squeeze else out


def normalized(op: SmoothingOperator, **kwargs) -> DiffusionOperator:
    """Run Sinkhorn and wrap the result; raises if it did not converge."""
    scaling = sinkhorn_normalize(op, **kwargs)
    if not scaling.converged:
        raise NumericalError(
            f"Sinkhorn did not converge in {scaling.iterations} iterations "
            f"(error {scaling.final_error:.3e})"
        )
    return DiffusionOperator(op, scaling)


def diffuse(diff: DiffusionOperator, f, steps: int = 1) -> np.ndarray:
    """Apply ``Q`` ``steps`` times."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    arr, squeeze = _as_2d(f, diff.n)
    out = arr.copy()
    for _ in range(steps):
        out = diff.matvec(out)
    return out[:, 0] if squeeze else out


def dirac(masses, i: int, unit_mass: bool = True) -> np.ndarray:
    """Indicator of element ``i``; with ``unit_mass`` it is scaled to ``<1, f>_M = 1``."""
    masses = np.asarray(masses, dtype=float)
    f = np.zeros(masses.shape[0])
    f[i] = 1.0 / masses[i] if unit_mass else 1.0
    return f


def mass(masses, f) -> np.ndarray:
    """``<1, f>_M`` per channel."""
    return np.tensordot(np.asarray(masses, dtype=float), np.asarray(f, dtype=float), axes=(0, 0))


# ---------------------------------------------------------------------------
# baselines


def _degrees(op: SmoothingOperator) -> np.ndarray:
    deg = smatvec(op, np.ones(op.n))
    if np.any(deg <= 0):
        raise NumericalError("operator has a zero row sum")
    return deg


def row_normalize_apply(op: SmoothingOperator, f) -> np.ndarray:
    """``D^{-1} S f`` with ``D = diag(S 1)``: averages, but is not symmetric."""
    arr, squeeze = _as_2d(f, op.n)
    out = smatvec(op, arr) / _degrees(op)[:, None]
    return out[:, 0] if squeeze else out


def symmetric_normalize_apply(op: SmoothingOperator, f) -> np.ndarray:
    """``D^{-1/2} S D^{-1/2} f``: symmetric, but constants drift."""
    arr, squeeze = _as_2d(f, op.n)
    inv_sqrt = 1.0 / np.sqrt(_degrees(op))[:, None]
    out = inv_sqrt * smatvec(op, inv_sqrt * arr)
    return out[:, 0] if squeeze else out


SPECTRAL_MAX_N = 2048


def graph_laplacian(graph: Graph) -> np.ndarray:
    """Dense ``D - A`` with weighted degrees."""
    lap = -graph.adjacency().toarray()
    lap[np.diag_indices(graph.n)] += graph.degrees()
    return lap


def spectral_truncation_apply(graph: Graph, t: float, rank: int, f) -> np.ndarray:
    """Low-rank heat kernel ``sum_{i<=rank} exp(-t lam_i) phi_i phi_i^T M f``.

    Eigenpairs solve ``(D - A) phi = lam M phi`` with ``phi^T M phi = 1``,
    so the constant mode is kept for every ``rank >= 1`` and the mass is
    conserved; truncation can still produce negative values.
    """
    n = graph.n
    if n > SPECTRAL_MAX_N:
        raise SizeError(f"spectral truncation is dense; N = {n} > {SPECTRAL_MAX_N}")
    if not 1 <= rank <= n:
        raise ValueError(f"rank must be in [1, {n}]")
    arr, squeeze = _as_2d(f, n)
    m = graph.masses
    w = 1.0 / np.sqrt(m)
    sym = w[:, None] * graph_laplacian(graph) * w[None, :]
    lam, vecs = np.linalg.eigh(sym)
    phi = w[:, None] * vecs[:, :rank]
    coeff = phi.T @ (m[:, None] * arr)
    out = phi @ (np.exp(-t * lam[:rank])[:, None] * coeff)
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# persistence


def sidecar_path(path) -> str:
    root, _ = os.path.splitext(str(path))
    return root + ".json"


def save_scaling(path, scaling: ScalingVector, tol: float, sigma=None, modality: str = "", **extra) -> None:
    write_table(path, ["index", "log_scale"], [np.arange(scaling.n), scaling.log_scales])
    meta = {
        "tol": tol,
        "iterations": scaling.iterations,
        "final_error": scaling.final_error,
        "converged": scaling.converged,
        "sigma": sigma,
        "modality": modality,
    }
    meta.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scaling(path) -> tuple[ScalingVector, dict]:
    names, data = read_table(path)
    if names != ["index", "log_scale"]:
        raise FormatError(f"{path}: expected columns index,log_scale")
    meta = {}
    if os.path.exists(sidecar_path(path)):
        with open(sidecar_path(path), encoding="utf-8") as fh:
            meta = json.load(fh)
    scaling = ScalingVector(
        data[:, 1].copy(),
        converged=bool(meta.get("converged", True)),
        final_error=float(meta.get("final_error", float("nan"))),
        iterations=int(meta.get("iterations", 0)),
    )
    return scaling, meta
