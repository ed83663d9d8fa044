"""Matrix-free smoothing operators ``S = K M``.

Every operator exposes the same contract: a symmetric kernel ``K`` that is
only ever touched through products ``K g``, and a positive diagonal mass
vector ``M``.  :func:`smatvec` returns ``S f = K (M f)`` and
:func:`smatvec_log` evaluates the same product in the log domain with a
max-shifted (logsumexp) reduction.

Pairwise kernels (Gaussian, exponential, Gaussian mixture) are evaluated in
row blocks.  Small problems (``N**2 <= DENSE_CACHE_ENTRIES``) keep the
evaluated blocks around so that the dozens of products issued by Sinkhorn
and Lanczos loops do not recompute ``N**2`` exponentials each time.
"""

from __future__ import annotations

import math
import threading
import warnings

import numpy as np
import scipy.ndimage as ndi

from ._parallel import run_blocks
from .errors import CapabilityError, ShapeError
from .geometry_io import GaussianMixture, Graph, PointCloud, VoxelGrid

DENSE_CACHE_ENTRIES = 2**25
TRUNCATION_RADIUS = 4.0  # voxel taps cover |k h| <= 4 sigma
_BLOCK_ENTRIES = 2**21


def _as_2d(f, n: int, what: str = "signal"):
    arr = np.asarray(f, dtype=float)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ShapeError(f"{what} has shape {np.shape(f)}, expected ({n},) or ({n}, P)")
    return arr, squeeze


def logsumexp_rows(values: np.ndarray, axis: int = 1) -> np.ndarray:
    """Max-shifted log-sum-exp; an all ``-inf`` slice reduces to ``-inf``."""
    mx = np.max(values, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


class SmoothingOperator:
    """Base class: kernel ``K`` plus the diagonal mass vector ``M``."""

    modality = "abstract"
    supports_log_domain = False

    def __init__(self, masses, sigma: float | None = None, epsilon: float = 0.0):
        self.masses = np.asarray(masses, dtype=float).reshape(-1)
        if self.masses.size < 1:
            raise ValueError("operator needs at least one element")
        if np.any(~np.isfinite(self.masses)) or np.any(self.masses <= 0):
            raise ValueError("masses must be finite and positive")
        if sigma is not None and not (sigma > 0 and math.isfinite(sigma)):
            raise ValueError(f"sigma must be positive, got {sigma!r}")
        if not epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {epsilon!r}")
        self.sigma = None if sigma is None else float(sigma)
        self.epsilon = float(epsilon)

    @property
    def n(self) -> int:
        return self.masses.shape[0]

    def kernel_apply(self, g: np.ndarray) -> np.ndarray:
        """Return ``K g`` for a ``(N, P)`` array."""
        raise NotImplementedError

    def log_kernel_apply(self, log_g: np.ndarray) -> np.ndarray:
        """Return ``log(K exp(log_g))`` for a ``(N, P)`` array."""
        raise CapabilityError(f"{self.modality} operator has no log-domain matvec")

    def with_masses(self, masses) -> "SmoothingOperator":
        raise NotImplementedError

    def __repr__(self):
        extra = f", sigma={self.sigma:g}" if self.sigma is not None else ""
        return f"<{type(self).__name__} N={self.n}{extra}>"


class PairwiseOperator(SmoothingOperator):
    """Kernel given entrywise by ``log K_ij``; subclasses supply row blocks."""

    supports_log_domain = True

    def __init__(self, masses, sigma=None, epsilon=0.0, materialize: bool | None = None):
        super().__init__(masses, sigma, epsilon)
        if materialize is None:
            materialize = self.n * self.n <= DENSE_CACHE_ENTRIES
        self.materialize = bool(materialize)
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def log_kernel_rows(self, start: int, stop: int) -> np.ndarray:
        raise NotImplementedError

    def _block_rows(self, channels: int = 1) -> int:
        return max(1, min(self.n, _BLOCK_ENTRIES // max(1, self.n * channels)))

    def _blocks(self, channels: int = 1):
        step = self._block_rows(channels)
        return [(s, min(s + step, self.n)) for s in range(0, self.n, step)]

    def _dense(self, kind: str) -> np.ndarray:
        with self._lock:
            if kind not in self._cache:
                out = np.empty((self.n, self.n))

                def fill(start, stop):
                    block = self.log_kernel_rows(start, stop)
                    out[start:stop] = np.exp(block) if kind == "lin" else block

                run_blocks(fill, self._blocks())
                self._cache[kind] = out
            return self._cache[kind]

    def kernel_apply(self, g):
        if self.materialize:
            return self._dense("lin") @ g
        out = np.empty((self.n, g.shape[1]))

        def work(start, stop):
            out[start:stop] = np.exp(self.log_kernel_rows(start, stop)) @ g

        run_blocks(work, self._blocks())
        return out

    def log_kernel_apply(self, log_g):
        out = np.empty((self.n, log_g.shape[1]))
        dense = self._dense("log") if self.materialize else None

        def work(start, stop):
            block = dense[start:stop] if dense is not None else self.log_kernel_rows(start, stop)
            out[start:stop] = logsumexp_rows(block[:, :, None] + log_g[None, :, :], axis=1)

        run_blocks(work, self._blocks(log_g.shape[1]))
        return out


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences: exact symmetry and no cancellation error
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


class GaussianOperator(PairwiseOperator):
    """``K_ij = exp(-|x_i - x_j|^2 / 2 sigma^2)``."""

    modality = "gaussian"

    def __init__(self, positions, masses, sigma, materialize=None):
        super().__init__(masses, sigma, materialize=materialize)
        self.positions = np.atleast_2d(np.asarray(positions, dtype=float))
        if self.positions.shape[0] != self.n:
            raise ValueError("one position per mass is required")

    def log_kernel_rows(self, start, stop):
        return _sq_dists(self.positions[start:stop], self.positions) / (-2.0 * self.sigma**2)

    def with_masses(self, masses):
        return type(self)(self.positions, masses, self.sigma, self.materialize)


class ExponentialOperator(GaussianOperator):
    """``K_ij = exp(-|x_i - x_j| / sigma)``."""

    modality = "exponential"

    def log_kernel_rows(self, start, stop):
        return np.sqrt(_sq_dists(self.positions[start:stop], self.positions)) / (-self.sigma)


class GMMOperator(PairwiseOperator):
    """Mixture kernel ``exp(-1/2 d^T (sigma^2 I + Sigma_i + Sigma_j)^{-1} d)``.

    ``d = x_i - x_j``.  The covariance sum is formed as ``Sigma_i + Sigma_j``
    before adding ``sigma^2 I`` so that ``(i, j)`` and ``(j, i)`` see
    bit-identical matrices.

    With unequal covariances this kernel is not positive semi-definite in
    general.  ``overlap_weight=True`` multiplies each entry by
    ``sqrt(det(sigma^2 I) / det(sigma^2 I + Sigma_i + Sigma_j))``, which turns
    it into a scaled Gram matrix of Gaussian densities (hence PSD) and
    still reduces to the point kernel when all covariances vanish.
    """

    modality = "gmm"

    def __init__(self, means, covariances, masses, sigma, materialize=None, overlap_weight: bool = False):
        super().__init__(masses, sigma, materialize=materialize)
        self.overlap_weight = bool(overlap_weight)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        n, d = self.means.shape
        self.covariances = np.asarray(covariances, dtype=float).reshape(n, d, d)
        if n != self.n:
            raise ValueError("one mean per mass is required")

    def log_kernel_rows(self, start, stop):
        d = self.means.shape[1]
        cov = self.covariances[start:stop, None] + self.covariances[None, :]
        cov = cov + (self.sigma**2) * np.eye(d)
        diff = self.means[start:stop, None, :] - self.means[None, :, :]
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("sigma^2 I + Sigma_i + Sigma_j is singular for some pair") from None
        y = np.linalg.solve(chol, diff[..., None])[..., 0]
        out = -0.5 * np.einsum("ijk,ijk->ij", y, y)
        if self.overlap_weight:
            log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
            out += 0.5 * (d * math.log(self.sigma**2) - log_det)
        return out

    def _block_rows(self, channels=1):
        d = self.means.shape[1]
        return max(1, min(self.n, (_BLOCK_ENTRIES // 4) // max(1, self.n * d * d * channels)))

    def with_masses(self, masses):
        return type(self)(self.means, self.covariances, masses, self.sigma, self.materialize, self.overlap_weight)


class DenseOperator(PairwiseOperator):
    """Explicit symmetric ``N x N`` kernel, for tests and tiny inputs."""

    modality = "dense"

    def __init__(self, kernel, masses=None):
        kernel = np.asarray(kernel, dtype=float)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
            raise ShapeError("dense kernel must be square")
        if masses is None:
            masses = np.ones(kernel.shape[0])
        super().__init__(masses, materialize=True)
        if kernel.shape[0] != self.n:
            raise ShapeError("kernel and masses disagree in size")
        if np.any(kernel < 0):
            raise ValueError("kernel entries must be non-negative")
        self.kernel = kernel
        self._cache["lin"] = kernel

    def log_kernel_rows(self, start, stop):
        with np.errstate(divide="ignore"):
            return np.log(self.kernel[start:stop])

    def with_masses(self, masses):
        return DenseOperator(self.kernel, masses)


class GraphOperator(SmoothingOperator):
    """``K = 1/2 (D_eps + A_eps)`` with ``A_eps = A + eps 11^T``.

    The regulariser includes the diagonal of ``eps 11^T`` and the degrees are
    taken from ``A_eps``, which keeps ``D_eps + A_eps`` weakly diagonally
    dominant for every ``eps``.
    """

    modality = "graph"

    def __init__(self, graph: Graph, epsilon: float = 0.0, masses=None):
        super().__init__(graph.masses if masses is None else masses, None, epsilon)
        self.graph = graph
        self.adjacency = graph.adjacency()
        self.degrees = np.asarray(self.adjacency.sum(axis=1)).reshape(-1) + self.epsilon * self.n

    def kernel_apply(self, g):
        out = self.degrees[:, None] * g + self.adjacency @ g
        if self.epsilon:
            out += self.epsilon * g.sum(axis=0, keepdims=True)
        return 0.5 * out

    def with_masses(self, masses):
        return GraphOperator(self.graph, self.epsilon, masses)


def voxel_tap_radius(sigma: float, spacing: float) -> int:
    """Number of taps on each side: largest ``k`` with ``k h <= 4 sigma``."""
    return int(math.floor(TRUNCATION_RADIUS * sigma / spacing * (1 + 1e-12)))


def voxel_taps(sigma: float, spacing: float) -> np.ndarray:
    r = voxel_tap_radius(sigma, spacing)
    k = np.arange(-r, r + 1) * spacing
    return np.exp(-(k**2) / (2.0 * sigma**2))


class VoxelOperator(SmoothingOperator):
    """Truncated Gaussian on occupied voxels via three 1-D passes.

    Occupied values are scattered into the dense bounding box of the
    occupancy (zeros elsewhere), convolved separably and gathered back.

    For ``sigma`` beyond roughly two voxels the truncated kernel is no longer
    positive semi-definite: the 4-sigma tail cut exceeds the vanishing
    Fourier symbol of the sampled Gaussian at the Nyquist frequency.
    """

    modality = "voxels"

    def __init__(self, grid: VoxelGrid, sigma: float, masses=None):
        super().__init__(grid.masses if masses is None else masses, sigma)
        self.grid = grid
        self.taps = voxel_taps(self.sigma, grid.spacing)
        lo = grid.indices.min(axis=0)
        self._local = grid.indices - lo
        self._box = tuple(int(v) for v in grid.indices.max(axis=0) - lo + 1)

    def kernel_apply(self, g):
        p = g.shape[1]
        vol = np.zeros(self._box + (p,))
        ix, iy, iz = self._local.T
        vol[ix, iy, iz] = g
        for axis in range(3):
            if self._box[axis] > 1 and self.taps.size > 1:
                vol = ndi.correlate1d(vol, self.taps, axis=axis, mode="constant", cval=0.0)
        return vol[ix, iy, iz]

    def with_masses(self, masses):
        return VoxelOperator(self.grid, self.sigma, masses)


# ---------------------------------------------------------------------------
# builders


def build_gaussian_operator(cloud: PointCloud, sigma: float, materialize=None) -> GaussianOperator:
    return GaussianOperator(cloud.positions, cloud.masses, sigma, materialize)


def build_exponential_operator(cloud: PointCloud, sigma: float, materialize=None) -> ExponentialOperator:
    return ExponentialOperator(cloud.positions, cloud.masses, sigma, materialize)


def build_graph_operator(graph: Graph, epsilon: float = 0.0) -> GraphOperator:
    if epsilon == 0 and graph.n > 1 and graph.n_components() > 1:
        warnings.warn(
            "graph is disconnected and epsilon = 0: Sinkhorn scaling is not unique",
            RuntimeWarning,
            stacklevel=2,
        )
    return GraphOperator(graph, epsilon)


def build_gmm_operator(gmm: GaussianMixture, sigma: float, materialize=None, overlap_weight: bool = False) -> GMMOperator:
    return GMMOperator(gmm.means, gmm.covariances, gmm.weights, sigma, materialize, overlap_weight)


def build_voxel_operator(grid: VoxelGrid, sigma: float) -> VoxelOperator:
    return VoxelOperator(grid, sigma)


def build_dense_operator(kernel, masses=None) -> DenseOperator:
    return DenseOperator(kernel, masses)


def build_operator(data, sigma: float | None = None, epsilon: float = 0.0, kernel: str = "gaussian"):
    """Pick the builder matching the type of ``data``."""
    if isinstance(data, Graph):
        return build_graph_operator(data, epsilon)
    if sigma is None:
        raise ValueError("sigma is required for this modality")
    if isinstance(data, VoxelGrid):
        return build_voxel_operator(data, sigma)
    if isinstance(data, GaussianMixture):
        return build_gmm_operator(data, sigma)
    if isinstance(data, PointCloud):
        if kernel == "exponential":
            return build_exponential_operator(data, sigma)
        if kernel != "gaussian":
            raise ValueError(f"unknown point kernel {kernel!r}")
        return build_gaussian_operator(data, sigma)
    raise TypeError(f"cannot build an operator from {type(data).__name__}")


def estimate_voxel_masses(grid: VoxelGrid, sigma_voxels: float = 3.0) -> VoxelGrid:
    """Kernel density masses ``m(x) = 1 / sum_y k(x, y)`` over occupied voxels."""
    op = VoxelOperator(grid, sigma_voxels * grid.spacing, masses=np.ones(grid.n))
    density = op.kernel_apply(np.ones((grid.n, 1)))[:, 0]
    return grid.with_masses(1.0 / density)


# ---------------------------------------------------------------------------
# products


def smatvec(op: SmoothingOperator, f) -> np.ndarray:
    """``S f = K M f``, channel by channel."""
    arr, squeeze = _as_2d(f, op.n)
    out = op.kernel_apply(op.masses[:, None] * arr)
    return out[:, 0] if squeeze else out


def smatvec_log(op: SmoothingOperator, log_f) -> np.ndarray:
    """``log(S exp(log_f))`` without leaving the log domain."""
    if not op.supports_log_domain:
        raise CapabilityError(f"{op.modality} operator has no log-domain matvec")
    arr, squeeze = _as_2d(log_f, op.n)
    out = op.log_kernel_apply(np.log(op.masses)[:, None] + arr)
    return out[:, 0] if squeeze else out
