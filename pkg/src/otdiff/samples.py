"""Seeded synthetic inputs: spheres, circles, graphs, masks and flow setups."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry_io import GaussianMixture, Graph, PointCloud, VoxelGrid


def sphere_surface(n: int, radius: float = 0.5, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    x *= radius / np.linalg.norm(x, axis=1, keepdims=True)
    return PointCloud.uniform(x)


def circle(n: int, radius: float = 1.0) -> PointCloud:
    angles = 2 * np.pi * np.arange(n) / n
    return PointCloud.uniform(radius * np.stack([np.cos(angles), np.sin(angles)], axis=1))


def unit_square(n: int, seed: int = 0) -> PointCloud:
    return PointCloud.uniform(np.random.default_rng(seed).random((n, 2)))


def random_geometric_graph(n: int, radius: float = 0.15, seed: int = 0) -> Graph:
    """Uniform points in the unit square joined when closer than ``radius``."""
    x = np.random.default_rng(seed).random((n, 2))
    pairs = cKDTree(x).query_pairs(radius, output_type="ndarray")
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    return Graph(n, pairs[:, 0], pairs[:, 1], np.ones(len(pairs)))


def erdos_renyi_graph(n: int, p: float = 0.2, seed: int = 0, weighted: bool = False) -> Graph:
    rng = np.random.default_rng(seed)
    i, j = np.triu_indices(n, k=1)
    keep = rng.random(i.size) < p
    w = rng.uniform(0.5, 2.0, keep.sum()) if weighted else np.ones(keep.sum())
    return Graph(n, i[keep], j[keep], w)


def star_graph(leaves: int = 3) -> Graph:
    return Graph.from_edges(leaves + 1, [(0, k, 1.0) for k in range(1, leaves + 1)])


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(k, k + 1, 1.0) for k in range(n - 1)])


def random_voxel_grid(shape=(8, 8, 8), count: int | None = None, fill: float = 0.5, spacing: float = 1.0, seed: int = 0) -> VoxelGrid:
    """Randomly masked grid with ``count`` occupied voxels (or a ``fill`` fraction)."""
    rng = np.random.default_rng(seed)
    total = int(np.prod(shape))
    count = max(1, int(round(fill * total))) if count is None else count
    flat = np.sort(rng.choice(total, size=count, replace=False))
    idx = np.stack(np.unravel_index(flat, shape), axis=1)
    return VoxelGrid(shape, np.zeros(3), spacing, idx, rng.uniform(0.5, 1.5, count))


def full_voxel_grid(shape=(4, 4, 4), spacing: float = 1.0) -> VoxelGrid:
    idx = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)
    return VoxelGrid(shape, np.zeros(3), spacing, idx)


def random_gmm(n: int, dim: int = 3, scale: float = 0.05, seed: int = 0, shared: bool = False) -> GaussianMixture:
    """Components in the unit cube with random covariances of size ``scale**2``.

    ``shared=True`` draws one covariance for all components.
    """
    rng = np.random.default_rng(seed)
    means = rng.random((n, dim))
    a = rng.standard_normal((1 if shared else n, dim, dim)) * scale / np.sqrt(dim)
    a = np.broadcast_to(a, (n, dim, dim))
    cov = a @ np.swapaxes(a, 1, 2)
    return GaussianMixture(rng.uniform(0.5, 1.5, n), means, cov)


def rectangle(n: int, lo=(0.1, 0.1), hi=(0.3, 0.4), seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return PointCloud.uniform(lo + (hi - lo) * rng.random((n, 2)))


def annulus(n: int, center=(0.6, 0.6), r_in: float = 0.15, r_out: float = 0.3, seed: int = 0) -> PointCloud:
    """Uniform samples of a planar ring."""
    rng = np.random.default_rng(seed)
    r = np.sqrt(rng.uniform(r_in**2, r_out**2, n))
    a = rng.uniform(0, 2 * np.pi, n)
    return PointCloud.uniform(np.asarray(center) + np.stack([r * np.cos(a), r * np.sin(a)], axis=1))
