"""Geometric data containers and their plain-text file formats.

Four modalities are supported, each carrying a positive mass per element:

* point clouds   -- CSV, header ``x0,...,x{d-1}[,mass]``
* graphs         -- ``#vertices N`` then ``i j w`` lines, masses in a side CSV
* voxel grids    -- ``dims``/``origin``/``spacing`` lines then ``ix iy iz mass``
* Gaussian mixtures -- CSV rows ``weight, mean..., covariance (row-major)...``

Floats are written with 17 significant digits so that every loader
reproduces what the matching writer was given, bit for bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError

FLOAT_FMT = "%.17g"

COV_SYMMETRY_RTOL = 1e-12
COV_PSD_SLACK = 1e-10


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return FLOAT_FMT % float(x)


def _content_lines(path, keep_prefix: str | None = None) -> list[tuple[int, str]]:
    """Return ``(line_number, text)`` pairs, skipping blanks and ``#`` comments."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#") and not (keep_prefix and line.startswith(keep_prefix)):
                continue
            out.append((lineno, line))
    return out


def _parse_floats(items: Sequence[str], path, lineno: int) -> list[float]:
    try:
        return [float(s) for s in items]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None


def _check_masses(masses: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(masses)):
        raise ValueError(f"{what}: masses must be finite")
    if np.any(masses <= 0):
        bad = int(np.flatnonzero(masses <= 0)[0])
        raise ValueError(f"{what}: mass at index {bad} is not positive ({masses[bad]!r})")


@dataclass
class PointCloud:
    positions: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise ValueError("point cloud needs at least one point")
        if self.masses.shape[0] != self.positions.shape[0]:
            raise ValueError("one mass per point is required")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        _check_masses(self.masses, "point cloud")

    @classmethod
    def uniform(cls, positions) -> "PointCloud":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        n = positions.shape[0]
        return cls(positions, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass
class Graph:
    """Undirected weighted graph; each edge is stored once with ``i != j``."""

    n_vertices: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    masses: np.ndarray = None

    def __post_init__(self):
        self.n_vertices = int(self.n_vertices)
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        n = self.n_vertices
        if n < 1:
            raise ValueError("graph needs at least one vertex")
        if self.masses is None:
            self.masses = np.full(n, 1.0 / n)
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if not (self.rows.shape == self.cols.shape == self.weights.shape):
            raise ValueError("edge arrays must have equal length")
        if self.masses.shape[0] != n:
            raise ValueError(f"expected {n} vertex masses, got {self.masses.shape[0]}")
        if self.rows.size:
            if self.rows.min() < 0 or self.cols.min() < 0 or max(self.rows.max(), self.cols.max()) >= n:
                raise FormatError("edge index out of range")
            if np.any(self.rows == self.cols):
                raise FormatError("self-loops are not allowed")
            lo = np.minimum(self.rows, self.cols)
            hi = np.maximum(self.rows, self.cols)
            keys = lo * n + hi
            if np.unique(keys).size != keys.size:
                raise FormatError("duplicate undirected edge")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise ValueError("edge weights must be positive")
        _check_masses(self.masses, "graph")

    @classmethod
    def from_edges(cls, n_vertices: int, edges: Iterable[tuple], masses=None) -> "Graph":
        edges = list(edges)
        rows = [int(e[0]) for e in edges]
        cols = [int(e[1]) for e in edges]
        weights = [float(e[2]) if len(e) > 2 else 1.0 for e in edges]
        return cls(n_vertices, rows, cols, weights, masses)

    @property
    def n(self) -> int:
        return self.n_vertices

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in zip(self.rows, self.cols, self.weights)]

    def degrees(self, weighted: bool = True) -> np.ndarray:
        w = self.weights if weighted else np.ones_like(self.weights)
        deg = np.zeros(self.n_vertices)
        np.add.at(deg, self.rows, w)
        np.add.at(deg, self.cols, w)
        return deg

    def adjacency(self):
        """Symmetric sparse adjacency matrix (CSR)."""
        import scipy.sparse as sp

        n = self.n_vertices
        r = np.concatenate([self.rows, self.cols])
        c = np.concatenate([self.cols, self.rows])
        w = np.concatenate([self.weights, self.weights])
        return sp.csr_matrix((w, (r, c)), shape=(n, n))

    def n_components(self) -> int:
        from scipy.sparse.csgraph import connected_components

        return int(connected_components(self.adjacency(), directed=False)[0])


@dataclass
class VoxelGrid:
    dims: tuple
    origin: np.ndarray
    spacing: float
    indices: np.ndarray
    masses: np.ndarray = field(default=None)

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.spacing = float(self.spacing)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        if self.masses is None:
            self.masses = np.ones(self.indices.shape[0])
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise FormatError("dims must be three positive integers")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise FormatError("spacing must be a positive real")
        if self.indices.shape[0] < 1:
            raise FormatError("voxel grid needs at least one occupied voxel")
        if self.masses.shape[0] != self.indices.shape[0]:
            raise ValueError("one mass per occupied voxel is required")
        if np.any(self.indices < 0) or np.any(self.indices >= np.asarray(self.dims)):
            bad = int(np.flatnonzero(np.any((self.indices < 0) | (self.indices >= np.asarray(self.dims)), axis=1))[0])
            raise FormatError(f"voxel index {tuple(self.indices[bad])} outside dims {self.dims}")
        flat = np.ravel_multi_index(self.indices.T, self.dims)
        if np.unique(flat).size != flat.size:
            raise FormatError("duplicate voxel")
        _check_masses(self.masses, "voxel grid")

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    def centers(self) -> np.ndarray:
        return self.origin + (self.indices + 0.5) * self.spacing

    def with_masses(self, masses) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.origin.copy(), self.spacing, self.indices.copy(), masses)


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        n, d = self.means.shape
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(n, d, d)
        if self.weights.shape[0] != n:
            raise ValueError("one weight per component is required")
        _check_masses(self.weights, "gaussian mixture")
        self.covariances = _validated_covariances(self.covariances)

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def masses(self) -> np.ndarray:
        return self.weights

    def mean_trace(self) -> float:
        """Mass-weighted average of the covariance traces."""
        tr = np.trace(self.covariances, axis1=1, axis2=2)
        return float(np.sum(self.weights * tr) / np.sum(self.weights))


def _validated_covariances(cov: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariances must be finite")
    out = np.empty_like(cov)
    for i, c in enumerate(cov):
        scale = np.max(np.abs(c))
        if np.max(np.abs(c - c.T)) > COV_SYMMETRY_RTOL * scale:
            raise ValueError(f"covariance {i} is not symmetric")
        c = 0.5 * (c + c.T)
        trace = float(np.trace(c))
        lam_min = float(np.linalg.eigvalsh(c)[0]) if c.size else 0.0
        if lam_min < -COV_PSD_SLACK * max(trace, 0.0):
            raise ValueError(f"covariance {i} is not positive semi-definite (min eigenvalue {lam_min:g})")
        out[i] = c
    return out


# ---------------------------------------------------------------------------
# point clouds


def load_point_cloud(path, mass_policy: str = "column") -> PointCloud:
    """Read a point cloud CSV.

    ``mass_policy="column"`` takes masses from a ``mass`` column when the
    header has one; ``"uniform"`` always assigns ``1/N``.
    """
    if mass_policy not in ("column", "uniform"):
        raise ValueError(f"unknown mass policy {mass_policy!r}")
    lines = _content_lines(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in lines[0][1].split(",")]
    has_mass = header[-1] == "mass"
    coords = header[:-1] if has_mass else header
    if not coords or coords != [f"x{k}" for k in range(len(coords))]:
        raise FormatError(f"{path}: expected header x0,...,x{{d-1}}[,mass], got {lines[0][1]!r}")
    width = len(header)
    rows = []
    for lineno, line in lines[1:]:
        items = line.split(",")
        if len(items) != width:
            raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(items)}")
        rows.append(_parse_floats(items, path, lineno))
    if not rows:
        raise FormatError(f"{path}: no points")
    data = np.asarray(rows, dtype=float)
    positions = data[:, : len(coords)]
    if has_mass and mass_policy == "column":
        masses = data[:, -1]
        _check_masses(masses, str(path))
    else:
        masses = np.full(len(rows), 1.0 / len(rows))
    return PointCloud(positions, masses)


def write_point_cloud(path, cloud: PointCloud) -> None:
    names = [f"x{k}" for k in range(cloud.dim)] + ["mass"]
    cols = [cloud.positions[:, k] for k in range(cloud.dim)] + [cloud.masses]
    write_table(path, names, cols)


# ---------------------------------------------------------------------------
# graphs


def load_mass_column(path, n: int | None = None) -> np.ndarray:
    values = []
    for lineno, line in _content_lines(path):
        if not values and line.strip().lower() == "mass":
            continue
        if "," in line:
            raise FormatError(f"{path}:{lineno}: mass file must have one column")
        values.extend(_parse_floats([line], path, lineno))
    masses = np.asarray(values, dtype=float)
    if n is not None and masses.size != n:
        raise FormatError(f"{path}: expected {n} masses, got {masses.size}")
    _check_masses(masses, str(path))
    return masses


def load_graph(path, mass_path=None) -> Graph:
    lines = _content_lines(path, keep_prefix="#vertices")
    if not lines or not lines[0][1].startswith("#vertices"):
        raise FormatError(f"{path}: first line must be '#vertices N'")
    head = lines[0][1].split()
    if len(head) != 2:
        raise FormatError(f"{path}: malformed vertex header {lines[0][1]!r}")
    try:
        n = int(head[1])
    except ValueError:
        raise FormatError(f"{path}: vertex count is not an integer") from None
    if n < 1:
        raise FormatError(f"{path}: vertex count must be positive")
    rows, cols, weights = [], [], []
    seen = set()
    for lineno, line in lines[1:]:
        items = line.split()
        if len(items) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'i j w'")
        try:
            i, j = int(items[0]), int(items[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: vertex indices must be integers") from None
        w = _parse_floats(items[2:], path, lineno)[0]
        if i == j:
            raise FormatError(f"{path}:{lineno}: self-loop on vertex {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise FormatError(f"{path}:{lineno}: vertex index out of range [0, {n})")
        if not w > 0:
            raise ValueError(f"{path}:{lineno}: edge weight must be positive, got {w!r}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise FormatError(f"{path}:{lineno}: duplicate edge {key}")
        seen.add(key)
        rows.append(i)
        cols.append(j)
        weights.append(w)
    masses = load_mass_column(mass_path, n) if mass_path is not None else None
    return Graph(n, rows, cols, weights, masses)


def write_graph(path, graph: Graph, mass_path=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#vertices {graph.n_vertices}\n")
        for i, j, w in zip(graph.rows, graph.cols, graph.weights):
            fh.write(f"{int(i)} {int(j)} {_fmt(w)}\n")
    if mass_path is not None:
        write_table(mass_path, ["mass"], [graph.masses])


# ---------------------------------------------------------------------------
# voxel grids


def load_voxel_grid(path) -> VoxelGrid:
    lines = _content_lines(path)
    if len(lines) < 3:
        raise FormatError(f"{path}: missing dims/origin/spacing header")
    expected = (("dims", 3), ("origin", 3), ("spacing", 1))
    header = []
    for (lineno, line), (key, count) in zip(lines[:3], expected):
        items = line.split()
        if items[0] != key or len(items) != count + 1:
            raise FormatError(f"{path}:{lineno}: expected '{key}' followed by {count} value(s)")
        header.append(items[1:])
    try:
        dims = tuple(int(v) for v in header[0])
    except ValueError:
        raise FormatError(f"{path}: dims must be integers") from None
    origin = _parse_floats(header[1], path, lines[1][0])
    spacing = _parse_floats(header[2], path, lines[2][0])[0]
    indices, masses = [], []
    for lineno, line in lines[3:]:
        items = line.split()
        if len(items) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'ix iy iz mass'")
        try:
            idx = [int(v) for v in items[:3]]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: voxel indices must be integers") from None
        if any(not (0 <= v < dv) for v, dv in zip(idx, dims)):
            raise FormatError(f"{path}:{lineno}: voxel index {tuple(idx)} outside dims {dims}")
        indices.append(idx)
        masses.append(_parse_floats(items[3:], path, lineno)[0])
    if not indices:
        raise FormatError(f"{path}: no occupied voxels")
    return VoxelGrid(dims, origin, spacing, np.asarray(indices), np.asarray(masses))


def write_voxel_grid(path, grid: VoxelGrid) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("dims %d %d %d\n" % grid.dims)
        fh.write("origin " + " ".join(_fmt(v) for v in grid.origin) + "\n")
        fh.write(f"spacing {_fmt(grid.spacing)}\n")
        for (ix, iy, iz), m in zip(grid.indices, grid.masses):
            fh.write(f"{ix} {iy} {iz} {_fmt(m)}\n")


# ---------------------------------------------------------------------------
# Gaussian mixtures


def _gmm_dim(width: int) -> int:
    # width = 1 + d + d*d
    d = int(round((-1 + math.sqrt(1 + 4 * (width - 1))) / 2))
    if d < 1 or 1 + d + d * d != width:
        raise FormatError(f"row width {width} is not 1 + d + d^2 for any d")
    return d


def load_gmm(path) -> GaussianMixture:
    rows = []
    width = None
    for lineno, line in _content_lines(path):
        items = [s.strip() for s in line.split(",")]
        if not rows and items[0] == "weight":
            continue
        if width is None:
            width = len(items)
            _gmm_dim(width)
        elif len(items) != width:
            raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(items)}")
        rows.append(_parse_floats(items, path, lineno))
    if not rows:
        raise FormatError(f"{path}: no mixture components")
    data = np.asarray(rows, dtype=float)
    d = _gmm_dim(width)
    return GaussianMixture(data[:, 0], data[:, 1 : 1 + d], data[:, 1 + d :].reshape(-1, d, d))


def write_gmm(path, gmm: GaussianMixture) -> None:
    d = gmm.dim
    names = ["weight"] + [f"m{k}" for k in range(d)] + [f"c{a}{b}" for a in range(d) for b in range(d)]
    flat_cov = gmm.covariances.reshape(gmm.n, d * d)
    cols = [gmm.weights] + [gmm.means[:, k] for k in range(d)] + [flat_cov[:, k] for k in range(d * d)]
    write_table(path, names, cols)


# ---------------------------------------------------------------------------
# tables and signals


def write_table(path, column_names: Sequence[str], columns: Sequence) -> None:
    """Write equal-length columns as CSV with a header row."""
    column_names = list(column_names)
    columns = [np.asarray(c).reshape(-1) for c in columns]
    if not columns or not column_names:
        raise FormatError("a table needs at least one column")
    if len(column_names) != len(columns):
        raise FormatError("one name per column is required")
    length = columns[0].shape[0]
    if any(c.shape[0] != length for c in columns):
        raise FormatError("columns must have equal length")
    fmts = [
        (lambda v: str(int(v))) if np.issubdtype(c.dtype, np.integer) else (lambda v: FLOAT_FMT % v)
        for c in columns
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(column_names) + "\n")
        for r in range(length):
            fh.write(",".join(f(c[r]) for f, c in zip(fmts, columns)) + "\n")


def read_table(path) -> tuple[list[str], np.ndarray]:
    lines = _content_lines(path)
    if not lines:
        raise FormatError(f"{path}: empty table")
    names = [s.strip() for s in lines[0][1].split(",")]
    rows = []
    for lineno, line in lines[1:]:
        items = line.split(",")
        if len(items) != len(names):
            raise FormatError(f"{path}:{lineno}: expected {len(names)} fields, got {len(items)}")
        rows.append(_parse_floats(items, path, lineno))
    return names, np.asarray(rows, dtype=float).reshape(len(rows), len(names))


def write_signal(path, values) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = ["index"] + [f"f{p}" for p in range(values.shape[1])]
    write_table(path, names, [np.arange(values.shape[0])] + [values[:, p] for p in range(values.shape[1])])


def load_signal(path) -> np.ndarray:
    """Read a signal table; an ``index`` column, if first, is dropped."""
    names, data = read_table(path)
    if names and names[0] == "index":
        data = data[:, 1:]
    if data.shape[1] == 0:
        raise FormatError(f"{path}: signal table has no value columns")
    return data


def load_any(path, kind: str | None = None, mass_path=None):
    """Dispatch on ``kind`` or on the file extension (.csv/.graph/.vox/.gmm)."""
    if kind is None:
        ext = os.path.splitext(str(path))[1].lower()
        kind = {".graph": "graph", ".vox": "voxels", ".gmm": "gmm"}.get(ext, "points")
    if kind == "points":
        return load_point_cloud(path)
    if kind == "graph":
        return load_graph(path, mass_path)
    if kind == "voxels":
        return load_voxel_grid(path)
    if kind == "gmm":
        return load_gmm(path)
    raise ValueError(f"unknown modality {kind!r}")
