"""Non-intrusive maps from random inputs ``(xi, theta)`` to POD coefficients.

Three constructions share the :class:`TrainingTable` layout:

* :class:`GridMap` - values on a tensor grid, cubic-spline or multilinear
  interpolation;
* :class:`LegendreMap` - least squares in a total-degree Legendre space;
* :class:`KdTree` + :func:`eval_knn_ls` - nearest neighbours and a local
  first-order fit around the query.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import _binio
from .coeff_models import ParamVector, _as_coeff, _as_force
from .mesh_fem import Mesh
from .pod_basis import PodBasis, project
from .sensing import RankDeficientError, lstsq, qr_pivoted
from .snapshots import SnapshotSet, solve_many

__all__ = [
    "TrainingTable",
    "GridMap",
    "GRID_METHODS",
    "LegendreMap",
    "KdTree",
    "input_bounds",
    "build_training_table",
    "grid_map_from_function",
    "build_grid_map",
    "eval_grid",
    "total_degree_indices",
    "legendre_design",
    "fit_legendre",
    "eval_legendre",
    "kd_build",
    "kd_query",
    "eval_knn_ls",
    "save_map",
    "load_map",
]


def input_bounds(family, force) -> np.ndarray:
    """Stacked ``(low, high)`` rows for ``xi`` then ``theta``."""
    fam, frc = _as_coeff(family), _as_force(force)
    return np.vstack([fam.bounds, frc.bounds]) if frc.num_params else fam.bounds


@dataclass(frozen=True)
class TrainingTable:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def K(self) -> int:
        return self.targets.shape[1]

    def __len__(self):
        return len(self.inputs)


def build_training_table(snapshots: SnapshotSet, basis: PodBasis, mass=None) -> TrainingTable:
    """Pair each snapshot's inputs with its projection onto ``basis``."""
    from .pod_basis import _rows_on_mask
    from .mesh_fem import build_mesh

    mesh = build_mesh(snapshots.n)
    if basis.n != snapshots.n:
        raise ValueError("basis and snapshots live on different meshes")
    U = _rows_on_mask(snapshots, mesh, mesh.mask(*basis.rect))
    coeffs = project(U, basis, mass)
    return TrainingTable(snapshots.inputs.copy(), np.ascontiguousarray(coeffs.T))


# ----------------------------------------------------------------- grid map


@dataclass(frozen=True)
class GridMap:
    """Coefficients tabulated on a tensor grid.

    ``method`` is ``"cubic"`` (tensor product of 1-D not-a-knot cubic
    splines) or ``"linear"`` (multilinear on the containing cell).
    """

    bounds: np.ndarray
    counts: tuple
    values: np.ndarray = field(repr=False)  # shape counts + (K,)
    method: str = "cubic"

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.counts))

    def axes(self):
        return [np.linspace(lo, hi, c) for (lo, hi), c in zip(self.bounds, self.counts)]

    def nodes(self) -> np.ndarray:
        """All tensor nodes in C order, shape (num_nodes, dim)."""
        return np.array(list(itertools.product(*self.axes())))


GRID_METHODS = ("cubic", "linear")


def grid_map_from_function(bounds, counts, fn, method: str = "cubic") -> GridMap:
    """Tabulate ``fn(points) -> (P, K)`` on the tensor grid."""
    if method not in GRID_METHODS:
        raise ValueError(f"unknown grid method {method!r}; choose from {GRID_METHODS}")
    bounds = np.asarray(bounds, dtype=float)
    counts = tuple(int(c) for c in np.broadcast_to(counts, (len(bounds),)))
    if min(counts) < 2:
        raise ValueError("need at least two nodes per dimension")
    proto = GridMap(bounds, counts, np.zeros(0), method)
    vals = np.asarray(fn(proto.nodes()), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return GridMap(bounds, counts, vals.reshape(counts + (vals.shape[1],)), method)


def build_grid_map(family, force, mesh: Mesh, basis: PodBasis, nodes_per_dim,
                   tol: float = 1e-10, workers: int = 1, method: str = "cubic") -> GridMap:
    """Solve the PDE at every tensor node and store the projected coefficients."""
    fam, frc = _as_coeff(family, mesh.n), _as_force(force)
    bounds = input_bounds(fam, frc)
    if len(bounds) > 6:
        raise ValueError(f"tensor grids are limited to 6 inputs, family has {len(bounds)}")

    def solve(points):
        params = [ParamVector(p[:fam.r], p[fam.r:]) for p in points]
        U = solve_many(mesh, fam, frc, params, tol=tol, workers=workers)
        return project(U, basis).T

    return grid_map_from_function(bounds, nodes_per_dim, solve, method)


def _axis_weights(axis: np.ndarray, x: np.ndarray, method: str) -> np.ndarray:
    """Weights ``w[q, i]`` with ``f(x_q) = sum_i w[q, i] f(axis_i)``."""
    c = len(axis)
    if method == "cubic" and c >= 4:
        # cardinal splines: interpolate each unit vector once
        return CubicSpline(axis, np.eye(c), bc_type="not-a-knot")(x)
    s = (x - axis[0]) / (axis[-1] - axis[0]) * (c - 1)
    cell = np.minimum(np.floor(s).astype(int), c - 2)
    t = s - cell
    w = np.zeros((len(x), c))
    rows = np.arange(len(x))
    w[rows, cell] = 1.0 - t
    w[rows, cell + 1] += t
    return w


def eval_grid(gmap: GridMap, q, return_flag: bool = False):
    """Interpolate at ``q``; queries outside the box are clamped and flagged.

    Cubic maps fall back to multilinear weights along axes with fewer than
    four nodes.
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    Q = np.atleast_2d(q)
    if Q.shape[1] != gmap.dim:
        raise ValueError(f"grid map takes {gmap.dim} inputs, got {Q.shape[1]}")
    lo, hi = gmap.bounds[:, 0], gmap.bounds[:, 1]
    clamped = np.any((Q < lo) | (Q > hi), axis=1)
    Q = np.clip(Q, lo, hi)
    axes = gmap.axes()
    w = _axis_weights(axes[0], Q[:, 0], gmap.method)
    out = np.tensordot(w, gmap.values, axes=(1, 0))
    for d in range(1, gmap.dim):
        w = _axis_weights(axes[d], Q[:, d], gmap.method)
        out = np.einsum("qi,qi...->q...", w, out)
    if single:
        out, clamped = out[0], bool(clamped[0])
    return (out, clamped) if return_flag else out


# ------------------------------------------------------------ Legendre map


def total_degree_indices(dim: int, degree: int) -> np.ndarray:
    """Multi-indices with ``|alpha|_1 <= degree``, graded then lexicographic."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            alpha = np.zeros(dim, dtype=int)
            for d in combo:
                alpha[d] += 1
            out.append(alpha)
    return np.array(out, dtype=int).reshape(-1, dim)


def _legendre_1d(x, degree):
    """Orthonormal Legendre values sqrt(2k+1) P_k(x), shape (..., degree+1)."""
    P = np.empty(x.shape + (degree + 1,))
    P[..., 0] = 1.0
    if degree >= 1:
        P[..., 1] = x
    for k in range(1, degree):
        P[..., k + 1] = ((2 * k + 1) * x * P[..., k] - k * P[..., k - 1]) / (k + 1)
    return P * np.sqrt(2 * np.arange(degree + 1) + 1.0)


def legendre_design(z, indices) -> np.ndarray:
    """Design matrix of tensorised Legendre products at points ``z`` in [-1, 1]^d."""
    z = np.atleast_2d(z)
    degree = int(indices.max()) if indices.size else 0
    P = _legendre_1d(z, degree)  # (N, d, degree+1)
    dims = np.arange(z.shape[1])
    return np.prod(P[:, dims[None, :], indices], axis=2)


@dataclass(frozen=True)
class LegendreMap:
    bounds: np.ndarray
    degree: int
    indices: np.ndarray = field(repr=False)
    coeffs: np.ndarray = field(repr=False)

    @property
    def num_basis(self) -> int:
        return len(self.indices)

    def scale(self, q) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return 2.0 * (np.asarray(q, dtype=float) - lo) / (hi - lo) - 1.0


def fit_legendre(table: TrainingTable, p: int = 4, bounds=None) -> LegendreMap:
    """Least-squares fit in the total-degree-``p`` Legendre space."""
    X = np.asarray(table.inputs, dtype=float)
    if bounds is None:
        bounds = np.column_stack([X.min(axis=0), X.max(axis=0)])
    bounds = np.asarray(bounds, dtype=float)
    idx = total_degree_indices(X.shape[1], p)
    if len(X) < 2 * len(idx):
        raise ValueError(f"{len(X)} samples are too few for {len(idx)} basis functions (need >= {2 * len(idx)})")
    proto = LegendreMap(bounds, p, idx, np.zeros(0))
    Phi = legendre_design(proto.scale(X), idx)
    coeffs = lstsq(Phi, np.asarray(table.targets, dtype=float))
    return LegendreMap(bounds, p, idx, coeffs)


def eval_legendre(lmap: LegendreMap, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    out = legendre_design(lmap.scale(np.atleast_2d(q)), lmap.indices) @ lmap.coeffs
    return out[0] if q.ndim == 1 else out


# ----------------------------------------------------- k-d tree and kNN-LS


class KdTree:
    """Median-split k-d tree with leaf buckets over the rows of ``points``."""

    def __init__(self, points, leaf_size: int = 16):
        self.points = np.ascontiguousarray(points, dtype=float)
        if self.points.ndim != 2 or len(self.points) == 0:
            raise ValueError("KdTree needs a non-empty 2-D point array")
        self.leaf_size = max(1, int(leaf_size))
        # node arrays: split dim (-1 for leaves), split value, children, leaf slices
        self._dim, self._val, self._left, self._right, self._leaf = [], [], [], [], []
        self._order = np.arange(len(self.points))
        self._build(0, len(self.points))

    def __len__(self):
        return len(self.points)

    def _new(self):
        for arr, v in ((self._dim, -1), (self._val, 0.0), (self._left, -1), (self._right, -1), (self._leaf, None)):
            arr.append(v)
        return len(self._dim) - 1

    def _build(self, lo, hi):
        node = self._new()
        idx = self._order[lo:hi]
        if hi - lo <= self.leaf_size:
            self._leaf[node] = idx.copy()
            return node
        pts = self.points[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        d = int(np.argmax(spread))
        if spread[d] == 0.0:  # all points identical
            self._leaf[node] = idx.copy()
            return node
        mid = (hi - lo) // 2
        part = np.argpartition(pts[:, d], mid)
        self._order[lo:hi] = idx[part]
        self._dim[node] = d
        self._val[node] = float(self.points[self._order[lo + mid], d])
        self._left[node] = self._build(lo, lo + mid)
        self._right[node] = self._build(lo + mid, hi)
        return node

    def query(self, q, k: int) -> np.ndarray:
        """Indices of the ``k`` nearest points, nearest first (ties by index)."""
        if k > len(self.points):
            raise ValueError(f"asked for {k} neighbours among {len(self.points)} points")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=float)
        heap: list = []  # (-dist2, -index): heap[0] is the current worst

        def worst():
            return -heap[0][0] if len(heap) == k else math.inf

        def visit(node):
            leaf = self._leaf[node]
            if leaf is not None:
                d2 = np.sum((self.points[leaf] - q) ** 2, axis=1)
                for dist, i in zip(d2.tolist(), leaf.tolist()):
                    item = (-dist, -i)
                    if len(heap) < k:
                        heapq.heappush(heap, item)
                    elif item > heap[0]:
                        heapq.heapreplace(heap, item)
                return
            d = self._dim[node]
            diff = q[d] - self._val[node]
            near, far = (self._left[node], self._right[node]) if diff < 0 else (self._right[node], self._left[node])
            visit(near)
            if diff * diff <= worst():
                visit(far)

        visit(0)
        ranked = sorted((-nd, -ni) for nd, ni in heap)
        return np.array([i for _, i in ranked], dtype=int)


def kd_build(table_or_points, leaf_size: int = 16) -> KdTree:
    pts = table_or_points.inputs if isinstance(table_or_points, TrainingTable) else table_or_points
    return KdTree(pts, leaf_size)


def kd_query(tree: KdTree, q, n: int) -> np.ndarray:
    return tree.query(q, n)


def eval_knn_ls(tree: KdTree, table: TrainingTable, q, n: int = 20, return_flag: bool = False):
    """Local first-order least squares over the ``n`` nearest training inputs.

    For every output component the neighbours give ``n`` equations
    ``c_m = c(q) + (x_m - q) . grad c`` in the ``dim + 1`` unknowns; the fitted
    constant term is the prediction.  If the neighbour geometry is degenerate
    an inverse-distance average is returned instead and the flag is set.
    """
    q = np.asarray(q, dtype=float)
    dim = table.dim
    if n < dim + 1:
        raise ValueError(f"need n >= {dim + 1} neighbours for a first-order fit, got {n}")
    nb = tree.query(q, n)
    X = np.hstack([np.ones((n, 1)), table.inputs[nb] - q])
    Y = table.targets[nb]
    qr = qr_pivoted(X)
    if qr.rank == dim + 1:
        from .sensing import ls_solve

        sol = ls_solve(qr, Y)
        out, degenerate = sol[0], False
    else:
        d = np.sqrt(np.sum((table.inputs[nb] - q) ** 2, axis=1))
        if d[0] == 0.0:
            out = Y[d == 0.0].mean(axis=0)
        else:
            w = 1.0 / d
            out = (w[:, None] * Y).sum(axis=0) / w.sum()
        degenerate = True
    return (out, degenerate) if return_flag else out


# ------------------------------------------------------------ persistence

_KINDS = {"grid": 1, "legendre": 2, "knn": 3}


def save_map(obj, path, n_neighbors: int = 20) -> None:
    if isinstance(obj, GridMap):
        arrays = {"bounds": obj.bounds, "counts": np.array(obj.counts, float), "values": obj.values,
                  "method": np.array([GRID_METHODS.index(obj.method)], float)}
        kind = "grid"
    elif isinstance(obj, LegendreMap):
        arrays = {"bounds": obj.bounds, "degree": np.array([obj.degree], float),
                  "indices": obj.indices.astype(float), "coeffs": obj.coeffs}
        kind = "legendre"
    elif isinstance(obj, TrainingTable):
        arrays = {"inputs": obj.inputs, "targets": obj.targets, "n": np.array([n_neighbors], float)}
        kind = "knn"
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")
    _binio.write_arrays(path, b"PMAP", _KINDS[kind], arrays)


def load_map(path):
    """Returns ``(kind, object)``; kNN maps come back as ``(tree, table, n)``."""
    code, a = _binio.read_arrays(path, b"PMAP")
    kind = {v: k for k, v in _KINDS.items()}.get(code)
    if kind == "grid":
        method = GRID_METHODS[int(a["method"][0])]
        return kind, GridMap(a["bounds"], tuple(int(c) for c in a["counts"]), a["values"], method)
    if kind == "legendre":
        return kind, LegendreMap(a["bounds"], int(a["degree"][0]), a["indices"].astype(int), a["coeffs"])
    if kind == "knn":
        table = TrainingTable(a["inputs"], a["targets"])
        return kind, (kd_build(table), table, int(a["n"][0]))
    raise ValueError(f"{path}: unknown map kind {code}")
