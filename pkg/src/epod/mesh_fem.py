"""P1 finite elements on a uniform triangulation of the unit square.

Nodes are numbered row-major (y outer, x inner).  Every grid square is cut
along its anti-diagonal into two right triangles whose right-angle vertex is
listed first, so all triangles share the same local stiffness block.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mesh",
    "SubdomainMask",
    "ContrastViolation",
    "SolverError",
    "build_mesh",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_load",
    "eliminate_dirichlet",
    "pcg",
    "solve_dirichlet",
    "solve_fem",
    "norm_l2",
    "seminorm_h1",
    "save_field",
    "load_field",
    "errors_against_exact",
    "relative_errors",
]


class ContrastViolation(ValueError):
    """A coefficient evaluated to a non-positive value."""


class SolverError(RuntimeError):
    """PCG failed to reach the requested residual."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SubdomainMask:
    """Closed axis-aligned rectangle resolved against a mesh.

    ``nodes`` are global node ids inside the rectangle, ``triangles`` are the
    mesh triangles with all three vertices inside, re-indexed into ``nodes``.
    """

    rect: tuple[float, float, float, float]
    nodes: np.ndarray
    triangles: np.ndarray
    triangle_ids: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class Mesh:
    n: int
    nodes: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary_mask: np.ndarray = field(repr=False)
    interior_index: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_dofs(self) -> int:
        return (self.n - 1) ** 2

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the three hat functions on each triangle, shape (T, 3, 2)."""
        p = self.nodes[self.triangles]
        x, y = p[..., 0], p[..., 1]
        twice_area = 2.0 * self.areas
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        return np.stack([gx, gy], axis=-1) / twice_area[:, None, None]

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        """Unit-coefficient element stiffness blocks, shape (T, 3, 3)."""
        g = self.gradients
        return np.einsum("tid,tjd->tij", g, g) * self.areas[:, None, None]

    @cached_property
    def _stiffness_operator(self):
        # Sparse map from per-triangle coefficients to the CSR data array of
        # the full stiffness matrix; assembly is then a single matvec.
        return _element_operator(self.triangles, self.local_stiffness, self.num_nodes)

    @cached_property
    def _interior_operator(self):
        pattern, op = self._stiffness_operator
        keep = self.interior_nodes
        # Tag each entry with its slot in the full data array, then slice.
        tagged = pattern.copy()
        tagged.data = np.arange(tagged.nnz, dtype=float) + 1.0
        sub = tagged[keep][:, keep].tocsr()
        sub.sort_indices()
        slots = sub.data.astype(np.int64) - 1
        sub.data = np.zeros(sub.nnz)
        return sub, op[slots]

    def mask(self, x0: float, x1: float, y0: float, y1: float) -> SubdomainMask:
        """Resolve the closed rectangle [x0,x1]x[y0,y1]."""
        tol = 1e-12
        if x1 < x0 or y1 < y0:
            raise ValueError(f"degenerate rectangle {(x0, x1, y0, y1)}")
        px, py = self.nodes[:, 0], self.nodes[:, 1]
        inside = (px >= x0 - tol) & (px <= x1 + tol) & (py >= y0 - tol) & (py <= y1 + tol)
        node_ids = np.flatnonzero(inside)
        if node_ids.size == 0:
            raise ValueError(f"rectangle {(x0, x1, y0, y1)} contains no mesh nodes")
        tri_ids = np.flatnonzero(inside[self.triangles].all(axis=1))
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[node_ids] = np.arange(node_ids.size)
        return SubdomainMask(
            rect=(float(x0), float(x1), float(y0), float(y1)),
            nodes=node_ids,
            triangles=local[self.triangles[tri_ids]],
            triangle_ids=tri_ids,
        )

    @cached_property
    def full_mask(self) -> SubdomainMask:
        return self.mask(0.0, 1.0, 0.0, 1.0)


def _element_operator(triangles, blocks, num_nodes):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    pattern = sp.csr_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes)
    )
    pattern.sum_duplicates()
    pattern.sort_indices()
    # position of each (row, col) entry in the CSR data array
    order = np.lexsort((cols, rows))
    key = rows[order] * num_nodes + cols[order]
    starts = np.r_[0, np.flatnonzero(np.diff(key)) + 1]
    slot = np.empty(rows.size, dtype=np.int64)
    slot[order] = np.repeat(np.arange(starts.size), np.diff(np.r_[starts, key.size]))
    tri_of = np.repeat(np.arange(len(triangles)), 9)
    op = sp.csr_matrix(
        (blocks.reshape(-1), (slot, tri_of)), shape=(pattern.nnz, len(triangles))
    )
    pattern.data[:] = 0.0
    return pattern, op


def build_mesh(n: int) -> Mesh:
    """Uniform triangulation of [0,1]^2 with ``n`` subdivisions per side."""
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise ValueError(f"mesh needs n >= 2 subdivisions, got {n!r}")
    n = int(n)
    coords = np.arange(n + 1) / n
    xx, yy = np.meshgrid(coords, coords)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    n00 = (j * (n + 1) + i).ravel()
    n10 = n00 + 1
    n01 = n00 + n + 1
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n01])
    upper = np.column_stack([n11, n01, n10])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    ix = np.tile(np.arange(n + 1), n + 1)
    iy = np.repeat(np.arange(n + 1), n + 1)
    boundary = (ix == 0) | (ix == n) | (iy == 0) | (iy == n)
    interior_index = np.full(nodes.shape[0], -1, dtype=np.int64)
    interior_index[~boundary] = np.arange(int((~boundary).sum()))
    for arr in (nodes, triangles, boundary, interior_index):
        arr.flags.writeable = False
    return Mesh(n, nodes, triangles, boundary, interior_index)


def _coefficient_per_triangle(mesh: Mesh, a_eval) -> np.ndarray:
    if np.isscalar(a_eval):
        a_t = np.full(len(mesh.triangles), float(a_eval))
    elif callable(a_eval):
        c = mesh.centroids
        a_t = np.broadcast_to(
            np.asarray(a_eval(c[:, 0], c[:, 1]), dtype=float), (len(c),)
        ).copy()
    else:
        a_t = np.asarray(a_eval, dtype=float)
        if a_t.shape != (len(mesh.triangles),):
            raise ValueError("per-triangle coefficient array has the wrong length")
    if not np.all(a_t > 0) or not np.all(np.isfinite(a_t)):
        bad = int(np.flatnonzero(~(a_t > 0) | ~np.isfinite(a_t))[0])
        raise ContrastViolation(
            f"coefficient {a_t[bad]!r} at centroid {tuple(mesh.centroids[bad])} is not positive"
        )
    return a_t


def assemble_stiffness(mesh: Mesh, a_eval, *, interior: bool = False) -> sp.csr_matrix:
    """Stiffness matrix with the coefficient sampled at triangle centroids.

    ``a_eval`` is a vectorised callable ``a(x, y)``, a scalar, or an array of
    per-triangle values.  With ``interior=True`` the boundary rows and columns
    are dropped (Dirichlet elimination) and the result is SPD.
    """
    a_t = _coefficient_per_triangle(mesh, a_eval)
    pattern, op = mesh._interior_operator if interior else mesh._stiffness_operator
    A = pattern.copy()
    A.data = op @ a_t
    return A


def assemble_mass(mesh: Mesh, mask: SubdomainMask | None = None) -> sp.csr_matrix:
    """Exact P1 mass matrix, on the whole mesh or on the triangles of ``mask``."""
    local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    if mask is None:
        tris, areas, size = mesh.triangles, mesh.areas, mesh.num_nodes
    else:
        tris, areas, size = mask.triangles, mesh.areas[mask.triangle_ids], mask.size
    blocks = areas[:, None, None] * local
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    M = sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(size, size))
    M.sum_duplicates()
    return M


def assemble_load(mesh: Mesh, f_eval) -> np.ndarray:
    """Load vector by one-point centroid quadrature: b_i += f(c_T) |T| / 3."""
    c = mesh.centroids
    if callable(f_eval):
        f_t = np.broadcast_to(np.asarray(f_eval(c[:, 0], c[:, 1]), dtype=float), (len(c),))
    else:
        f_t = np.broadcast_to(np.asarray(f_eval, dtype=float), (len(c),))
    contrib = np.repeat((f_t * mesh.areas / 3.0)[:, None], 3, axis=1)
    return np.bincount(mesh.triangles.ravel(), weights=contrib.ravel(), minlength=mesh.num_nodes)


def eliminate_dirichlet(mesh: Mesh, A: sp.spmatrix, b: np.ndarray | None = None):
    """Drop boundary rows/columns (homogeneous Dirichlet data)."""
    keep = mesh.interior_nodes
    A_ii = A.tocsr()[keep][:, keep].tocsr()
    if b is None:
        return A_ii
    return A_ii, np.asarray(b, dtype=float)[keep]


def default_maxiter(dofs: int, tol: float) -> int:
    return int(min(20.0 * math.sqrt(dofs) * math.log(1.0 / tol), 50 * dofs + 100))


def pcg(A, b, tol=1e-10, maxiter=None, x0=None, return_info=False):
    """Jacobi-preconditioned conjugate gradients for SPD ``A``.

    Stops when ``||b - A x|| <= tol * ||b||``.  Raises :class:`SolverError` if
    that is not reached within ``maxiter`` iterations.
    """
    b = np.asarray(b, dtype=float)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if maxiter is None:
        maxiter = default_maxiter(b.size, tol)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        x[:] = 0.0
        return (x, {"iterations": 0, "residual": 0.0}) if return_info else x
    inv_diag = 1.0 / A.diagonal()
    r = b - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol:
        if it >= maxiter:
            raise SolverError(
                f"PCG did not converge in {maxiter} iterations (relative residual {res:.3e})",
                residual=res,
                iterations=it,
            )
        Ap = A @ p
        pAp = p @ Ap
        if not (pAp > 0.0 and np.isfinite(pAp) and rz > 0.0):
            raise SolverError(
                f"PCG broke down after {it} iterations (relative residual {res:.3e})",
                residual=res,
                iterations=it,
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
        it += 1
        res = np.linalg.norm(r) / bnorm
    if return_info:
        return x, {"iterations": it, "residual": res}
    return x


def solve_dirichlet(mesh: Mesh, A_interior, b_full, tol: float = 1e-10, maxiter=None) -> np.ndarray:
    """Solve the eliminated system and return a full nodal field (zero on the boundary)."""
    b_i = np.asarray(b_full, dtype=float)
    if b_i.size == mesh.num_nodes:
        b_i = b_i[mesh.interior_nodes]
    u = np.zeros(mesh.num_nodes)
    u[mesh.interior_nodes] = pcg(A_interior, b_i, tol=tol, maxiter=maxiter)
    return u


def solve_fem(mesh: Mesh, a_eval, f_eval, tol: float = 1e-10) -> np.ndarray:
    """Assemble and solve -div(a grad u) = f, u = 0 on the boundary."""
    A = assemble_stiffness(mesh, a_eval, interior=True)
    b = assemble_load(mesh, f_eval)
    return solve_dirichlet(mesh, A, b, tol=tol)


def _restrict(mesh: Mesh, field_values, mask: SubdomainMask) -> np.ndarray:
    v = np.asarray(field_values, dtype=float)
    if v.shape[0] == mesh.num_nodes:
        return v[mask.nodes]
    if v.shape[0] == mask.size:
        return v
    raise ValueError(
        f"field of length {v.shape[0]} matches neither the mesh ({mesh.num_nodes}) "
        f"nor the mask ({mask.size})"
    )


def norm_l2(mesh: Mesh, field_values, mask: SubdomainMask | None = None, mass=None) -> float:
    """Discrete L2 norm sqrt(v^T M v) over the mask's triangles."""
    mask = mesh.full_mask if mask is None else mask
    if mask.triangles.size == 0:
        raise ValueError("mask contains no complete triangle")
    v = _restrict(mesh, field_values, mask)
    M = assemble_mass(mesh, mask) if mass is None else mass
    return float(math.sqrt(max(v @ (M @ v), 0.0)))


def seminorm_h1(mesh: Mesh, field_values, mask: SubdomainMask | None = None) -> float:
    """L2 norm of the piecewise-constant gradient over triangles inside the mask."""
    mask = mesh.full_mask if mask is None else mask
    if mask.triangles.size == 0:
        raise ValueError("mask contains no complete triangle")
    v = _restrict(mesh, field_values, mask)
    g = mesh.gradients[mask.triangle_ids]
    grad = np.einsum("tid,ti->td", g, v[mask.triangles])
    return float(math.sqrt(np.sum(np.sum(grad**2, axis=1) * mesh.areas[mask.triangle_ids])))


_FIELD_MAGIC = b"EPF1"
_FIELD_VERSION = 1


def save_field(path, mesh: Mesh, values) -> None:
    v = np.asarray(values, dtype="<f8")
    if v.shape != (mesh.num_nodes,):
        raise ValueError("field length does not match mesh")
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC + struct.pack("<II", _FIELD_VERSION, mesh.n))
        fh.write(v.tobytes())


def load_field(path) -> tuple[int, np.ndarray]:
    """Read an EPF1 file; returns ``(n, values)``."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not an EPF1 field file")
    version, n = struct.unpack("<II", data[4:12])
    if version != _FIELD_VERSION:
        raise ValueError(f"{path}: unsupported field version {version}")
    expected = 8 * (n + 1) ** 2
    if len(data) - 12 != expected:
        raise ValueError(f"{path}: truncated payload ({len(data) - 12} of {expected} bytes)")
    return n, np.frombuffer(data, dtype="<f8", offset=12).copy()


# symmetric 6-point rule, degree 4 (Dunavant)
_DUNAVANT4 = (
    np.array(
        [
            [0.445948490915965, 0.445948490915965, 0.108103018168070],
            [0.445948490915965, 0.108103018168070, 0.445948490915965],
            [0.108103018168070, 0.445948490915965, 0.445948490915965],
            [0.091576213509771, 0.091576213509771, 0.816847572980459],
            [0.091576213509771, 0.816847572980459, 0.091576213509771],
            [0.816847572980459, 0.091576213509771, 0.091576213509771],
        ]
    ),
    np.array([0.223381589678011] * 3 + [0.109951743655322] * 3),
)


def errors_against_exact(mesh: Mesh, uh, u_exact, grad_exact) -> tuple[float, float]:
    """L2 and H1-seminorm errors of a P1 field against a closed-form solution.

    Integrals use a degree-4 rule on every triangle, so the H1 error sees the
    true gradient rather than the gradient of the nodal interpolant.
    """
    bary, w = _DUNAVANT4
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    qp = np.einsum("qi,tid->tqd", bary, p)
    uh_t = np.asarray(uh, dtype=float)[mesh.triangles]
    uh_q = uh_t @ bary.T
    grad_h = np.einsum("tid,ti->td", mesh.gradients, uh_t)
    ue = u_exact(qp[..., 0], qp[..., 1])
    gx, gy = grad_exact(qp[..., 0], qp[..., 1])
    area = mesh.areas[:, None]
    l2 = np.sum(area * w * (ue - uh_q) ** 2)
    h1 = np.sum(area * w * ((gx - grad_h[:, None, 0]) ** 2 + (gy - grad_h[:, None, 1]) ** 2))
    return float(math.sqrt(l2)), float(math.sqrt(h1))


def relative_errors(mesh: Mesh, reference, approx, mask: SubdomainMask | None = None, mass=None):
    """Relative L2 and H1-seminorm errors, column by column.

    ``reference`` and ``approx`` hold one field per column (or a single
    field), either at every mesh node or only at the mask nodes.
    """
    mask = mesh.full_mask if mask is None else mask
    M = assemble_mass(mesh, mask) if mass is None else mass
    R = np.asarray(reference, dtype=float)
    single = R.ndim == 1
    R = R.reshape(R.shape[0], -1)
    E = R - np.asarray(approx, dtype=float).reshape(R.shape)
    l2 = np.empty(R.shape[1])
    h1 = np.empty(R.shape[1])
    for j in range(R.shape[1]):
        l2[j] = norm_l2(mesh, E[:, j], mask, M) / norm_l2(mesh, R[:, j], mask, M)
        h1[j] = seminorm_h1(mesh, E[:, j], mask) / seminorm_h1(mesh, R[:, j], mask)
    return (l2[0], h1[0]) if single else (l2, h1)
