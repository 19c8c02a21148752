"""Snapshot POD through the mass-weighted correlation matrix.

With snapshots ``U`` (mask rows x N) and mask mass matrix ``M`` the
correlation matrix is ``S = U^T M U``.  Its eigenpairs ``(lam_j, v_j)`` give
the mass-orthonormal modes ``phi_j = U v_j / sqrt(lam_j)``.  When the mask
has fewer nodes than there are snapshots the same modes come from a smaller
node-side eigenproblem.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mesh_fem import Mesh, SubdomainMask, assemble_mass, build_mesh
from .snapshots import SnapshotSet

__all__ = [
    "Spectrum",
    "PodBasis",
    "correlation_matrix",
    "eig_sym",
    "energy_curve",
    "choose_rank",
    "build_basis",
    "project",
    "reconstruct",
    "pod_error_identity",
    "save_basis",
    "load_basis",
]

RANK_TOL = 1e-12


@dataclass(frozen=True)
class Spectrum:
    values: np.ndarray
    vectors: np.ndarray = field(repr=False)
    sweeps: int = 0


@dataclass(frozen=True, eq=False)
class PodBasis:
    n: int
    rect: tuple
    nodes: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray = field(repr=False)
    mass: sp.csr_matrix = field(repr=False)
    mean: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.phi.shape[1]

    @property
    def N(self) -> int:
        return len(self.eigenvalues)

    def truncate(self, K: int) -> "PodBasis":
        if not 0 <= K <= self.K:
            raise ValueError(f"cannot truncate a {self.K}-mode basis to {K}")
        return PodBasis(self.n, self.rect, self.nodes, self.phi[:, :K], self.eigenvalues, self.mass, self.mean)


def _tournament(m: int):
    """Round-robin schedule: m-1 rounds of m/2 disjoint index pairs (m even)."""
    players = list(range(m))
    for _ in range(m - 1):
        half = m // 2
        top, bottom = players[:half], players[half:][::-1]
        p = np.array([min(a, b) for a, b in zip(top, bottom)])
        q = np.array([max(a, b) for a, b in zip(top, bottom)])
        yield p, q
        players = [players[0], players[-1]] + players[1:-1]


def eig_sym(matrix, tol: float = 1e-12, max_sweeps: int = 60) -> Spectrum:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all index pairs in round-robin order, applying the
    ``m/2`` disjoint rotations of one round at once.  Iteration stops when
    every off-diagonal entry is below ``tol * ||A||_F``.  Eigenpairs are
    returned in descending order.
    """
    A = np.array(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("eig_sym needs a square matrix")
    N = A.shape[0]
    scale = np.linalg.norm(A)
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(scale, 1e-300)):
        raise ValueError("eig_sym needs a symmetric matrix")
    A = 0.5 * (A + A.T)
    if N == 0:
        return Spectrum(np.zeros(0), np.zeros((0, 0)))
    m = N + (N % 2)
    if m != N:
        A = np.pad(A, ((0, 1), (0, 1)))
    V = np.eye(m)
    thresh = tol * scale
    schedule = list(_tournament(m)) if m > 1 else []
    sweeps = 0
    while True:
        off = np.abs(A - np.diag(np.diag(A)))
        if scale == 0.0 or off.max() < thresh:
            break
        if sweeps >= max_sweeps:
            raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps (off-diag {off.max():.3e})")
        for p, q in schedule:
            apq = A[p, q]
            active = np.abs(apq) > 0.0
            if not active.any():
                continue
            app, aqq = A[p, p], A[q, q]
            tau = np.where(active, (aqq - app) / np.where(active, 2.0 * apq, 1.0), 0.0)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            Ap, Aq = A[:, p], A[:, q]
            A[:, p], A[:, q] = c * Ap - s * Aq, s * Ap + c * Aq
            Ap, Aq = A[p, :], A[q, :]
            A[p, :], A[q, :] = c[:, None] * Ap - s[:, None] * Aq, s[:, None] * Ap + c[:, None] * Aq
            # the rotation annihilates (p, q) exactly in exact arithmetic
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * Vp - s * Vq, s * Vp + c * Vq
        sweeps += 1
    values = np.diag(A).copy()
    if m != N:
        values, V = values[:N], V[:N, :N]
    order = np.argsort(-values, kind="stable")
    return Spectrum(values[order], V[:, order], sweeps)


def _mask_and_mass(snapshots: SnapshotSet, mesh: Mesh | None, mask, mass):
    mesh = mesh or build_mesh(snapshots.n)
    if mask is None:
        mask = mesh.mask(*snapshots.rect)
    elif not isinstance(mask, SubdomainMask):
        mask = mesh.mask(*mask)
    if mass is None:
        mass = assemble_mass(mesh, mask)
    return mesh, mask, mass


def _rows_on_mask(snapshots: SnapshotSet, mesh: Mesh, mask: SubdomainMask) -> np.ndarray:
    if tuple(mask.rect) == tuple(snapshots.rect):
        return snapshots.fields
    outer = mesh.mask(*snapshots.rect)
    if not np.all(np.isin(mask.nodes, outer.nodes)):
        raise ValueError(f"mask {mask.rect} lies outside the snapshot region {snapshots.rect}")
    return snapshots.fields[np.searchsorted(outer.nodes, mask.nodes)]


def correlation_matrix(snapshots, mass, mask=None, center: bool = False) -> np.ndarray:
    """``S_ij = <u_i, u_j>`` in the mask-restricted mass inner product."""
    if isinstance(snapshots, SnapshotSet):
        mesh, mask, mass = _mask_and_mass(snapshots, None, mask, mass)
        U = _rows_on_mask(snapshots, mesh, mask)
    else:
        U = np.asarray(snapshots, dtype=float)
    if U.shape[0] != mass.shape[0]:
        raise ValueError(f"snapshot rows ({U.shape[0]}) do not match the mass matrix ({mass.shape[0]})")
    if center:
        U = U - U.mean(axis=1, keepdims=True)
    S = U.T @ (mass @ U)
    return 0.5 * (S + S.T)


def energy_curve(eigenvalues) -> np.ndarray:
    """``1 - sqrt(sum_{j>n} lam_j / sum_j lam_j)`` for n = 0..N."""
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = lam.sum()
    if total == 0.0:
        return np.ones(len(lam) + 1)
    tail = np.r_[np.cumsum(lam[::-1])[::-1], 0.0]
    return 1.0 - np.sqrt(tail / total)


def choose_rank(eigenvalues, energy: float) -> int:
    if not 0.0 < energy < 1.0:
        raise ValueError("energy threshold must lie in (0, 1)")
    curve = energy_curve(eigenvalues)
    hits = np.flatnonzero(curve >= energy)
    return int(hits[0])


def numerical_rank(eigenvalues) -> int:
    lam = np.asarray(eigenvalues)
    if lam.size == 0 or lam[0] <= 0:
        return 0
    return int(np.sum(lam > RANK_TOL * lam[0]))


def _node_side_modes(U: np.ndarray, mass) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``L^T U U^T L`` (``M = L L^T``), the ``J x J`` twin of ``S``.

    Its nonzero eigenvalues are those of ``S = U^T M U`` and ``L^{-T} psi``
    are the same mass-orthonormal modes, so wide snapshot sets (more
    snapshots than mask nodes) only pay for a ``J x J`` Jacobi solve.
    """
    L = sla.cholesky(mass.toarray() if sp.issparse(mass) else np.asarray(mass), lower=True)
    W = L.T @ U
    spec = eig_sym(W @ W.T)
    modes = sla.solve_triangular(L, spec.vectors, lower=True, trans="T")
    lam = np.zeros(U.shape[1])
    lam[:len(spec.values)] = spec.values[:U.shape[1]]
    return lam, modes


def build_basis(snapshots: SnapshotSet, mask=None, mass=None, K: int | None = None,
                energy: float | None = 0.9999, center: bool = False, mesh: Mesh | None = None,
                route: str = "auto") -> PodBasis:
    """POD modes from the snapshot correlation matrix.

    Pass ``K`` for a fixed rank; otherwise the smallest rank whose energy
    curve value reaches ``energy`` is used.  ``route`` picks the eigenproblem:
    ``"snapshots"`` solves the ``N x N`` correlation matrix, ``"nodes"`` the
    equivalent ``J x J`` one on the mask, ``"auto"`` whichever is smaller.
    """
    if route not in ("auto", "snapshots", "nodes"):
        raise ValueError(f"unknown route {route!r}")
    mesh, mask, mass = _mask_and_mass(snapshots, mesh, mask, mass)
    U = _rows_on_mask(snapshots, mesh, mask)
    mean = U.mean(axis=1) if center else None
    if center:
        U = U - mean[:, None]
    if route == "auto":
        route = "nodes" if U.shape[0] < U.shape[1] else "snapshots"
    if route == "nodes":
        lam, modes = _node_side_modes(U, mass)
    else:
        spec = eig_sym(correlation_matrix(U, mass))
        lam = spec.values
    if lam.size and lam[-1] < -1e-10 * max(lam[0], 0.0):
        raise ValueError(f"correlation matrix is not positive semidefinite (eigenvalue {lam[-1]:.3e})")
    lam = np.clip(lam, 0.0, None)
    rank = numerical_rank(lam)
    if K is None:
        if energy is None:
            raise ValueError("give either K or an energy threshold")
        K = min(choose_rank(lam, energy), rank)
    if K < 0 or K > rank:
        raise ValueError(f"requested K={K} exceeds the numerical rank {rank} of the snapshots")
    if route == "nodes":
        phi = modes[:, :K].copy()
    else:
        phi = U @ (spec.vectors[:, :K] / np.sqrt(lam[:K]))
    return PodBasis(snapshots.n, tuple(mask.rect), mask.nodes, phi, lam, mass.tocsr(), mean)


def _field_on_basis(basis: PodBasis, values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape[0] == len(basis.nodes):
        return v
    if v.shape[0] == (basis.n + 1) ** 2:
        return v[basis.nodes]
    raise ValueError(f"field with {v.shape[0]} rows does not fit a basis on {len(basis.nodes)} nodes")


def project(values, basis: PodBasis, mass=None) -> np.ndarray:
    """Coefficients ``c_j = <u, phi_j>``; ``values`` may hold several columns."""
    M = basis.mass if mass is None else mass
    v = _field_on_basis(basis, values)
    if basis.mean is not None:
        v = v - (basis.mean if v.ndim == 1 else basis.mean[:, None])
    return basis.phi.T @ (M @ v)


def reconstruct(basis: PodBasis, coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=float)
    if c.shape[0] != basis.K:
        raise ValueError(f"expected {basis.K} coefficients, got {c.shape[0]}")
    out = basis.phi @ c
    if basis.mean is not None:
        out = out + (basis.mean if out.ndim == 1 else basis.mean[:, None])
    return out


def pod_error_identity(snapshots: SnapshotSet, basis: PodBasis, mass=None) -> tuple[float, float]:
    """Both sides of the POD error identity for the snapshots the basis came from.

    ``lhs`` is the measured relative squared projection error summed over all
    snapshots; ``rhs`` is the discarded eigenvalue fraction.
    """
    if basis.N != snapshots.N:
        raise ValueError("basis was not built from this snapshot set")
    mesh = build_mesh(snapshots.n)
    mask = mesh.mask(*basis.rect)
    M = basis.mass if mass is None else mass
    U = _rows_on_mask(snapshots, mesh, mask)
    if basis.mean is not None:
        U = U - basis.mean[:, None]
    R = U - basis.phi @ (basis.phi.T @ (M @ U))
    lhs = float(np.einsum("ij,ij->", R, M @ R) / np.einsum("ij,ij->", U, M @ U))
    lam = basis.eigenvalues
    rhs = float(lam[basis.K:].sum() / lam.sum())
    return lhs, rhs


_MAGIC = b"PODB"
_VERSION = 1


def save_basis(basis: PodBasis, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II4dQQI", _VERSION, basis.n, *basis.rect, basis.K, basis.N,
                             int(basis.mean is not None)))
        fh.write(np.asarray(basis.eigenvalues, "<f8").tobytes())
        fh.write(np.asfortranarray(basis.phi, "<f8").tobytes(order="F"))
        if basis.mean is not None:
            fh.write(np.asarray(basis.mean, "<f8").tobytes())


def load_basis(path) -> PodBasis:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a PODB basis file")
    head = struct.calcsize("<II4dQQI")
    if len(data) < 4 + head:
        raise ValueError(f"{path}: truncated header")
    version, n, x0, x1, y0, y1, K, N, centered = struct.unpack_from("<II4dQQI", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported PODB version {version}")
    mesh = build_mesh(n)
    mask = mesh.mask(x0, x1, y0, y1)
    J = mask.size
    need = 8 * (N + J * K + (J if centered else 0))
    off = 4 + head
    if len(data) - off != need:
        raise ValueError(f"{path}: payload has {len(data) - off} bytes, expected {need}")
    lam = np.frombuffer(data, "<f8", N, off).copy()
    off += 8 * N
    phi = np.frombuffer(data, "<f8", J * K, off).reshape((J, K), order="F").copy()
    off += 8 * J * K
    mean = np.frombuffer(data, "<f8", J, off).copy() if centered else None
    return PodBasis(n, (x0, x1, y0, y1), mask.nodes, phi, lam, assemble_mass(mesh, mask).tocsr(), mean)
