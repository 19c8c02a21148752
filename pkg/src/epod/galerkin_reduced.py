"""Reduced Galerkin solves on a POD basis over the whole domain.

For an affine coefficient ``a = sum_n w_n(xi) a_n`` the ``K x K`` blocks
``Phi^T A_n Phi`` are computed once; an online query then only sums the
blocks and factors a small dense matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .coeff_models import NotAffineError, ParamVector, _as_coeff, _as_force, affine_terms, coefficient_callable, force_callable
from .mesh_fem import Mesh, assemble_load, assemble_stiffness
from .pod_basis import PodBasis

__all__ = [
    "ReducedSystem",
    "NotPositiveDefinite",
    "precompute_reduced",
    "online_solve",
    "online_solve_nonaffine",
    "truncate_system",
    "galerkin_residual",
    "energy_norm",
]

FULL_RECT = (0.0, 1.0, 0.0, 1.0)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """The assembled reduced matrix failed Cholesky, i.e. ellipticity is lost."""


@dataclass(frozen=True)
class ReducedSystem:
    basis: PodBasis = field(repr=False)
    family: str
    force: str
    blocks: np.ndarray | None = field(repr=False)  # (terms, K, K) or None if not affine
    weights: list | None = field(repr=False)
    load: np.ndarray | None = field(repr=False)  # None when the force has parameters

    @property
    def K(self) -> int:
        return self.basis.K

    @property
    def is_affine(self) -> bool:
        return self.blocks is not None


def _interior_basis(basis: PodBasis, mesh: Mesh) -> np.ndarray:
    if tuple(basis.rect) != FULL_RECT:
        raise ValueError(f"reduced Galerkin needs a basis over the whole domain, got mask {basis.rect}")
    if basis.n != mesh.n:
        raise ValueError(f"basis lives on n={basis.n}, mesh has n={mesh.n}")
    if basis.mean is not None:
        raise ValueError("reduced Galerkin expects an uncentred basis")
    return basis.phi[mesh.interior_nodes]


def _reduced_load(basis: PodBasis, mesh: Mesh, force, theta) -> np.ndarray:
    b = assemble_load(mesh, force_callable(force, np.asarray(theta, dtype=float)))
    return basis.phi.T @ b


def precompute_reduced(basis: PodBasis, family, force, mesh: Mesh) -> ReducedSystem:
    """Offline reduced blocks for every affine term and the reduced load."""
    phi = _interior_basis(basis, mesh)
    fam, frc = _as_coeff(family, mesh.n), _as_force(force)
    load = None if frc.num_params else _reduced_load(basis, mesh, frc, np.zeros(0))
    try:
        terms = affine_terms(fam)
    except NotAffineError:
        return ReducedSystem(basis, fam.name, frc.name, None, None, load)
    blocks = np.empty((len(terms), basis.K, basis.K))
    for k, (a_n, _) in enumerate(terms):
        A = assemble_stiffness(mesh, a_n, interior=True)
        blk = phi.T @ (A @ phi)
        blocks[k] = 0.5 * (blk + blk.T)
    return ReducedSystem(basis, fam.name, frc.name, blocks, [w for _, w in terms], load)


def truncate_system(system: ReducedSystem, K: int) -> ReducedSystem:
    """Keep the leading ``K`` modes; nested POD bases make this exact."""
    if not 1 <= K <= system.K:
        raise ValueError(f"K must lie in [1, {system.K}], got {K}")
    return ReducedSystem(
        system.basis.truncate(K), system.family, system.force,
        None if system.blocks is None else system.blocks[:, :K, :K].copy(),
        system.weights,
        None if system.load is None else system.load[:K].copy(),
    )


def _cholesky_solve(A, rhs) -> np.ndarray:
    try:
        factor = sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("reduced stiffness matrix is not positive definite") from exc
    return sla.cho_solve(factor, rhs, check_finite=False)


def _split(params, theta):
    if isinstance(params, ParamVector):
        return np.asarray(params.xi, float), np.asarray(params.theta, float)
    return np.asarray(params, float), np.zeros(0) if theta is None else np.asarray(theta, float)


def online_solve(system: ReducedSystem, xi, theta=None, mesh: Mesh | None = None) -> np.ndarray:
    """Coefficients from the ``K x K`` reduced system at ``xi``.

    Forces with parameters need ``theta`` and the ``mesh`` to rebuild the
    reduced load.
    """
    if not system.is_affine:
        raise NotAffineError(f"{system.family} has no precomputed blocks; use online_solve_nonaffine")
    xi, theta = _split(xi, theta)
    w = np.array([fn(xi) for fn in system.weights])
    A = np.tensordot(w, system.blocks, axes=1)
    if system.load is not None:
        f = system.load
    else:
        if mesh is None:
            raise ValueError("a parametrised force needs the mesh to rebuild the reduced load")
        f = _reduced_load(system.basis, mesh, system.force, theta)
    return _cholesky_solve(A, f)


def online_solve_nonaffine(basis: PodBasis, family, xi, force, mesh: Mesh, theta=None) -> np.ndarray:
    """Assemble ``A(xi)`` in full, project it and solve; works for any family."""
    phi = _interior_basis(basis, mesh)
    fam = _as_coeff(family, mesh.n)
    xi, theta = _split(xi, theta)
    A = assemble_stiffness(mesh, coefficient_callable(fam, xi), interior=True)
    Ared = phi.T @ (A @ phi)
    return _cholesky_solve(0.5 * (Ared + Ared.T), _reduced_load(basis, mesh, force, theta))


def galerkin_residual(basis: PodBasis, mesh: Mesh, A_interior, uh, coeffs) -> np.ndarray:
    """``Phi^T A (u_h - Phi c)`` on interior unknowns."""
    phi = _interior_basis(basis, mesh)
    e = np.asarray(uh, float)[mesh.interior_nodes] - phi @ coeffs
    return phi.T @ (A_interior @ e)


def energy_norm(mesh: Mesh, A_interior, values) -> float:
    v = np.asarray(values, float)[mesh.interior_nodes]
    return float(np.sqrt(max(v @ (A_interior @ v), 0.0)))
