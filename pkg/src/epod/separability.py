"""Numerical check that the discrete Green's function is highly separable.

Columns of the block are FEM responses to unit nodal loads at (a subsample
of) source nodes, read off on a disjoint target region.  Fast decay of the
block's singular values means a short sum ``sum_i u_i(x) v_i(y)`` represents
it well.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh_fem import Mesh, SubdomainMask, assemble_stiffness, pcg
from .pod_basis import eig_sym

__all__ = ["GreensBlock", "greens_block", "singular_decay", "rect_distance"]


@dataclass(frozen=True)
class GreensBlock:
    target_nodes: np.ndarray
    source_nodes: np.ndarray
    G: np.ndarray = field(repr=False)


def rect_distance(r1, r2) -> float:
    """Euclidean distance between two closed rectangles (x0, x1, y0, y1)."""
    dx = max(r2[0] - r1[1], r1[0] - r2[1], 0.0)
    dy = max(r2[2] - r1[3], r1[2] - r2[3], 0.0)
    return float(np.hypot(dx, dy))


def greens_block(mesh: Mesh, coeff_eval, target: SubdomainMask, source: SubdomainMask,
                 source_stride: int = 1, tol: float = 1e-10) -> GreensBlock:
    """Solve one FEM problem per retained source node; keep values on ``target``."""
    if source_stride < 1:
        raise ValueError("source_stride must be >= 1")
    if np.intersect1d(target.nodes, source.nodes).size or rect_distance(target.rect, source.rect) <= 0.0:
        raise ValueError("target and source regions must be disjoint and separated")
    src = source.nodes[::source_stride]
    if mesh.boundary_mask[src].any():
        raise ValueError("source region touches the Dirichlet boundary")
    A = assemble_stiffness(mesh, coeff_eval, interior=True)
    dof = mesh.interior_index
    G = np.empty((target.size, src.size))
    u = np.zeros(mesh.num_nodes)
    for k, node in enumerate(src):
        b = np.zeros(mesh.num_dofs)
        b[dof[node]] = 1.0
        u[mesh.interior_nodes] = pcg(A, b, tol=tol)
        G[:, k] = u[target.nodes]
    return GreensBlock(target.nodes, src, G)


def singular_decay(block) -> np.ndarray:
    """Singular values, descending, from the Jacobi eigenvalues of ``G^T G``."""
    G = block.G if isinstance(block, GreensBlock) else np.asarray(block, dtype=float)
    lam = eig_sym(G.T @ G).values
    return np.sqrt(np.clip(lam, 0.0, None))
