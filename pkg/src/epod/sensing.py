"""Pivoted Householder QR, least squares, and sensor placement on a POD basis."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pod_basis import PodBasis

__all__ = [
    "PivotedQr",
    "RankDeficientError",
    "SensorSet",
    "qr_pivoted",
    "ls_solve",
    "lstsq",
    "select_sensors",
    "reconstruct_from_measurements",
    "MAX_GRAM_NODES",
]

RANK_TOL = 1e-12
# largest mask size for which the M > K rule forms the J x J matrix Phi Phi^T
MAX_GRAM_NODES = 5000


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, rank, cols):
        super().__init__(f"matrix is numerically rank deficient: rank {rank} < {cols} columns")
        self.rank = rank


@dataclass(frozen=True)
class PivotedQr:
    """``A[:, perm] = Q @ R``, reflectors kept for applying ``Q^T`` cheaply."""

    reflectors: list = field(repr=False)
    R: np.ndarray = field(repr=False)
    perm: np.ndarray
    shape: tuple
    rank: int

    @property
    def Q(self) -> np.ndarray:
        m = self.shape[0]
        k = len(self.reflectors)
        Q = np.eye(m, k)
        for j in range(k - 1, -1, -1):
            v = self.reflectors[j]
            Q[j:] -= 2.0 * np.outer(v, v @ Q[j:])
        return Q

    def apply_qt(self, b) -> np.ndarray:
        y = np.array(b, dtype=float)
        for j, v in enumerate(self.reflectors):
            y[j:] -= 2.0 * np.outer(v, v @ y[j:]) if y.ndim == 2 else 2.0 * v * (v @ y[j:])
        return y


def qr_pivoted(matrix, max_steps: int | None = None) -> PivotedQr:
    """Householder QR with greedy column pivoting (largest remaining norm first).

    ``max_steps`` stops after that many reflections; the leading pivots are
    then final, which is all sensor placement needs.
    """
    A = np.array(matrix, dtype=float)
    if A.ndim != 2:
        raise ValueError("qr_pivoted needs a 2-D array")
    m, n = A.shape
    steps = min(m, n) if max_steps is None else min(m, n, max_steps)
    perm = np.arange(n)
    reflectors = []
    r11 = None
    rank = 0
    for k in range(steps):
        norms = np.einsum("ij,ij->j", A[k:, k:], A[k:, k:])
        j = k + int(np.argmax(norms))
        if j != k:
            A[:, [k, j]] = A[:, [j, k]]
            perm[[k, j]] = perm[[j, k]]
        x = A[k:, k]
        nx = np.linalg.norm(x)
        v = x.copy()
        if nx > 0.0:
            alpha = -np.copysign(nx, x[0])
            v[0] -= alpha
            v /= np.linalg.norm(v)
            A[k:, k:] -= 2.0 * np.outer(v, v @ A[k:, k:])
            A[k + 1:, k] = 0.0
        else:
            v[:] = 0.0
        reflectors.append(v)
        diag = abs(A[k, k])
        if r11 is None:
            r11 = diag
        if r11 > 0 and diag >= RANK_TOL * r11:
            rank += 1
    R = np.triu(A[:steps, :])
    return PivotedQr(reflectors, R, perm, (m, n), rank)


def ls_solve(qr: PivotedQr, rhs) -> np.ndarray:
    """Least-squares minimiser of ``||A x - rhs||`` from a full pivoted QR."""
    m, n = qr.shape
    if m < n:
        raise ValueError(f"least squares needs rows >= cols, got {m}x{n}")
    if len(qr.reflectors) < n:
        raise ValueError("QR was truncated; refactor without max_steps")
    if qr.rank < n:
        raise RankDeficientError(qr.rank, n)
    y = qr.apply_qt(rhs)[:n]
    R = qr.R[:n, :n]
    z = np.empty_like(y)
    for i in range(n - 1, -1, -1):
        z[i] = (y[i] - R[i, i + 1:] @ z[i + 1:]) / R[i, i]
    x = np.empty_like(z)
    x[qr.perm] = z
    return x


def lstsq(A, b) -> np.ndarray:
    return ls_solve(qr_pivoted(A), b)


@dataclass(frozen=True)
class SensorSet:
    """Sensor rows of the basis: ``indices`` are positions within the basis mask."""

    indices: np.ndarray
    B: np.ndarray = field(repr=False)
    nodes: np.ndarray

    @property
    def M(self) -> int:
        return len(self.indices)


def select_sensors(basis: PodBasis | np.ndarray, M: int) -> SensorSet:
    """Place ``M`` sensors at the leading QR pivots of the basis.

    ``M == K`` pivots on ``Phi^T``; ``M > K`` pivots on ``Phi Phi^T``.
    """
    phi = basis.phi if isinstance(basis, PodBasis) else np.asarray(basis, dtype=float)
    J, K = phi.shape
    if M < K:
        raise ValueError(f"need at least K={K} sensors, got M={M}")
    if M > J:
        raise ValueError(f"cannot place {M} sensors on {J} nodes")
    if M == K:
        qr = qr_pivoted(phi.T, max_steps=M)
    else:
        if J > MAX_GRAM_NODES:
            raise ValueError(
                f"M > K placement forms a {J}x{J} matrix (limit {MAX_GRAM_NODES} nodes); use M = K"
            )
        qr = qr_pivoted(phi @ phi.T, max_steps=M)
    idx = qr.perm[:M].copy()
    nodes = basis.nodes[idx] if isinstance(basis, PodBasis) else idx
    return SensorSet(idx, phi[idx], nodes)


def reconstruct_from_measurements(basis: PodBasis | np.ndarray, sensors: SensorSet, y, return_coeffs=False):
    """Least-squares fit ``B c = y`` and return ``Phi c`` on the mask."""
    phi = basis.phi if isinstance(basis, PodBasis) else np.asarray(basis, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != sensors.M:
        raise ValueError(f"expected {sensors.M} measurements, got {y.shape[0]}")
    c = ls_solve(qr_pivoted(sensors.B), y)
    u = phi @ c
    return (u, c) if return_coeffs else u
