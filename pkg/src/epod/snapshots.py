"""Offline snapshot generation, restriction and the PODS file format."""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .coeff_models import (
    ParamVector,
    _as_coeff,
    _as_force,
    coefficient_family,
    eval_coeff,
    eval_force,
    sample_params,
)
from .mesh_fem import Mesh, SolverError, SubdomainMask, assemble_load, assemble_stiffness, build_mesh, pcg

__all__ = ["SnapshotSet", "generate", "solve_params", "restrict", "save", "load", "SnapshotError"]

_MAGIC = b"PODS"
_VERSION = 1
FULL_RECT = (0.0, 1.0, 0.0, 1.0)


class SnapshotError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"snapshot {index} failed: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True, eq=False)
class SnapshotSet:
    """Solution samples, one column per parameter draw.

    ``fields`` has shape ``(rows, N)``; rows are all mesh nodes unless the set
    was restricted, in which case ``rect`` records the mask rectangle.
    """

    n: int
    xi: np.ndarray
    theta: np.ndarray
    fields: np.ndarray = field(repr=False)
    rect: tuple = FULL_RECT
    coeff: str = ""
    force: str = ""
    seed: int = 0
    tol: float = 1e-10

    @property
    def N(self) -> int:
        return self.fields.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        """Map inputs ``(xi, theta)`` stacked row-wise, shape (N, r + force params)."""
        return np.hstack([self.xi, self.theta])

    def mesh(self) -> Mesh:
        return build_mesh(self.n)

    def mask(self, mesh: Mesh | None = None) -> SubdomainMask:
        return (mesh or self.mesh()).mask(*self.rect)

    def subset(self, columns) -> "SnapshotSet":
        columns = np.asarray(columns)
        return replace(self, xi=self.xi[columns], theta=self.theta[columns], fields=self.fields[:, columns])


def solve_params(mesh: Mesh, family, force, params: ParamVector, tol: float = 1e-10) -> np.ndarray:
    """Full FEM solve for one parameter draw; returns all nodal values."""
    fam, frc = _as_coeff(family, mesh.n), _as_force(force)
    A = assemble_stiffness(mesh, lambda x, y: eval_coeff(fam, params.xi, x, y), interior=True)
    b = assemble_load(mesh, lambda x, y: eval_force(frc, params.theta, x, y))
    u = np.zeros(mesh.num_nodes)
    u[mesh.interior_nodes] = pcg(A, b[mesh.interior_nodes], tol=tol)
    return u


def solve_many(mesh: Mesh, family, force, params: list[ParamVector], tol=1e-10, workers=1) -> np.ndarray:
    fam, frc = _as_coeff(family, mesh.n), _as_force(force)
    # warm the cached assembly operators before threads race for them
    mesh._interior_operator

    def one(k):
        try:
            return solve_params(mesh, fam, frc, params[k], tol)
        except SolverError as exc:
            raise SnapshotError(params[k].stream if params[k].stream is not None else k, exc) from exc

    out = np.empty((mesh.num_nodes, len(params)))
    if workers <= 1:
        for k in range(len(params)):
            out[:, k] = one(k)
    else:
        with ThreadPoolExecutor(workers) as pool:
            for k, col in enumerate(pool.map(one, range(len(params)))):
                out[:, k] = col
    return out


def generate(coeff_family, force_family, n: int, N: int, seed: int, tol: float = 1e-10,
             workers: int = 1, start: int = 0, params: list[ParamVector] | None = None) -> SnapshotSet:
    """Solve ``N`` independent realisations (streams ``start .. start+N-1``)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    mesh = build_mesh(n)
    fam = coefficient_family(coeff_family, n) if isinstance(coeff_family, str) else coeff_family
    frc = _as_force(force_family)
    if params is None:
        params = sample_params(fam, frc, seed, N, start=start)
    fields = solve_many(mesh, fam, frc, params, tol=tol, workers=workers)
    return SnapshotSet(
        n=n,
        xi=np.array([p.xi for p in params]),
        theta=np.array([p.theta for p in params]).reshape(len(params), frc.num_params),
        fields=fields,
        coeff=fam.name,
        force=frc.name,
        seed=int(seed),
        tol=float(tol),
    )


def restrict(snapshots: SnapshotSet, rect) -> SnapshotSet:
    """Keep only the rows of nodes inside the closed rectangle ``rect``."""
    rect = tuple(float(v) for v in (rect.rect if isinstance(rect, SubdomainMask) else rect))
    mesh = snapshots.mesh()
    outer = mesh.mask(*snapshots.rect)
    inner = mesh.mask(*rect)
    if not np.all(np.isin(inner.nodes, outer.nodes)):
        raise ValueError(f"mask {rect} is not contained in the snapshot region {snapshots.rect}")
    rows = np.searchsorted(outer.nodes, inner.nodes)
    return replace(snapshots, fields=snapshots.fields[rows], rect=rect)


def save(snapshots: SnapshotSet, path) -> None:
    """Write the PODS binary layout (little-endian throughout).

    Header: magic, version u32, n u32, N u64, r u64, force-param count u64,
    then a length-prefixed JSON-free metadata block (mask rect 4 f64, tol f64,
    seed u64, coeff/force names as u16-prefixed utf-8), parameters row-major,
    fields column-major.
    """
    s = snapshots
    r = s.xi.shape[1]
    q = s.theta.shape[1]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIQQQ", _VERSION, s.n, s.N, r, q))
        fh.write(struct.pack("<4ddQ", *s.rect, s.tol, s.seed & (2**64 - 1)))
        for name in (s.coeff, s.force):
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(np.ascontiguousarray(np.hstack([s.xi, s.theta]), dtype="<f8").tobytes())
        fh.write(np.asfortranarray(s.fields, dtype="<f8").tobytes(order="F"))


def load(path) -> SnapshotSet:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic, not a PODS snapshot file")
    head = struct.calcsize("<IIQQQ")
    if len(data) < 4 + head:
        raise ValueError(f"{path}: truncated header")
    version, n, N, r, q = struct.unpack_from("<IIQQQ", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported PODS version {version}")
    off = 4 + head
    meta = struct.calcsize("<4ddQ")
    if len(data) < off + meta:
        raise ValueError(f"{path}: truncated header")
    *rect, tol, seed = struct.unpack_from("<4ddQ", data, off)
    off += meta
    names = []
    for _ in range(2):
        if len(data) < off + 2:
            raise ValueError(f"{path}: truncated header")
        (ln,) = struct.unpack_from("<H", data, off)
        names.append(data[off + 2:off + 2 + ln].decode())
        off += 2 + ln
    rows = build_mesh(n).mask(*rect).size if tuple(rect) != FULL_RECT else (n + 1) ** 2
    need = 8 * (N * (r + q) + rows * N)
    if len(data) - off != need:
        raise ValueError(f"{path}: payload has {len(data) - off} bytes, expected {need}")
    params = np.frombuffer(data, "<f8", N * (r + q), off).reshape(N, r + q)
    off += 8 * N * (r + q)
    fields = np.frombuffer(data, "<f8", rows * N, off).reshape((rows, N), order="F")
    return SnapshotSet(
        n=n, xi=params[:, :r].copy(), theta=params[:, r:].copy(), fields=np.array(fields),
        rect=tuple(rect), coeff=names[0], force=names[1], seed=int(seed), tol=float(tol),
    )
