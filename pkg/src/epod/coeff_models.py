"""Random multiscale coefficient and force families.

Each coefficient family is a closed-form ``a(x, y; xi)`` driven by ``r``
i.i.d. uniform variables; force families may add their own parameters
``theta``.  Sampling uses Philox (a counter-based 64-bit generator) keyed by
``(seed, stream)`` so that sample ``i`` never depends on how many other
samples were drawn or in which order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CoeffFamily",
    "ForceFamily",
    "ParamVector",
    "NotAffineError",
    "coefficient_family",
    "force_family",
    "COEFF_FAMILIES",
    "FORCE_FAMILIES",
    "DEFAULT_FORCE",
    "D1",
    "D2",
    "sample_params",
    "stream_rng",
    "eval_coeff",
    "eval_force",
    "affine_terms",
    "coefficient_callable",
    "force_callable",
    "empirical_contrast",
]

# source strip and local region of interest, as (x0, x1, y0, y1)
D2 = (0.25, 0.75, 1.0 / 16.0, 5.0 / 16.0)
D1 = (0.25, 0.75, 11.0 / 16.0, 15.0 / 16.0)

COEFF_FAMILIES = ("ex1", "ex2", "interface", "ex3", "ex4")
FORCE_FAMILIES = ("trig_indicator_ex1", "trig_indicator_ex2", "gaussian_center", "random_trig")
DEFAULT_FORCE = {
    "ex1": "trig_indicator_ex1",
    "ex2": "trig_indicator_ex2",
    "interface": "trig_indicator_ex2",
    "ex3": "gaussian_center",
    "ex4": "random_trig",
}


class NotAffineError(ValueError):
    pass


@dataclass(frozen=True)
class CoeffFamily:
    name: str
    r: int
    low: float
    high: float
    eps: np.ndarray = field(repr=False)
    p: np.ndarray | None = field(default=None, repr=False)
    # interface family only: rectangle width, tied to the mesh step (10h)
    strip_width: float | None = None

    @property
    def bounds(self) -> np.ndarray:
        return np.tile([self.low, self.high], (self.r, 1))

    @property
    def is_affine(self) -> bool:
        return self.name == "ex1"

    def __call__(self, xi, x, y):
        return eval_coeff(self, xi, x, y)


@dataclass(frozen=True)
class ForceFamily:
    name: str
    bounds: np.ndarray = field(repr=False)
    sigma: float = 0.01

    @property
    def num_params(self) -> int:
        return len(self.bounds)


@dataclass(frozen=True)
class ParamVector:
    xi: np.ndarray
    theta: np.ndarray
    seed: int | None = None
    stream: int | None = None

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.xi, self.theta])


def coefficient_family(name: str, n: int = 64) -> CoeffFamily:
    """Look up a coefficient family; ``n`` only matters for ``interface``."""
    i = np.arange(1, 25, dtype=float)
    if name == "ex1":
        return CoeffFamily(
            "ex1", 5, 0.0, 1.0,
            eps=1.0 / np.array([47.0, 29.0, 53.0, 37.0, 41.0]),
            p=np.array([1.98, 1.96, 1.94, 1.92, 1.9]),
        )
    if name == "ex2":
        return CoeffFamily(
            "ex2", 8, -0.5, 0.5,
            eps=1.0 / np.array([43.0, 41.0, 47.0, 29.0, 37.0, 31.0, 53.0, 35.0]),
        )
    if name == "interface":
        k = i[:12]
        eps = np.where(k <= 6, (1.0 + k) / 100.0, (k + 13.0) / 100.0)
        return CoeffFamily("interface", 12, -2.0 / 3.0, 2.0 / 3.0, eps=eps, strip_width=10.0 / n)
    if name == "ex3":
        return CoeffFamily("ex3", 18, -0.2, 0.2, eps=1.0 / (2.0 * i[:18] + 9.0))
    if name == "ex4":
        return CoeffFamily("ex4", 24, -1.0 / 6.0, 1.0 / 6.0, eps=(1.0 + i) / 100.0)
    raise ValueError(f"unknown coefficient family {name!r}; choose from {COEFF_FAMILIES}")


def force_family(name: str) -> ForceFamily:
    if name in ("trig_indicator_ex1", "trig_indicator_ex2"):
        return ForceFamily(name, np.zeros((0, 2)))
    if name == "gaussian_center":
        return ForceFamily(name, np.array([[D2[0], D2[1]], [D2[2], D2[3]]]))
    if name == "random_trig":
        return ForceFamily(name, np.tile([0.0, 2.0], (4, 1)))
    raise ValueError(f"unknown force family {name!r}; choose from {FORCE_FAMILIES}")


def _as_coeff(family, n=64) -> CoeffFamily:
    return family if isinstance(family, CoeffFamily) else coefficient_family(family, n)


def _as_force(force) -> ForceFamily:
    return force if isinstance(force, ForceFamily) else force_family(force)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent Philox stream for snapshot index ``stream``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


def sample_params(family, force, rng_seed: int, count: int, start: int = 0) -> list[ParamVector]:
    """Draw ``count`` i.i.d. parameter vectors, one Philox stream per index."""
    if count < 1:
        raise ValueError("count must be >= 1")
    fam = _as_coeff(family)
    frc = _as_force(force)
    out = []
    for k in range(start, start + count):
        g = stream_rng(rng_seed, k)
        xi = g.uniform(fam.low, fam.high, size=fam.r)
        theta = g.uniform(frc.bounds[:, 0], frc.bounds[:, 1]) if frc.num_params else np.zeros(0)
        out.append(ParamVector(xi, theta, int(rng_seed), k))
    return out


def _ex1_ratios(fam: CoeffFamily, x, y):
    e, p = fam.eps, fam.p
    tp = 2.0 * np.pi
    s2, s5 = np.sqrt(2.0), np.sqrt(5.0)
    return [
        (2 + p[0] * np.sin(tp * x / e[0])) / (2 - p[0] * np.cos(tp * y / e[0])),
        (2 + p[1] * np.sin(tp * (x + y) / (s2 * e[1]))) / (2 - p[1] * np.sin(tp * (x - y) / (s2 * e[1]))),
        (2 + p[2] * np.cos(tp * (x - 0.5) / e[2])) / (2 - p[2] * np.cos(tp * (y - 0.5) / e[2])),
        (2 + p[3] * np.cos(tp * (x - y) / (s2 * e[3]))) / (2 - p[3] * np.sin(tp * (x + y) / (s2 * e[3]))),
        (2 + p[4] * np.cos(tp * (2 * x - y) / (s5 * e[4]))) / (2 - p[4] * np.sin(tp * (x + 2 * y) / (s5 * e[4]))),
    ]


def _plane_wave_exponent(x, y, xi, eps, angles):
    out = np.zeros(np.broadcast(x, y).shape)
    for k in range(len(eps)):
        out = out + np.sin(2.0 * np.pi * (x * np.sin(angles[k]) + y * np.cos(angles[k])) / eps[k]) * xi[k]
    return out


def _in_strips(fam: CoeffFamily, x, y):
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for x0 in (0.3, 0.5, 0.7):
        inside |= (x >= x0) & (x <= x0 + fam.strip_width) & (y >= 0.1) & (y <= 0.9)
    return inside


def eval_coeff(family, xi, x, y):
    """Evaluate ``a(x, y; xi)``; ``x`` and ``y`` may be arrays."""
    fam = _as_coeff(family)
    xi = np.asarray(xi.xi if isinstance(xi, ParamVector) else xi, dtype=float)
    if xi.shape != (fam.r,):
        raise ValueError(f"{fam.name} expects {fam.r} parameters, got shape {xi.shape}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if fam.name == "ex1":
        a = 0.1 + sum(t * w for t, w in zip(_ex1_ratios(fam, x, y), xi))
    elif fam.name == "ex2":
        i = np.arange(1, 9)
        s = np.zeros(np.broadcast(x, y).shape)
        for k in range(8):
            e = fam.eps[k]
            s = s + np.sin(2 * np.pi * (9 - i[k]) * x / (9 * e)) * np.cos(2 * np.pi * i[k] * y / (9 * e)) * xi[k]
        a = np.exp(s)
    elif fam.name == "interface":
        i = np.arange(1, 7)
        outer = np.exp(_plane_wave_exponent(x, y, xi[:6], fam.eps[:6], i * np.pi / 6))
        inner = np.exp(_plane_wave_exponent(x, y, xi[6:], fam.eps[6:], (i + 0.5) * np.pi / 6))
        a = np.where(_in_strips(fam, x, y), inner, outer)
    elif fam.name in ("ex3", "ex4"):
        i = np.arange(1, fam.r + 1)
        a = np.exp(_plane_wave_exponent(x, y, xi, fam.eps, i * np.pi / fam.r))
    else:
        raise ValueError(f"unknown coefficient family {fam.name!r}")
    assert np.all(a > 0), f"{fam.name} coefficient lost positivity"
    return a


def _indicator_d2(x, y):
    return ((x >= D2[0]) & (x <= D2[1]) & (y >= D2[2]) & (y <= D2[3])).astype(float)


def eval_force(force, theta, x, y):
    frc = _as_force(force)
    theta = np.asarray(theta.theta if isinstance(theta, ParamVector) else theta, dtype=float)
    if theta.shape != (frc.num_params,):
        raise ValueError(f"{frc.name} expects {frc.num_params} parameters, got shape {theta.shape}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if frc.name == "trig_indicator_ex1":
        return np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y) * _indicator_d2(x, y)
    if frc.name == "trig_indicator_ex2":
        return np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y) * _indicator_d2(x, y)
    if frc.name == "gaussian_center":
        s2 = frc.sigma**2
        r2 = (x - theta[0]) ** 2 + (y - theta[1]) ** 2
        return np.exp(-r2 / (2 * s2)) / (2 * np.pi * s2)
    if frc.name == "random_trig":
        t1, t2, t3, t4 = theta
        return np.sin(np.pi * (t1 * x + 2 * t2)) * np.cos(np.pi * (t3 * y + 2 * t4)) * _indicator_d2(x, y)
    raise ValueError(f"unknown force family {frc.name!r}")


def coefficient_callable(family, params) -> Callable:
    fam = _as_coeff(family)
    xi = params.xi if isinstance(params, ParamVector) else params
    return lambda x, y: eval_coeff(fam, xi, x, y)


def force_callable(force, params) -> Callable:
    frc = _as_force(force)
    theta = params.theta if isinstance(params, ParamVector) else params
    return lambda x, y: eval_force(frc, theta, x, y)


def affine_terms(family) -> list[tuple[Callable, Callable]]:
    """Split an affine coefficient into ``sum_n weight_n(xi) * a_n(x, y)``.

    Only ``ex1`` is affine: one constant term (weight 1) plus one oscillatory
    ratio per parameter (weight ``xi_i``).
    """
    fam = _as_coeff(family)
    if not fam.is_affine:
        raise NotAffineError(f"coefficient family {fam.name!r} has no affine decomposition")
    terms = [(lambda x, y: np.full(np.broadcast(x, y).shape, 0.1), lambda xi: 1.0)]
    for k in range(fam.r):
        terms.append(
            (
                lambda x, y, k=k: _ex1_ratios(fam, np.asarray(x, float), np.asarray(y, float))[k],
                lambda xi, k=k: float(xi[k]),
            )
        )
    return terms


def empirical_contrast(family, xs, ys, draws) -> tuple[float, float]:
    """Min and max of the coefficient over a point set and parameter draws."""
    lo, hi = np.inf, -np.inf
    for xi in draws:
        a = eval_coeff(family, xi, xs, ys)
        lo = min(lo, float(a.min()))
        hi = max(hi, float(a.max()))
    return lo, hi
