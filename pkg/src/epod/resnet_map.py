"""Residual tanh network mapping ``(xi, theta)`` to POD coefficients.

Layout, for a batch of row inputs ``x``::

    z   = 2 (x - lo) / (hi - lo) - 1
    h_1 = W_in z + b_in
    h_{l+1} = tanh(A_l h_l + b_l) + h_l        l = 1 .. depth-1
    c   = out_scale * (W_out h_depth + b_out)

All parameters live in one flat float64 vector so the optimiser and the
finite-difference checks can treat them uniformly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _binio

__all__ = [
    "ResNet",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "init_net",
    "forward",
    "loss",
    "loss_and_grad",
    "input_jacobian",
    "lipschitz_bound",
    "train",
    "save_net",
    "load_net",
]


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss became {value} in epoch {epoch}")
        self.epoch = epoch


class ResNet:
    """Parameter container with named views into ``params``."""

    def __init__(self, n_in: int, n_out: int, width: int = 50, depth: int = 4,
                 lo=None, hi=None, out_scale: float = 1.0, params=None):
        if min(n_in, n_out, width, depth) < 1:
            raise ValueError("network dimensions must be positive")
        self.n_in, self.n_out, self.width, self.depth = int(n_in), int(n_out), int(width), int(depth)
        self.lo = -np.ones(n_in) if lo is None else np.asarray(lo, dtype=float).copy()
        self.hi = np.ones(n_in) if hi is None else np.asarray(hi, dtype=float).copy()
        if np.any(self.hi <= self.lo):
            raise ValueError("input ranges must have hi > lo")
        self.out_scale = float(out_scale)
        self._shapes = [
            ("W_in", (width, n_in)),
            ("b_in", (width,)),
            ("A", (depth - 1, width, width)),
            ("b", (depth - 1, width)),
            ("W_out", (n_out, width)),
            ("b_out", (n_out,)),
        ]
        size = sum(int(np.prod(s)) for _, s in self._shapes)
        if params is None:
            params = np.zeros(size)
        params = np.asarray(params, dtype=float)
        if params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {params.shape}")
        self.params = params.copy()

    @property
    def num_params(self) -> int:
        return self.params.size

    def views(self, flat=None) -> dict[str, np.ndarray]:
        """Named reshaped views into ``flat`` (the parameters by default)."""
        flat = self.params if flat is None else flat
        out, off = {}, 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            out[name] = flat[off:off + size].reshape(shape)
            off += size
        return out

    def __getattr__(self, name):
        if name in ("W_in", "b_in", "A", "b", "W_out", "b_out"):
            return self.views()[name]
        raise AttributeError(name)

    def copy(self) -> "ResNet":
        return ResNet(self.n_in, self.n_out, self.width, self.depth, self.lo, self.hi, self.out_scale, self.params)

    def scale_inputs(self, x) -> np.ndarray:
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    width: int = 50
    depth: int = 4
    time_limit: float | None = None

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.eps <= 0:
            raise ValueError("invalid training configuration")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class TrainResult:
    net: ResNet
    history: np.ndarray = field(repr=False)
    seconds: float = 0.0


def init_net(n_in: int, n_out: int, seed: int = 0, width: int = 50, depth: int = 4,
             lo=None, hi=None, out_scale: float = 1.0) -> ResNet:
    """Uniform weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; zero biases."""
    net = ResNet(n_in, n_out, width, depth, lo, hi, out_scale)
    rng = np.random.default_rng(seed)
    v = net.views()
    for name in ("W_in", "A", "W_out"):
        fan_in = v[name].shape[-1]
        v[name][...] = rng.uniform(-1.0, 1.0, v[name].shape) / np.sqrt(fan_in)
    return net


def _check_inputs(net: ResNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.n_in:
        raise ValueError(f"network takes {net.n_in} inputs, got {X.shape[1]}")
    return X, single


def _forward_cache(net: ResNet, X):
    v = net.views()
    Z0 = net.scale_inputs(X)
    H = [Z0 @ v["W_in"].T + v["b_in"]]
    T = []
    for layer in range(net.depth - 1):
        t = np.tanh(H[-1] @ v["A"][layer].T + v["b"][layer])
        T.append(t)
        H.append(t + H[-1])
    out = net.out_scale * (H[-1] @ v["W_out"].T + v["b_out"])
    return out, (Z0, H, T, v)


def forward(net: ResNet, x) -> np.ndarray:
    X, single = _check_inputs(net, x)
    out = _forward_cache(net, X)[0]
    return out[0] if single else out


def loss(net: ResNet, X, Y) -> float:
    """``mean_n (1/K) |c_n - c_hat_n|^2``."""
    X, _ = _check_inputs(net, X)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if len(X) == 0:
        raise ValueError("empty batch")
    r = _forward_cache(net, X)[0] - Y
    return float(np.sum(r * r) / r.size)


def loss_and_grad(net: ResNet, X, Y) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the flat parameter vector."""
    X, _ = _check_inputs(net, X)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if len(X) == 0:
        raise ValueError("empty batch")
    out, (Z0, H, T, v) = _forward_cache(net, X)
    r = out - Y
    value = float(np.sum(r * r) / r.size)

    grad = np.zeros_like(net.params)
    g = net.views(grad)
    d_lin = (2.0 * net.out_scale / r.size) * r
    g["W_out"][...] = d_lin.T @ H[-1]
    g["b_out"][...] = d_lin.sum(axis=0)
    dH = d_lin @ v["W_out"]
    for layer in range(net.depth - 2, -1, -1):
        dZ = dH * (1.0 - T[layer] ** 2)
        g["A"][layer] = dZ.T @ H[layer]
        g["b"][layer] = dZ.sum(axis=0)
        dH = dH + dZ @ v["A"][layer]
    g["W_in"][...] = dH.T @ Z0
    g["b_in"][...] = dH.sum(axis=0)
    return value, grad


def input_jacobian(net: ResNet, x) -> np.ndarray:
    """``d c_hat / d x`` at a single input, shape (n_out, n_in)."""
    X, _ = _check_inputs(net, x)
    _, (Z0, H, T, v) = _forward_cache(net, X[:1])
    J = v["W_in"] * (2.0 / (net.hi - net.lo))
    for layer in range(net.depth - 1):
        J = J + (1.0 - T[layer][0] ** 2)[:, None] * (v["A"][layer] @ J)
    return net.out_scale * v["W_out"] @ J


def lipschitz_bound(net: ResNet) -> float:
    """Upper bound on the Euclidean Lipschitz constant of ``forward``."""
    v = net.views()
    L = abs(net.out_scale) * np.linalg.norm(v["W_out"], 2)
    for layer in range(net.depth - 1):
        L *= 1.0 + np.linalg.norm(v["A"][layer], 2)
    W = v["W_in"] * (2.0 / (net.hi - net.lo))
    return float(L * np.linalg.norm(W, 2))


def train(table, config: TrainConfig = TrainConfig(), bounds=None, net: ResNet | None = None,
          callback=None) -> TrainResult:
    """Adam on shuffled minibatches.

    ``bounds`` fixes the input rescaling (defaults to the data range).  The
    output scale is the RMS of the targets, so the weights stay order one
    whatever the magnitude of the coefficients.  ``history[e]`` is the mean
    minibatch loss seen during epoch ``e``.
    """
    X = np.asarray(table.inputs, dtype=float)
    Y = np.asarray(table.targets, dtype=float)
    if len(X) == 0:
        raise ValueError("empty training table")
    if net is None:
        if bounds is None:
            bounds = np.column_stack([X.min(axis=0), X.max(axis=0)])
        bounds = np.asarray(bounds, dtype=float)
        scale = float(np.sqrt(np.mean(Y * Y))) or 1.0
        net = init_net(X.shape[1], Y.shape[1], config.seed, config.width, config.depth,
                       bounds[:, 0], bounds[:, 1], scale)
    else:
        net = net.copy()
    rng = np.random.default_rng([config.seed, 1])
    m = np.zeros_like(net.params)
    s = np.zeros_like(net.params)
    step = 0
    history = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for lo in range(0, len(X), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            value, grad = loss_and_grad(net, X[idx], Y[idx])
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, value)
            step += 1
            m = config.beta1 * m + (1.0 - config.beta1) * grad
            s = config.beta2 * s + (1.0 - config.beta2) * grad * grad
            m_hat = m / (1.0 - config.beta1 ** step)
            s_hat = s / (1.0 - config.beta2 ** step)
            net.params -= config.lr * m_hat / (np.sqrt(s_hat) + config.eps)
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        if callback is not None:
            callback(epoch, history[-1], net)
        if config.time_limit is not None and time.perf_counter() - start > config.time_limit:
            break
    return TrainResult(net, np.array(history), time.perf_counter() - start)


def save_net(net: ResNet, path) -> None:
    dims = np.array([net.n_in, net.n_out, net.width, net.depth], dtype=float)
    _binio.write_arrays(path, b"PNET", 1, {
        "dims": dims, "lo": net.lo, "hi": net.hi,
        "out_scale": np.array([net.out_scale]), "params": net.params,
    })


def load_net(path) -> ResNet:
    _, a = _binio.read_arrays(path, b"PNET")
    n_in, n_out, width, depth = (int(d) for d in a["dims"])
    return ResNet(n_in, n_out, width, depth, a["lo"], a["hi"], float(a["out_scale"][0]), a["params"])
