"""Command-line harness: one subcommand per experiment, CSV plus metadata out.

Settings resolve as built-in defaults < YAML config file < ``EPOD_*``
environment variables < command-line flags.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from . import snapshots as snap
from .coeff_models import COEFF_FAMILIES, D1, D2, DEFAULT_FORCE, FORCE_FAMILIES, coefficient_callable, sample_params
from .galerkin_reduced import online_solve, online_solve_nonaffine, precompute_reduced, truncate_system
from .mesh_fem import build_mesh, relative_errors
from .online_maps import (
    build_grid_map, build_training_table, eval_grid, eval_knn_ls, eval_legendre, fit_legendre,
    input_bounds, load_map, save_map,
)
from .pod_basis import build_basis, energy_curve, load_basis, reconstruct, save_basis
from .resnet_map import TrainConfig, forward, load_net, save_net, train
from .sensing import reconstruct_from_measurements, select_sensors
from .separability import greens_block, singular_decay

FULL = (0.0, 1.0, 0.0, 1.0)

# name -> (type, default, help); names use underscores, flags use dashes
COMMON = {
    "model": (str, "ex1", f"coefficient family {COEFF_FAMILIES}"),
    "force": (str, None, f"force family {FORCE_FAMILIES} (default depends on the model)"),
    "n": (int, 64, "mesh intervals per side"),
    "samples": (int, 200, "training snapshots"),
    "seed": (int, 0, "random seed"),
    "k": (int, None, "number of POD modes (default: pick by --energy)"),
    "energy": (float, 0.9999, "energy threshold used when --k is absent"),
    "mask": (str, "local", "local (upper strip) or global (whole square)"),
    "out": (str, "runs", "output directory"),
    "tests": (int, 50, "test samples"),
    "workers": (int, 1, "threads for snapshot solves"),
    "tol": (float, 1e-10, "relative CG tolerance"),
    "snapshots": (str, None, "reuse a PODS snapshot file instead of solving"),
}
EXTRA = {
    "offline": {},
    "eigs": {"rows": (int, 50, "eigenvalues to report")},
    "map-build": {
        "kind": (str, "knn", "grid, legendre or knn"),
        "nodes_per_dim": (int, 5, "grid nodes per input dimension"),
        "grid_method": (str, "cubic", "cubic (tensor spline) or linear (multilinear)"),
        "degree": (int, 4, "total Legendre degree"),
        "neighbors": (int, 20, "neighbours for the local fit"),
    },
    "map-eval": {
        "map_file": (str, None, "PMAP file (default OUT/map.pmap)"),
        "basis_file": (str, None, "PODB file (default OUT/basis.podb)"),
    },
    "galerkin": {"trials": (int, 10, "test realisations")},
    "sensors": {"m": (int, None, "number of sensors M (default K)")},
    "nn-train": {
        "epochs": (int, 1500, "training epochs"),
        "lr": (float, 1e-3, "Adam learning rate"),
        "batch_size": (int, 128, "minibatch size"),
        "eval_every": (int, 50, "epochs between test evaluations"),
        "time_limit": (float, None, "stop after this many seconds"),
    },
    "nn-eval": {
        "model_file": (str, None, "PNET file (default OUT/model.pnet)"),
        "basis_file": (str, None, "PODB file (default OUT/basis.podb)"),
    },
    "separability": {
        "draws": (int, 10, "coefficient realisations"),
        "stride": (int, 4, "keep every stride-th source node"),
    },
    "bench": {"repeats": (int, 20, "online solves timed per realisation")},
}

# extra spellings accepted on the command line
ALIASES = {"model": ["--family"]}

DECISIONS = {
    "tensor_interpolation": "tensor not-a-knot cubic spline by default, multilinear on request",
    "sparse_grid_replacement": "least squares in the total-degree Legendre space",
    "knn_fallback": "inverse-distance weights when the local design is rank deficient",
    "optimizer": "Adam lr=1e-3 betas=(0.9,0.999) eps=1e-8 batch=128",
    "activation": "tanh residual blocks",
    "network_output_scale": "RMS of training coefficients",
    "rng": "numpy Philox keyed by (seed, sample index)",
    "local_mask": list(D1),
}


class ConfigError(ValueError):
    pass


def _options(command: str) -> dict:
    return {**COMMON, **EXTRA[command]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epod", description="Localized POD surrogate experiments.")
    parser.add_argument("--config", help="YAML file of option: value pairs")
    parser.add_argument("--version", action="version", version=f"epod {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for command in EXTRA:
        p = sub.add_parser(command, help=f"run the {command} experiment")
        p.add_argument("--config", default=argparse.SUPPRESS, help="YAML file of option: value pairs")
        for name, (typ, default, help_text) in _options(command).items():
            flag = "--" + name.replace("_", "-")
            shown = "" if default is None else f" [default {default}]"
            p.add_argument(flag, *ALIASES.get(name, []), dest=name, type=typ, default=argparse.SUPPRESS,
                           help=help_text + shown)
    return parser


def load_config(path) -> tuple[dict, dict]:
    """Read a flat YAML mapping; returns values and their line numbers."""
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        values = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{path}:{line}: {exc.problem}") from exc
    if values is None:
        return {}, {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path}:1: expected a mapping of option names to values")
    lines = {k.value.replace("-", "_"): k.start_mark.line + 1 for k, _ in node.value}
    return {str(k).replace("-", "_"): v for k, v in values.items()}, lines


def resolve(command: str, flags: dict, config: dict | None = None, lines: dict | None = None,
            environ=None, config_path="config") -> dict:
    opts = _options(command)
    config = config or {}
    lines = lines or {}
    environ = os.environ if environ is None else environ
    for key in config:
        if key not in opts:
            raise ConfigError(f"{config_path}:{lines.get(key, '?')}: unknown option {key!r} for {command}")
    out = {}
    for name, (typ, default, _) in opts.items():
        env_key = "EPOD_" + name.upper()
        if name in flags:
            value = flags[name]
        elif env_key in environ:
            try:
                value = typ(environ[env_key])
            except ValueError as exc:
                raise ConfigError(f"{env_key}: {exc}") from exc
        elif name in config:
            try:
                value = None if config[name] is None else typ(config[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{config_path}:{lines.get(name, '?')}: {name}: {exc}") from exc
        else:
            value = default
        out[name] = value
    if out["model"] not in COEFF_FAMILIES:
        raise ConfigError(f"unknown model {out['model']!r}; choose from {COEFF_FAMILIES}")
    if out["force"] is None:
        out["force"] = DEFAULT_FORCE[out["model"]]
    if out["force"] not in FORCE_FAMILIES:
        raise ConfigError(f"unknown force {out['force']!r}; choose from {FORCE_FAMILIES}")
    if out["mask"] not in ("local", "global"):
        raise ConfigError("--mask must be local or global")
    out["command"] = command
    return out


# ------------------------------------------------------------------ helpers


class Run:
    """Output directory, artifact list and invariant checks for one command."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.dir = Path(cfg["out"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.checks: dict[str, bool] = {}
        self.summary: dict = {}
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def check(self, name: str, ok) -> None:
        self.checks[name] = bool(ok)

    def finish(self) -> int:
        meta = {
            "command": self.cfg["command"],
            "config": self.cfg,
            "versions": {"epod": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "decisions": DECISIONS,
            "checks": self.checks,
            "summary": self.summary,
            "artifacts": self.files,
            "seconds": round(time.perf_counter() - self.start, 3),
        }
        (self.dir / f"{self.cfg['command']}.meta.json").write_text(json.dumps(meta, indent=2, default=_jsonable))
        failed = [k for k, ok in self.checks.items() if not ok]
        for k in failed:
            print(f"check failed: {k}", file=sys.stderr)
        return 1 if failed else 0


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return str(v)


def _rect(cfg) -> tuple:
    return D1 if cfg["mask"] == "local" else FULL


def _train_set(cfg):
    if cfg["snapshots"]:
        s = snap.load(cfg["snapshots"])
        if s.n != cfg["n"]:
            raise ValueError(f"snapshot file has n={s.n}, run asks for n={cfg['n']}")
        return s
    return snap.generate(cfg["model"], cfg["force"], cfg["n"], cfg["samples"], cfg["seed"],
                         tol=cfg["tol"], workers=cfg["workers"])


def _test_set(cfg, count=None):
    # test draws use the streams right after the training draws
    return snap.generate(cfg["model"], cfg["force"], cfg["n"], count or cfg["tests"], cfg["seed"],
                         tol=cfg["tol"], workers=cfg["workers"], start=cfg["samples"])


def _basis(cfg, train_set, mesh):
    mask = mesh.mask(*_rect(cfg))
    return build_basis(train_set, mask, K=cfg["k"], energy=cfg["energy"], mesh=mesh), mask


def _on_mask(s, mesh, mask):
    from .pod_basis import _rows_on_mask

    return _rows_on_mask(s, mesh, mask)


def _projection_errors(basis, mesh, mask, U):
    from .pod_basis import project

    return relative_errors(mesh, U, reconstruct(basis, project(U, basis)), mask, basis.mass)


# -------------------------------------------------------------- subcommands


def cmd_offline(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    s = _train_set(cfg)
    snap.save(s, run.path("snapshots.pods"))
    basis, _ = _basis(cfg, s, mesh)
    save_basis(basis, run.path("basis.podb"))
    lam = basis.eigenvalues
    curve = energy_curve(lam)
    run.csv("eigenvalues.csv", ["n", "lambda", "energy"], ((i + 1, lam[i], curve[i + 1]) for i in range(len(lam))))
    run.check("eigenvalues_non_increasing", np.all(np.diff(lam) <= 1e-12 * lam[0]))
    run.summary.update(K=basis.K, N=s.N)


def cmd_eigs(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    s = _train_set(cfg)
    basis, _ = _basis(cfg, s, mesh)
    lam = basis.eigenvalues
    curve = energy_curve(lam)
    rows = min(cfg["rows"], len(lam))
    run.csv("eigs.csv", ["n", "lambda", "energy"], ((i + 1, lam[i], curve[i + 1]) for i in range(rows)))
    run.check("eigenvalues_non_increasing", np.all(np.diff(lam) <= 1e-12 * lam[0]))
    reach = np.nonzero(curve >= 0.99)[0]
    run.summary.update(K=basis.K, first_n_energy_099=int(reach[0]) if reach.size else None)


def cmd_map_build(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    s = _train_set(cfg)
    basis, mask = _basis(cfg, s, mesh)
    t0 = time.perf_counter()
    kind = cfg["kind"]
    if kind == "grid":
        obj = build_grid_map(cfg["model"], cfg["force"], mesh, basis, cfg["nodes_per_dim"],
                             tol=cfg["tol"], workers=cfg["workers"], method=cfg["grid_method"])
        count = obj.num_nodes
    else:
        table = build_training_table(s, basis)
        count = len(table)
        if kind == "legendre":
            obj = fit_legendre(table, cfg["degree"], bounds=input_bounds(cfg["model"], cfg["force"]))
        elif kind == "knn":
            obj = table
        else:
            raise ValueError(f"unknown map kind {kind!r}; choose grid, legendre or knn")
    seconds = time.perf_counter() - t0
    save_basis(basis, run.path("basis.podb"))
    save_map(obj, run.path("map.pmap"), n_neighbors=cfg["neighbors"])
    run.csv("map_build.csv", ["kind", "K", "training_points", "build_seconds"], [(kind, basis.K, count, seconds)])
    run.check("map_saved", (run.dir / "map.pmap").stat().st_size > 0)
    run.summary.update(kind=kind, K=basis.K)


def _eval_map(kind, obj, X):
    flags = np.zeros(len(X), dtype=bool)
    if kind == "grid":
        C, flags = eval_grid(obj, X, return_flag=True)
    elif kind == "legendre":
        C = eval_legendre(obj, X)
    else:
        tree, table, k = obj
        C = np.empty((len(X), table.K))
        for i, x in enumerate(X):
            C[i], flags[i] = eval_knn_ls(tree, table, x, k, return_flag=True)
    return C, flags


def cmd_map_eval(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    basis = load_basis(cfg["basis_file"] or run.dir / "basis.podb")
    kind, obj = load_map(cfg["map_file"] or run.dir / "map.pmap")
    mask = mesh.mask(*basis.rect)
    tests = _test_set(cfg)
    U = _on_mask(tests, mesh, mask)
    C, flags = _eval_map(kind, obj, tests.inputs)
    l2, h1 = relative_errors(mesh, U, reconstruct(basis, C.T), mask, basis.mass)
    pl2, ph1 = _projection_errors(basis, mesh, mask, U)
    run.csv("map_eval.csv", ["test", "rel_l2", "rel_h1", "proj_l2", "proj_h1", "flagged"],
            zip(range(len(l2)), l2, h1, pl2, ph1, flags.astype(int)))
    run.check("errors_finite", np.all(np.isfinite(l2)) and np.all(np.isfinite(h1)))
    run.summary.update(kind=kind, K=basis.K, mean_rel_l2=float(l2.mean()), mean_rel_h1=float(h1.mean()),
                       mean_proj_l2=float(pl2.mean()), flagged=int(flags.sum()))


def cmd_galerkin(cfg, run: Run):
    cfg["mask"] = "global"
    mesh = build_mesh(cfg["n"])
    s = _train_set(cfg)
    if cfg["k"] is None:
        cfg["k"] = 15
    basis, mask = _basis(cfg, s, mesh)
    full = precompute_reduced(basis, cfg["model"], cfg["force"], mesh)
    params = sample_params(cfg["model"], cfg["force"], cfg["seed"], cfg["trials"], start=cfg["samples"])
    refs, fem_t = [], []
    for p in params:
        t0 = time.perf_counter()
        refs.append(snap.solve_params(mesh, cfg["model"], cfg["force"], p, cfg["tol"]))
        fem_t.append(time.perf_counter() - t0)
    refs = np.column_stack(refs)
    rows = []
    for K in range(1, basis.K + 1):
        system = truncate_system(full, K)
        C, on_t = [], []
        for p in params:
            t0 = time.perf_counter()
            if system.is_affine:
                c = online_solve(system, p, mesh=mesh)
            else:
                c = online_solve_nonaffine(system.basis, cfg["model"], p, cfg["force"], mesh)
            on_t.append(time.perf_counter() - t0)
            C.append(c)
        l2, h1 = relative_errors(mesh, refs, reconstruct(system.basis, np.column_stack(C)), mask, basis.mass)
        rows.append((K, l2.mean(), h1.mean(), np.mean(on_t), np.mean(fem_t)))
    run.csv("galerkin.csv", ["K", "mean_rel_l2", "mean_rel_h1", "mean_online_s", "mean_fem_s"], rows)
    if full.is_affine:
        p = params[0]
        a = online_solve(full, p, mesh=mesh)
        b = online_solve_nonaffine(basis, cfg["model"], p, cfg["force"], mesh)
        run.check("affine_matches_full_assembly", np.abs(a - b).max() <= 1e-8 * np.abs(b).max())
    run.summary.update(K=basis.K, final_rel_l2=rows[-1][1])


def cmd_sensors(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    s = _train_set(cfg)
    basis, mask = _basis(cfg, s, mesh)
    M = cfg["m"] or basis.K
    sensors = select_sensors(basis, M)
    xy = mesh.nodes[sensors.nodes]
    run.csv("sensors.csv", ["sensor", "node", "x", "y"],
            ((i, int(nd), xy[i, 0], xy[i, 1]) for i, nd in enumerate(sensors.nodes)))
    tests = _test_set(cfg)
    U = _on_mask(tests, mesh, mask)
    R = np.column_stack([reconstruct_from_measurements(basis, sensors, U[sensors.indices, j]) for j in range(U.shape[1])])
    l2, h1 = relative_errors(mesh, U, R, mask, basis.mass)
    pl2, _ = _projection_errors(basis, mesh, mask, U)
    run.csv("sensors_eval.csv", ["test", "rel_l2", "rel_h1", "proj_l2"], zip(range(len(l2)), l2, h1, pl2))
    run.check("measurement_matrix_full_rank", np.linalg.matrix_rank(sensors.B) == basis.K)
    run.summary.update(K=basis.K, M=M, mean_rel_l2=float(l2.mean()), mean_proj_l2=float(pl2.mean()))


def _nn_setup(cfg, mesh):
    s = _train_set(cfg)
    basis, mask = _basis(cfg, s, mesh)
    return s, basis, mask


def cmd_nn_train(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    s, basis, mask = _nn_setup(cfg, mesh)
    table = build_training_table(s, basis)
    tests = _test_set(cfg)
    U = _on_mask(tests, mesh, mask)

    def test_error(net):
        C = forward(net, tests.inputs)
        return relative_errors(mesh, U, reconstruct(basis, C.T), mask, basis.mass)

    log = {}

    def callback(epoch, value, net):
        if (epoch + 1) % cfg["eval_every"] == 0:
            l2, h1 = test_error(net)
            log[epoch] = (l2.mean(), h1.mean())

    config = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                         seed=cfg["seed"], time_limit=cfg["time_limit"])
    result = train(table, config, bounds=input_bounds(cfg["model"], cfg["force"]), callback=callback)
    save_net(result.net, run.path("model.pnet"))
    save_basis(basis, run.path("basis.podb"))
    run.csv("loss_history.csv", ["epoch", "loss", "test_rel_l2", "test_rel_h1"],
            ((e + 1, v, *log.get(e, ("", ""))) for e, v in enumerate(result.history)))
    l2, h1 = test_error(result.net)
    run.check("loss_finite", np.all(np.isfinite(result.history)))
    run.summary.update(K=basis.K, epochs=len(result.history), train_seconds=result.seconds,
                       mean_rel_l2=float(l2.mean()), mean_rel_h1=float(h1.mean()))


def cmd_nn_eval(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    net = load_net(cfg["model_file"] or run.dir / "model.pnet")
    basis = load_basis(cfg["basis_file"] or run.dir / "basis.podb")
    mask = mesh.mask(*basis.rect)
    tests = _test_set(cfg)
    U = _on_mask(tests, mesh, mask)
    l2, h1 = relative_errors(mesh, U, reconstruct(basis, forward(net, tests.inputs).T), mask, basis.mass)
    run.csv("nn_eval.csv", ["test", "rel_l2", "rel_h1"], zip(range(len(l2)), l2, h1))
    run.check("errors_finite", np.all(np.isfinite(l2)))
    run.summary.update(mean_rel_l2=float(l2.mean()), mean_rel_h1=float(h1.mean()))


def cmd_separability(cfg, run: Run):
    mesh = build_mesh(cfg["n"])
    target, source = mesh.mask(*D1), mesh.mask(*D2)
    rows, ratio10 = [], []
    for d, p in enumerate(sample_params(cfg["model"], cfg["force"], cfg["seed"], cfg["draws"])):
        block = greens_block(mesh, coefficient_callable(cfg["model"], p), target, source, cfg["stride"], cfg["tol"])
        sigma = singular_decay(block)
        rows += [(d, k + 1, sigma[k], sigma[k] / sigma[0]) for k in range(min(30, len(sigma)))]
        if len(sigma) >= 10:
            ratio10.append(sigma[9] / sigma[0])
    run.csv("separability.csv", ["draw", "k", "sigma", "ratio"], rows)
    run.check("sigma10_below_1e-4", ratio10 and max(ratio10) < 1e-4)
    run.summary.update(max_ratio_k10=max(ratio10) if ratio10 else None)


def cmd_bench(cfg, run: Run):
    cfg["mask"] = "global"
    if cfg["k"] is None:
        cfg["k"] = 15
    mesh = build_mesh(cfg["n"])
    s = _train_set(cfg)
    basis, _ = _basis(cfg, s, mesh)
    system = precompute_reduced(basis, cfg["model"], cfg["force"], mesh)
    params = sample_params(cfg["model"], cfg["force"], cfg["seed"], 3, start=cfg["samples"])
    online, fem = [], []
    for p in params:
        t0 = time.perf_counter()
        for _ in range(cfg["repeats"]):
            if system.is_affine:
                online_solve(system, p, mesh=mesh)
            else:
                online_solve_nonaffine(basis, cfg["model"], p, cfg["force"], mesh)
        online.append((time.perf_counter() - t0) / cfg["repeats"])
        t0 = time.perf_counter()
        snap.solve_params(mesh, cfg["model"], cfg["force"], p, cfg["tol"])
        fem.append(time.perf_counter() - t0)
    ratio = np.mean(fem) / np.mean(online)
    run.csv("bench.csv", ["n", "K", "online_s", "fem_s", "ratio"], [(cfg["n"], basis.K, np.mean(online), np.mean(fem), ratio)])
    run.check("online_at_least_10x_faster", ratio >= 10.0)
    run.summary.update(ratio=float(ratio))


COMMANDS = {
    "offline": cmd_offline,
    "eigs": cmd_eigs,
    "map-build": cmd_map_build,
    "map-eval": cmd_map_eval,
    "galerkin": cmd_galerkin,
    "sensors": cmd_sensors,
    "nn-train": cmd_nn_train,
    "nn-eval": cmd_nn_eval,
    "separability": cmd_separability,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        config, lines = load_config(config_path) if config_path else ({}, {})
        cfg = resolve(command, args, config, lines, config_path=config_path or "config")
    except (ConfigError, OSError) as exc:
        print(f"epod: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg)
    try:
        COMMANDS[command](cfg, run)
    except Exception as exc:  # report with context rather than a bare traceback
        print(f"epod {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    status = run.finish()
    print(json.dumps({"command": command, "status": status, **run.summary}, default=_jsonable))
    return status


if __name__ == "__main__":
    raise SystemExit(main())
