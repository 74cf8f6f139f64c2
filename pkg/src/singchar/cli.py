"""Config-driven scenario runner.

    singchar run <config.json> [--out DIR] [--threads N]
    singchar fixtures list
    singchar verify --suite {fast,full}

Exit codes: 0 success, 1 assertion failure, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

SCHEMA_VERSION = 1
TASKS = ("characteristic", "weak-kam", "transport", "verify")
TOP_KEYS = {"schema_version", "task", "fixture", "model", "phi", "seed", "params", "assertions", "output"}
MODEL_KEYS = {"kind", "dim", "potential"}
POTENTIAL_KEYS = {"modes", "cos", "sin", "const"}
PHI_KEYS = {"fixture", "pieces", "dim", "eps_act"}
ASSERT_KEYS = {"max", "min", "target", "tol"}

DEFAULTS = {
    "characteristic": {"method": "euler", "x0": [0.3], "T": 1.0, "h": 2.0 ** -10,
                       "k_schedule": [100.0, 300.0, 1000.0], "widths": [2.0 ** -6, 2.0 ** -7, 2.0 ** -8],
                       "cauchy_tol": 2e-2, "weak_kam_grid": 256, "weak_kam_h": 0.05},
    "weak-kam": {"grid": 512, "h": 0.05, "tol": 1e-9, "max_iter": 5000},
    "transport": {"particles": 10000, "T": 5.0, "h": 2.0 ** -9, "init": "lattice", "deltas": [0.01, 0.005],
                  "snapshot_every": 0.5, "weak_kam_grid": 256, "weak_kam_h": 0.05},
    "verify": {"samples": 200, "x0": None, "T": 1.0, "h": 2.0 ** -9, "edi_tol": 5e-3, "gc_tol": 1e-3},
}

logger = logging.getLogger("singchar")


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _config_error(msg):
    from .errors import ConfigError
    return ConfigError(msg)


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise _config_error(f"{where} must be an object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise _config_error(f"unknown keys in {where}: {', '.join(extra)}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise _config_error(f"cannot read config: {exc}") from exc
    return validate_config(cfg)


def validate_config(cfg) -> dict:
    _check_keys(cfg, TOP_KEYS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise _config_error(f"schema_version must be {SCHEMA_VERSION}")
    task = cfg.get("task")
    if task not in TASKS:
        raise _config_error(f"task must be one of {', '.join(TASKS)}")
    if "fixture" not in cfg and "model" not in cfg:
        raise _config_error("either fixture or model is required")
    if "fixture" in cfg:
        from .fixtures import FIXTURE_NAMES
        if not isinstance(cfg["fixture"], str) or cfg["fixture"].upper() not in FIXTURE_NAMES:
            raise _config_error(f"unknown fixture {cfg['fixture']!r}")
    if "model" in cfg:
        m = cfg["model"]
        _check_keys(m, MODEL_KEYS, "model")
        if m.get("kind") not in ("mechanical", "quartic"):
            raise _config_error("model.kind must be mechanical or quartic")
        if int(m.get("dim", 1)) not in (1, 2):
            raise _config_error("model.dim must be 1 or 2")
        _check_keys(m.get("potential", {}), POTENTIAL_KEYS, "model.potential")
    phi = cfg.get("phi")
    if phi is not None and phi != "solve-weak-kam":
        _check_keys(phi, PHI_KEYS, "phi")
        if ("fixture" in phi) == ("pieces" in phi):
            raise _config_error("phi needs exactly one of fixture, pieces")
        for i, pc in enumerate(phi.get("pieces", [])):
            _check_keys(pc, POTENTIAL_KEYS, f"phi.pieces[{i}]")
    if phi is None and "fixture" not in cfg and task != "weak-kam":
        raise _config_error("phi is required without a fixture")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise _config_error("seed must be an integer")
    params = cfg.get("params", {})
    _check_keys(params, DEFAULTS[task], "params")
    asserts = cfg.get("assertions", {})
    if not isinstance(asserts, dict):
        raise _config_error("assertions must be an object")
    for name, spec in asserts.items():
        _check_keys(spec, ASSERT_KEYS, f"assertions.{name}")
        if ("target" in spec) != ("tol" in spec):
            raise _config_error(f"assertions.{name}: target and tol go together")
    out = dict(cfg)
    out["params"] = {**DEFAULTS[task], **params}
    out["seed"] = seed
    return out


def build_problem(cfg):
    """(model, phi or None, fixture or None) from a validated config."""
    from .fixtures import fixture
    from .hamiltonian import TrigPotential, model_from_spec
    from .semiconcave import MinSmoothFn, trig_piece

    fx = fixture(cfg["fixture"]) if "fixture" in cfg else None
    model = model_from_spec(cfg["model"]) if "model" in cfg else fx.model
    phi_cfg = cfg.get("phi")
    if phi_cfg is None:
        phi = fx.phi if fx is not None else None
    elif phi_cfg == "solve-weak-kam":
        phi = None
    elif "fixture" in phi_cfg:
        phi = fixture(phi_cfg["fixture"]).phi
    else:
        dim = int(phi_cfg.get("dim", model.dim))
        pieces = [trig_piece(TrigPotential.from_spec(pc, dim), f"piece{i}") for i, pc in enumerate(phi_cfg["pieces"])]
        phi = MinSmoothFn(pieces, dim=dim, eps_act=float(phi_cfg.get("eps_act", 1e-9)), name="config")
    if phi is not None and phi.dim != model.dim:
        raise _config_error("phi and model dimensions differ")
    return model, phi, fx


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def _solve_phi(model, params, record):
    from .geometry import Grid
    from .laxoleinik import weak_kam_solve

    n = int(params["weak_kam_grid"])
    wk = weak_kam_solve(model, Grid((n,) * model.dim), float(params["weak_kam_h"]))
    record["weak_kam"] = {"c": wk.c, "residual": wk.residual, "iterations": wk.iterations}
    return wk.wrapper(model)


def task_characteristic(model, phi, fx, cfg, out: Path, record: dict) -> dict:
    import numpy as np

    from .characteristics import (edi_residual, energy_profile, gc_membership, integrate_euler,
                                  integrate_intrinsic, integrate_mollified)

    p = cfg["params"]
    if phi is None:
        phi = _solve_phi(model, p, record)
    x0 = np.asarray(p["x0"], dtype=float)
    if x0.shape != (model.dim,):
        raise _config_error("params.x0 must have model.dim entries")
    method = p["method"]
    if method == "euler":
        run = integrate_euler(model, phi, x0, float(p["T"]), float(p["h"]))
    elif method == "mollified":
        run = integrate_mollified(model, phi, x0, float(p["T"]), p["k_schedule"], float(p["h"]),
                                  tol=float(p["cauchy_tol"]))
    elif method == "intrinsic":
        run = integrate_intrinsic(model, phi, x0, float(p["T"]), p["widths"], tol=float(p["cauchy_tol"]))
    else:
        raise _config_error("params.method must be euler, mollified or intrinsic")
    run.to_csv(out / "characteristic.csv")
    edi, signed = edi_residual(model, phi, run, signed=True)
    ep = energy_profile(model, phi, run)
    metrics = {"edi_residual": edi, "edi_signed": signed, "max_increase_rate": ep["max_increase_rate"],
               "lambda_hat": ep["lambda_hat"], "final_x": run.curve.points[-1].tolist()}
    if method == "euler":
        metrics["gc_gap"] = gc_membership(model, phi, run)["max_inclusion_gap"]
    metrics.update({k: v for k, v in run.diagnostics.items() if isinstance(v, (int, float))})
    record["csv"] = ["characteristic.csv"]
    return metrics


def task_weak_kam(model, phi, fx, cfg, out: Path, record: dict) -> dict:
    import numpy as np

    from .geometry import Grid
    from .laxoleinik import hj_residual, weak_kam_solve

    p = cfg["params"]
    grid = Grid((int(p["grid"]),) * model.dim)
    wk = weak_kam_solve(model, grid, float(p["h"]), tol=float(p["tol"]), max_iter=int(p["max_iter"]))
    wk.u.to_csv(out / "weak_kam.csv")
    res, _ = hj_residual(model, wk)
    metrics = {"c": wk.c, "fixed_point_residual": wk.residual, "iterations": wk.iterations,
               "hj_residual": float(np.nanmax(res)) if np.any(np.isfinite(res)) else 0.0}
    if fx is not None and fx.weak_kam and fx.phi.dim == model.dim and "model" not in cfg:
        exact = fx.phi.value(grid.nodes)
        diff = wk.u.values - exact
        metrics["sup_error_closed_form"] = float(np.max(np.abs(diff - np.mean(diff))))
        metrics["sup_error_anchored"] = float(np.max(np.abs(diff - diff[0])))
    record["csv"] = ["weak_kam.csv"]
    return metrics


def task_transport(model, phi, fx, cfg, out: Path, record: dict) -> dict:
    from .laxoleinik import default_speed_bound
    from .transport import ParticleCloud, aggregate_edi, ce_residual, energy_averages, evolve_cloud, mass_monotonicity

    p = cfg["params"]
    if phi is None:
        phi = _solve_phi(model, p, record)
    seed = cfg["seed"] if p["init"] == "random" else None
    if p["init"] not in ("lattice", "random"):
        raise _config_error("params.init must be lattice or random")
    cloud = ParticleCloud.uniform(int(p["particles"]), model.dim, seed=seed)
    evo = evolve_cloud(model, phi, cloud, float(p["T"]), float(p["h"]), snapshot_every=float(p["snapshot_every"]))
    evo.to_csv(out / "cloud.csv")
    ce = ce_residual(model, phi, evo)
    edi = aggregate_edi(evo)
    en = energy_averages(model, phi, evo)
    speed = default_speed_bound(model, phi.lipschitz_constant)
    masses = [mass_monotonicity(phi, evo, float(d), speed=speed) for d in p["deltas"]]
    record["csv"] = ["cloud.csv"]
    return {"ce_residual": ce["max_residual"], "ce_times": ce["times"], "aggregate_edi": edi["residual"],
            "energy_max_excess": en["max_excess"],
            "mass_violations": int(sum(m["violations"] for m in masses)),
            "masses": {str(m["delta"]): m["mass"] for m in masses}}


def verify_fixture(model, phi, fx, params, seed: int = 0) -> dict:
    """Invariant suites on one (model, phi) pair; each entry has a pass flag."""
    import numpy as np

    from .characteristics import edi_residual, energy_profile, fenchel_check, gc_membership, integrate_euler
    from .geometry import torus_distance
    from .hamiltonian import hamiltonian_flow
    from .selection import minimal_energy_selection
    from .semiconcave import mollify, semiconcavity_check, superdifferential
    from .simplex import hull_distance

    rng = np.random.default_rng(seed)
    n = int(params["samples"])
    d = model.dim
    suites = {}
    sc = semiconcavity_check(phi, n, seed=seed)
    suites["semiconcavity"] = {"value": sc["max_violation"], "passed": sc["max_violation"] <= 1e-9}
    xs = rng.random((n, d))
    k = 100.0
    gap = float(np.max(phi.value(xs) - mollify(phi, k).value(xs)))
    bound = np.log(phi.n_pieces) / k
    suites["mollify_bound"] = {"value": gap, "passed": -1e-12 <= gap <= bound + 1e-12}
    worst_hull, worst_energy, worst_fenchel = 0.0, 0.0, 0.0
    for x in xs[: min(n, 50)]:
        sel = minimal_energy_selection(model, phi, x)
        V = superdifferential(phi, x).vertices
        worst_hull = max(worst_hull, hull_distance(sel.p_sharp, V) if len(V) > 1 else
                         float(np.linalg.norm(sel.p_sharp - V[0])))
        worst_energy = max(worst_energy, sel.h_value - float(np.min(model.H(np.broadcast_to(x, V.shape), V))))
        worst_fenchel = max(worst_fenchel, fenchel_check(model, phi, x)["gap"])
    suites["selection_in_hull"] = {"value": worst_hull, "passed": worst_hull <= 1e-9}
    suites["selection_energy"] = {"value": worst_energy, "passed": worst_energy <= 1e-12}
    suites["fenchel"] = {"value": worst_fenchel, "passed": worst_fenchel <= 1e-8}
    x0 = np.asarray(params["x0"] if params["x0"] is not None else [0.3] * d, dtype=float)
    p0 = np.asarray(rng.normal(size=d))
    st = hamiltonian_flow(model, x0, p0, 0.5, steps=1000)[-1]
    back = hamiltonian_flow(model, st.x, st.p, -0.5, steps=1000)[-1]
    rev = float(torus_distance(back.x, x0))
    suites["flow_reversibility"] = {"value": rev, "passed": rev <= 1e-8}
    run = integrate_euler(model, phi, x0, float(params["T"]), float(params["h"]))
    edi = edi_residual(model, phi, run)
    suites["edi"] = {"value": edi, "passed": edi <= float(params["edi_tol"])}
    gc = gc_membership(model, phi, run)["max_inclusion_gap"]
    suites["gc_membership"] = {"value": gc, "passed": gc <= float(params["gc_tol"])}
    ep = energy_profile(model, phi, run)
    suites["energy_rate"] = {"value": ep["max_increase_rate"], "passed": not ep["violation"]}
    return suites


def task_verify(model, phi, fx, cfg, out: Path, record: dict) -> dict:
    if phi is None:
        raise _config_error("verify needs phi")
    suites = verify_fixture(model, phi, fx, cfg["params"], cfg["seed"])
    _write_rows(out / "verify.csv", ["suite", "value", "passed"],
                [[k, _fmt(v["value"]), str(bool(v["passed"])).lower()] for k, v in suites.items()])
    record["csv"] = ["verify.csv"]
    return {"suites": suites, "all_passed": all(v["passed"] for v in suites.values())}


TASK_FUNCS = {"characteristic": task_characteristic, "weak-kam": task_weak_kam, "transport": task_transport,
              "verify": task_verify}


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


PLOT_TEMPLATE = '''"""Plots for this run; needs matplotlib."""
import csv
import matplotlib.pyplot as plt

FILES = {files!r}


def load(name):
    with open(name) as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [r[k] for r in rows] for k in rows[0]}} if rows else {{}}


for name in FILES:
    data = load(name)
    keys = list(data)
    fig, ax = plt.subplots()
    if name == "characteristic.csv":
        t = [float(v) for v in data["t"]]
        for k in keys:
            if k.startswith("x_"):
                ax.plot(t, [float(v) for v in data[k]], label=k)
        ax.set_xlabel("t")
    elif name == "weak_kam.csv":
        ax.plot([float(v) for v in data["value"]])
        ax.set_xlabel("node")
    elif name == "cloud.csv":
        ax.scatter([float(v) for v in data["t"]], [float(v) for v in data["x_0"]], s=1)
        ax.set_xlabel("t")
    else:
        ax.bar(data[keys[0]], [float(v) for v in data[keys[1]]])
        ax.set_yscale("log")
    ax.legend() if ax.get_legend_handles_labels()[0] else None
    fig.savefig(name.replace(".csv", ".png"), dpi=120)
'''


def _check_assertions(asserts: dict, metrics: dict) -> list[str]:
    failures = []
    for name, spec in sorted(asserts.items()):
        if name not in metrics or not isinstance(metrics[name], (int, float, bool)):
            failures.append(f"{name}: metric not available")
            continue
        v = float(metrics[name])
        if "max" in spec and not v <= spec["max"]:
            failures.append(f"{name}={v:.6g} > {spec['max']}")
        if "min" in spec and not v >= spec["min"]:
            failures.append(f"{name}={v:.6g} < {spec['min']}")
        if "target" in spec and not abs(v - spec["target"]) <= spec["tol"]:
            failures.append(f"{name}={v:.6g} not within {spec['tol']} of {spec['target']}")
    return failures


def _origin(exc) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(tb):
        parts = Path(frame.filename).parts
        if "singchar" in parts:
            return f"{Path(frame.filename).stem}.{frame.name}"
    return "unknown"


def run_scenario(config_path, out_dir=None, threads: int | None = None) -> int:
    """Run one config; returns the process exit code."""
    from .errors import ConfigError, SingCharError

    try:
        cfg = load_config(config_path)
        if "SINGCHAR_SEED" in os.environ:
            try:
                cfg["seed"] = int(os.environ["SINGCHAR_SEED"])
            except ValueError as exc:
                raise _config_error("SINGCHAR_SEED must be an integer") from exc
        out = Path(out_dir or cfg.get("output") or "singchar_out")
        out.mkdir(parents=True, exist_ok=True)
        model, phi, fx = build_problem(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code

    from .action import t_max
    from .laxoleinik import default_speed_bound

    record = {"schema_version": SCHEMA_VERSION, "config": cfg, "seed": cfg["seed"], "threads": threads,
              "model": model.spec}
    status = 0
    try:
        speed = default_speed_bound(model, phi.lipschitz_constant if phi is not None else None)
        record["speed_bound"] = speed
        record["t_max"] = t_max(model, speed)
        record["tolerances"] = {"eps_act": phi.eps_act if phi is not None else 1e-9,
                                **{k: v for k, v in cfg["params"].items() if "tol" in k},
                                "calibration": 1e-5, "singular_hull": 1e-7}
        metrics = TASK_FUNCS[cfg["task"]](model, phi, fx, cfg, out, record)
        failures = _check_assertions(cfg.get("assertions", {}), metrics)
        if cfg["task"] == "verify" and not metrics["all_passed"]:
            failures.append("invariant suite failed")
        record["metrics"] = metrics
        record["assertion_failures"] = failures
        status = 1 if failures else 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SingCharError as exc:
        where = _origin(exc)
        record["error"] = {"type": type(exc).__name__, "where": where, "message": str(exc)}
        print(f"{type(exc).__name__} in {where}: {exc}", file=sys.stderr)
        status = exc.exit_code
    record["status"] = status
    with open(out / "run.json", "w") as fh:
        json.dump(_jsonable(record), fh, indent=2, sort_keys=True)
        fh.write("\n")
    (out / "plot.py").write_text(PLOT_TEMPLATE.format(files=record.get("csv", [])))
    return status


def list_fixtures() -> int:
    from .fixtures import FIXTURE_NAMES, fixture

    for name in FIXTURE_NAMES:
        print(f"{name}\t{fixture(name).description}")
    return 0


def verify_suite(suite: str) -> int:
    """Invariant suites over the packaged fixtures; exit 1 on any failure."""
    from .fixtures import fixture

    names = ("F1", "F2", "F3") if suite == "fast" else ("F1", "F1U", "F2", "F3", "F4", "F5")
    params = dict(DEFAULTS["verify"])
    if suite == "fast":
        params.update(samples=100, T=0.5)
    ok = True
    for name in names:
        fx = fixture(name)
        p = dict(params)
        if name == "F4":
            p["x0"] = [0.25, 0.1]
        suites = verify_fixture(fx.model, fx.phi, fx, p)
        for key, v in suites.items():
            ok &= bool(v["passed"])
            print(f"{name} {key:20s} {'PASS' if v['passed'] else 'FAIL'} {v['value']:.3e}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="singchar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    pr = sub.add_parser("run", help="run a scenario config")
    pr.add_argument("config")
    pr.add_argument("--out", default=None)
    pr.add_argument("--threads", type=int, default=None)
    pf = sub.add_parser("fixtures", help="packaged fixtures")
    pf.add_argument("action", choices=["list"])
    pv = sub.add_parser("verify", help="invariant suites on packaged fixtures")
    pv.add_argument("--suite", choices=["fast", "full"], default="fast")
    pv.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        if args.threads is not None:
            if args.threads < 1:
                print("config error: --threads must be positive", file=sys.stderr)
                return 2
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(args.threads)
        return run_scenario(args.config, args.out, args.threads)
    if args.command == "fixtures":
        return list_fixtures()
    return verify_suite(args.suite)


if __name__ == "__main__":
    sys.exit(main())
