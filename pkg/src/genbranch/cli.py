"""Command-line entry point: simulations, CSV series and the verification batteries.

    genbranch <command> [--config PATH] [--seed U64] [--replicates N] [--threads N] [--out PATH]

Commands: simulate, export, test-branching, test-moment, test-duality,
test-algebra, test-calibration, run (takes the command from the config).
Exit codes: 0 pass, 1 a check failed, 2 invalid configuration, 3 resource cap hit.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from referencing import Registry, Resource

from . import umspace as U
from . import verification as V
from .coalescent_dual import DualityConfig
from .feller_sim import PARTICLE_CAP, GwConfig, ResourceError, extract_ums, simulate_gw, total_mass_path
from .polynomials import PhiSpec, SmoothTruncation, eval_polynomial
from .spatial_sim import (
    MarkedUms,
    SiteSpace,
    encode_mark,
    extract_marked_ums,
    marked_from_json,
    simulate_brw,
    site_histogram,
)

COMMANDS = ("simulate", "export", "test-branching", "test-moment", "test-duality", "test-algebra", "test-calibration")
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RESOURCE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# schemas --------------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _schema_text(name):
    return resources.files("genbranch").joinpath("schemas").joinpath(f"{name}.schema.json").read_text()


def load_schema(name):
    return json.loads(_schema_text(name))


_REGISTRY = None


def _registry():
    global _REGISTRY
    if _REGISTRY is None:
        res = [(f"{n}.schema.json", Resource.from_contents(load_schema(n))) for n in ("ums", "genealogy", "report", "config")]
        _REGISTRY = Registry().with_resources(res)
    return _REGISTRY


def validate(doc, name):
    """Raise jsonschema.ValidationError unless doc matches the named shipped schema."""
    cls = jsonschema.validators.validator_for(load_schema(name))
    cls(load_schema(name), registry=_registry()).validate(doc)


# config parsing ---------------------------------------------------------------------------


def _ums(doc, marked=False):
    if doc is None:
        return None
    if marked or "mode" in doc:
        return marked_from_json(doc)
    return U.from_json(doc)


def _space(doc):
    return None if doc is None else SiteSpace(np.array(doc["kernel"], dtype=float))


def _require(cfg, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")


def _model(cfg, seed):
    """(GwConfig, SiteSpace or None, initial state) for simulate/export."""
    _require(cfg, "N", "b", "a", "horizon", "initial")
    mode = cfg.get("mode", "none")
    space = _space(cfg.get("space"))
    if (mode != "none") != (space is not None):
        raise ConfigError("spatial modes need a space and a space needs a spatial mode")
    init = _ums(cfg["initial"], marked=space is not None)
    if space is not None and (not isinstance(init, MarkedUms) or init.mode != "location"):
        raise ConfigError("spatial runs start from a location-marked state")
    if space is not None and any(not 0 <= m < space.n_sites for m in init.marks):
        raise ConfigError("initial sites out of range")
    gw = GwConfig(N=cfg["N"], b=cfg["b"], a=cfg["a"], initial=U.Ums(init.masses, init.gaps, init.ceiling),
                  horizon=cfg["horizon"], seed=seed, cap=cfg.get("cap", PARTICLE_CAP))
    return gw, space, init


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("GENEALOGY_THREADS")
    return int(env) if env else 1


# commands -----------------------------------------------------------------------------------


def _simulate(cfg, seed, reps, threads, out):
    """Mass paths, polynomial statistics and site occupation over a time grid, as CSV."""
    gw, space, init = _model(cfg, seed)
    grid = [float(s) for s in cfg.get("grid", np.linspace(0.0, gw.horizon, 11))]
    if any(s > gw.horizon for s in grid):
        raise ConfigError("grid times must not exceed the horizon")
    stats = [PhiSpec.from_json(d) for d in cfg.get("stats", [{"n": 2, "phi": "exp", "params": [1.0]}])]
    if any(sp.marked for sp in stats):
        raise ConfigError("simulate statistics take unmarked test functions")
    empty = init.is_zero

    def one(r):
        c = GwConfig(N=gw.N, b=gw.b, a=gw.a, initial=gw.initial, horizon=gw.horizon, seed=seed, replicate=r, cap=gw.cap)
        g = simulate_gw(c) if space is None else simulate_brw(space, c, init)
        mass = total_mass_path(g, grid)
        vals = [[eval_polynomial(extract_ums(g, s), sp) for sp in stats] for s in grid]
        occ = None
        if space is not None:
            occ = [site_histogram(extract_marked_ums(g, s, "location"), space.n_sites) for s in grid]
        return mass, vals, occ

    results = [] if empty else V.map_replicates(one, reps, threads)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mass_paths.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["replicate", "time", "mass"])
        for r, (mass, _, _) in enumerate(results):
            for s, m in zip(grid, mass):
                w.writerow([r, repr(s), repr(float(m))])
    with open(out / "stats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["time", "statistic", "mean", "se"])
        if results:
            vals = np.array([v for _, v, _ in results])
            for i, s in enumerate(grid):
                for k, sp in enumerate(stats):
                    m, se = V._mean_se(vals[:, i, k])
                    w.writerow([repr(s), json.dumps(sp.to_json(), sort_keys=True), repr(m), repr(se)])
    files = ["mass_paths.csv", "stats.csv"]
    if space is not None:
        with open(out / "occupation.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time", "site", "mean", "se"])
            if results:
                occ = np.array([o for _, _, o in results])
                for i, s in enumerate(grid):
                    for site in range(space.n_sites):
                        m, se = V._mean_se(occ[:, i, site])
                        w.writerow([repr(s), site, repr(m), repr(se)])
        files.append("occupation.csv")
    rep = V.TestReport("simulate", {k: v for k, v in cfg.items() if k != "command"}, replicates=0 if empty else reps)
    if results:
        final = np.array([m[-1] for m, _, _ in results])
        m, se = V._mean_se(final)
        rep.rows.append({"name": f"mass at t={grid[-1]}", "kind": "summary", "mean": m, "se": se, "passed": True})
    return [rep], files


def _export(cfg, seed, reps, threads, out):
    """Event log and extracted state of one replicate."""
    gw, space, init = _model(cfg, seed)
    r = int(cfg.get("replicate", 0))
    c = GwConfig(N=gw.N, b=gw.b, a=gw.a, initial=gw.initial, horizon=gw.horizon, seed=seed, replicate=r, cap=gw.cap)
    g = simulate_gw(c) if space is None else simulate_brw(space, c, init)
    t = float(cfg.get("t", gw.horizon))
    if space is None:
        state = U.to_json(extract_ums(g, t))
    else:
        u = extract_marked_ums(g, t, cfg["mode"])
        state = U.to_json(u, encode_mark)
        state["mode"] = u.mode
    log = g.to_json()
    validate(log, "genealogy")
    validate(state, "ums")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "genealogy.json", log)
    _write_json(out / "state.json", state)
    rep = V.TestReport("export", {"replicate": r, "t": t, "mode": cfg.get("mode", "none")}, replicates=1)
    rep.rows.append({"name": "particles", "kind": "summary", "count": len(g), "passed": True})
    return [rep], ["genealogy.json", "state.json"]


def _branching(cfg, seed, reps, threads, out):
    _require(cfg, "x1", "x2")
    mode = cfg.get("mode", "none")
    marked = mode != "none"
    bc = V.BranchingConfig(
        x1=_ums(cfg["x1"], marked), x2=_ums(cfg["x2"], marked),
        t=cfg.get("t", 0.5), s=cfg.get("s", 0.0), b=cfg.get("b", 1.0), a=cfg.get("a", 0.0), N=cfg.get("N", 4),
        mode=mode, space=_space(cfg.get("space")),
        battery=[PhiSpec.from_json(d) for d in cfg["battery"]] if "battery" in cfg else None,
        c_grid=tuple(cfg["c_grid"]) if "c_grid" in cfg else None,
        replicates=reps or 100_000, seed=seed, z_max=cfg.get("z_max", V.Z_MAX),
        check_states=cfg.get("check_states", 200),
    )
    return [V.test_generalized_branching(bc)], []


def _moment(cfg, seed, reps, threads, out):
    keys = ("a", "b", "t", "u0", "N", "rel_tol", "z_max")
    mc = V.MomentConfig(seed=seed, **{k: cfg[k] for k in keys if k in cfg})
    if reps:
        mc.replicates = reps
    return [V.test_moment_recursion(mc)], []


def _duality(cfg, seed, reps, threads, out):
    grid = None
    if "duality_grid" in cfg:
        grid = []
        for k, row in enumerate(cfg["duality_grid"]):
            space = _space(row.get("space"))
            kw = dict(spec=PhiSpec.from_json(row["spec"]), t=row["t"], b=row.get("b", 1.0), a=row.get("a", 0.0),
                      space=space, seed=V.seeding.derive(seed, "duality", k),
                      replicates=row.get("replicates", reps or 100_000))
            if "u0" in row:
                kw["u0"] = _ums(row["u0"], marked=space is not None)
            if "rho" in row:
                kw["rho"] = None if row["rho"] is None else SmoothTruncation(**row["rho"])
            for key in ("N_forward", "convention"):
                if key in row:
                    kw[key] = row[key]
            grid.append(DualityConfig(**kw))
    return [V.test_duality(grid, z_max=cfg.get("z_max", V.Z_MAX), seed=seed, replicates=reps or 100_000)], []


def _algebra(cfg, seed, reps, threads, out):
    return [
        V.test_algebra_suite(cfg.get("instances", 1000), seed, cfg.get("max_leaves", 64)),
        V.test_monotone_approximation(cfg.get("monotone_instances", 100), seed),
    ], []


def _calibration(cfg, seed, reps, threads, out):
    kw = {}
    if "calibration_rows" in cfg:
        kw["rows"] = tuple(tuple(r) for r in cfg["calibration_rows"])
    if "spatial_replicates" in cfg:
        kw["spatial_replicates"] = cfg["spatial_replicates"]
    return [V.test_calibration(seed=seed, replicates=reps or 20_000, threads=threads, **kw)], []


HANDLERS = {
    "simulate": _simulate,
    "export": _export,
    "test-branching": _branching,
    "test-moment": _moment,
    "test-duality": _duality,
    "test-algebra": _algebra,
    "test-calibration": _calibration,
}


# output ---------------------------------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: numpy scalars to Python numbers, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def _write_json(path, doc):
    Path(path).write_text(json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n")


def build_parser():
    p = argparse.ArgumentParser(prog="genbranch", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS + ("run",))
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--seed", type=int, help="64-bit seed (overrides the config)")
    p.add_argument("--replicates", type=int, help="replicate count (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (default: $GENEALOGY_THREADS or 1)")
    p.add_argument("--out", type=Path, help="report file for tests, output directory for simulate/export")
    p.add_argument("--wall-time", action="store_true", help="include wall times in the report")
    return p


def run(args):
    """Execute one command; returns the exit code."""
    try:
        cfg = json.loads(args.config.read_text()) if args.config else {}
        validate(cfg, "config")
        command = cfg.get("command") if args.command == "run" else args.command
        if command is None:
            raise ConfigError("'run' needs a command in the config")
        if args.command != "run" and cfg.get("command", command) != command:
            raise ConfigError(f"config is for {cfg['command']!r}, not {command!r}")
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        reps = args.replicates if args.replicates is not None else cfg.get("replicates")
        if reps is not None and reps < 1:
            raise ConfigError("replicates must be >= 1")
        threads = _threads(args)
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        out = args.out
        if command in ("simulate", "export"):
            out = out or Path("genbranch_out")
            reps = reps or 100
        reports, files = HANDLERS[command](cfg, seed, reps, threads, out)
    except ResourceError as e:
        print(f"genbranch: resource limit: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    except (ConfigError, jsonschema.ValidationError, ValueError, KeyError, TypeError, OSError) as e:
        msg = e.message if isinstance(e, jsonschema.ValidationError) else e
        print(f"genbranch: invalid configuration: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    doc = {
        "command": command,
        "seed": seed,
        "reports": [r.to_json(wall_time=args.wall_time) for r in reports],
        "passed": all(r.passed for r in reports),
    }
    if files:
        doc["artifacts"] = files
    doc = _clean(doc)
    validate(doc, "report")
    if command in ("simulate", "export"):
        _write_json(out / "report.json", doc)
    elif out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, doc)
    else:
        sys.stdout.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    for r in reports:
        print(f"{r.test_id}: {'PASS' if r.passed else 'FAIL'}", file=sys.stderr)
    return EXIT_PASS if doc["passed"] else EXIT_FAIL


def main(argv=None):
    sys.exit(run(build_parser().parse_args(argv)))


if __name__ == "__main__":
    main()
