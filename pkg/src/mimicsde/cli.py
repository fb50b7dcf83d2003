"""Experiment orchestration: one JSON config in, one directory of artifacts out.

Every run validates its config against the JSON schema below before any
compute, executes one pipeline, writes CSV data artifacts plus a
``report.json``, and records a ``manifest.json`` with the config hash, package
version, and wall-clock time.  Exit status: 0 when all asserted checks pass,
1 on a check failure (the report is still written), 2 on a schema violation.

Seeds are mandatory — there are no entropy defaults — so re-running a config
reproduces byte-identical CSV artifacts (the manifest timestamp aside).  The
``--break-generator`` flag deliberately corrupts the generator used on the
*checking* side of the martingale and duality pipelines; it exists so the
suite can demonstrate its own negative controls.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .coeffs import heston_model, load_gridded_model, strip_generator_term, validate_coefficients
from .geometry import SpaceTimePoint
from .martingale import (
    boundary_bump,
    constant_probe,
    left_coordinate_probe,
    linear_function,
    martingale_increments,
    martingale_test,
    radial_bump,
    strong_markov_restart_test,
)
from .pde import Grid, duality_check, solve_cauchy, solve_terminal_value
from .projection import (
    BinningSpec,
    build_mimicking_model,
    compare_marginals,
    estimate_mimicking_coefficients,
    save_mimicked,
)
from .sdesim import (
    TimeGrid,
    ensemble_to_csv,
    model_driver,
    regime_switching_driver,
    simulate_ito_process,
    simulate_sde,
    support_check,
)

KINDS = ("simulate", "validate", "martingale", "project", "pde",
         "duality", "restart", "full-mimic")

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["kind", "seed", "output_dir"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "properties": {
                "builtin": {"enum": ["heston"]},
                "params": {"type": "object"},
                "gridded": {
                    "type": "object",
                    "required": ["csv"],
                    "properties": {"csv": {"type": "string"}, "sidecar": {"type": "string"}},
                },
            },
        },
        "start": {
            "type": "object",
            "required": ["x"],
            "properties": {
                "t": {"type": "number", "minimum": 0},
                "x": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            },
        },
        "ensemble": {
            "type": "object",
            "required": ["n_paths", "step", "horizon"],
            "properties": {
                "n_paths": {"type": "integer", "minimum": 1},
                "step": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "scheme": {"enum": ["full_truncation", "absorbed_euler"]},
                "store_stride": {"type": "integer", "minimum": 1},
            },
        },
        "driver": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["markov_replay", "regime_switching"]},
                "hi_factor": {"type": "number", "exclusiveMinimum": 0},
                "switch_rate": {"type": "number", "minimum": 0},
                "p_start_hi": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "binning": {
            "type": "object",
            "required": ["times", "edges"],
            "properties": {
                "times": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "edges": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "kernel": {"enum": ["box", "gaussian"]},
                "bandwidth": {"type": ["array", "null"]},
                "min_count": {"type": "number", "exclusiveMinimum": 0},
                "max_masked_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "pde": {
            "type": "object",
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "x_prime_extent": {"type": "number", "exclusiveMinimum": 0},
                "x_max": {"type": "number", "exclusiveMinimum": 0},
                "counts": {"type": "array", "items": {"type": "integer", "minimum": 3}},
                "xd_stretch": {"type": "number", "minimum": 1},
                "scheme": {"enum": ["implicit_euler", "crank_nicolson"]},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "martingale": {
            "type": "object",
            "properties": {
                "n_intervals": {"type": "integer", "minimum": 2},
                "z_crit": {"type": "number", "exclusiveMinimum": 0},
                "fail_crit": {"type": "number", "exclusiveMinimum": 0},
                "test_functions": {"type": "array"},
            },
        },
        "duality": {"type": "object"},
        "restart": {
            "type": "object",
            "properties": {
                "level": {"type": "number"},
                "t_cap": {"type": "number", "exclusiveMinimum": 0},
                "u": {"type": "number", "exclusiveMinimum": 0},
                "n_bins": {"type": "integer", "minimum": 1},
                "min_bin": {"type": "integer", "minimum": 1},
                "ks_threshold": {"type": "number", "exclusiveMinimum": 0},
                "perturb": {"type": ["array", "null"]},
            },
        },
        "thresholds": {
            "type": "object",
            "properties": {
                "ks": {"type": "number", "exclusiveMinimum": 0},
                "gap_z": {"type": "number", "exclusiveMinimum": 0},
                "w1": {"type": ["number", "null"]},
            },
        },
        "compare_times": {"type": "array", "items": {"type": "number"}},
        "validator": {"type": "object"},
    },
}


def _model_from_config(cfg: dict):
    spec = cfg.get("model", {})
    if "gridded" in spec:
        g = spec["gridded"]
        return load_gridded_model(g["csv"], g.get("sidecar"))
    params = dict(spec.get("params", {}))
    return heston_model(
        kappa=params.get("kappa", 1.5), theta=params.get("theta", 0.04),
        zeta=params.get("zeta", 0.3), rho=params.get("rho", -0.5),
        r=params.get("r", 0.02), q=params.get("q", 0.0),
        with_killing=params.get("with_killing", False),
    )


def _test_function_from_spec(spec: dict):
    kind = spec.get("type", "radial_bump")
    if kind == "linear":
        return linear_function(spec["weights"])
    if kind == "radial_bump":
        return radial_bump(spec["center"], spec["radius"])
    if kind == "boundary_bump":
        return boundary_bump(spec["center_prime"], spec["radius"])
    raise ValueError(f"unknown test function type {kind!r}")


def _payoff_from_spec(spec: dict):
    kind = spec.get("type", "constant")
    if kind == "constant":
        val = float(spec.get("value", 1.0))
        return lambda x: np.full(np.asarray(x).shape[0], val)
    tf = _test_function_from_spec(spec)
    return lambda x: tf.value(0.0, x)


def _grid_from_config(pcfg: dict) -> Grid:
    return Grid.build(
        dt=pcfg.get("dt", 1.0 / 256),
        x_prime_extent=pcfg.get("x_prime_extent", 1.5),
        x_max=pcfg.get("x_max", 0.5),
        counts=pcfg.get("counts", [65, 65]),
        xd_stretch=pcfg.get("xd_stretch", 1.0),
    )


def _start_from_config(cfg: dict) -> SpaceTimePoint:
    s = cfg.get("start", {"t": 0.0, "x": [0.0, 0.09]})
    return SpaceTimePoint(s.get("t", 0.0), tuple(s["x"]))


def _ensemble_from_config(cfg: dict, model, start, seed):
    e = cfg["ensemble"]
    grid = TimeGrid(start.t, start.t + e["horizon"], e["step"])
    return simulate_sde(
        model, start, grid, e["n_paths"], seed,
        scheme=e.get("scheme", "full_truncation"),
        store_stride=e.get("store_stride", 1),
    )


def _driver_from_config(cfg: dict, model):
    d = cfg.get("driver", {"kind": "markov_replay"})
    if d.get("kind", "markov_replay") == "markov_replay":
        return model_driver(model)
    return regime_switching_driver(
        model, hi_factor=d.get("hi_factor", 1.5),
        switch_rate=d.get("switch_rate", 2.0),
        p_start_hi=d.get("p_start_hi", 0.5),
    )


def _binning_from_config(cfg: dict) -> BinningSpec:
    b = cfg["binning"]
    return BinningSpec(
        times=tuple(b["times"]),
        edges=tuple(np.asarray(e, dtype=float) for e in b["edges"]),
        kernel=b.get("kernel", "box"),
        bandwidth=tuple(b["bandwidth"]) if b.get("bandwidth") else None,
        min_count=b.get("min_count", 20.0),
    )


def _run_simulate(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    start = _start_from_config(cfg)
    ens = _ensemble_from_config(cfg, model, start, seed)
    with open(out / "ensemble.csv", "w", newline="") as fh:
        ensemble_to_csv(ens, fh)
    rep = support_check(ens)
    return rep.violations == 0, {"support": rep.to_json()}


def _run_validate(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    v = cfg.get("validator", {})
    rep = validate_coefficients(
        model, seed=seed,
        n_samples=v.get("n_samples", 4096),
        pair_budget=v.get("pair_budget", 4096),
        t_max=v.get("t_max", 1.0),
        alphas=v.get("alphas"),
    )
    return rep.passed, {"validation": rep.to_json()}


def _run_martingale(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    start = _start_from_config(cfg)
    ens = _ensemble_from_config(cfg, model, start, seed)
    check_model = strip_generator_term(model, break_gen) if break_gen else model
    m = cfg.get("martingale", {})
    specs = m.get("test_functions", [
        {"type": "linear", "weights": [1.0, 0.0]},
        {"type": "radial_bump", "center": [0.0, 0.05], "radius": 1.0},
        {"type": "boundary_bump", "center_prime": [0.0], "radius": 0.6},
    ])
    probes = [constant_probe()] + [left_coordinate_probe(i) for i in range(model.d)]
    reports = []
    ok = True
    for spec in specs:
        v = _test_function_from_spec(spec)
        inc = martingale_increments(ens, check_model, v)
        rep = martingale_test(inc, ens, probes,
                              n_intervals=m.get("n_intervals", 4),
                              z_crit=m.get("z_crit", 3.0),
                              fail_crit=m.get("fail_crit", 5.0),
                              label=v.name)
        reports.append(rep.to_json())
        ok = ok and rep.passed
    return ok, {"martingale": reports, "broken_generator": break_gen}


def _run_project(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    start = _start_from_config(cfg)
    e = cfg["ensemble"]
    grid = TimeGrid(start.t, start.t + e["horizon"], e["step"])
    driver = _driver_from_config(cfg, model)
    ens = simulate_ito_process(driver, np.asarray(start.x), grid, e["n_paths"], seed,
                               record_drivers=True, store_stride=e.get("store_stride", 1))
    spec = _binning_from_config(cfg)
    mc = estimate_mimicking_coefficients(ens, spec)
    cap = cfg["binning"].get("max_masked_fraction", 0.9)
    built = build_mimicking_model(mc, max_masked_fraction=cap)
    save_mimicked(mc, out / "mimicked.csv", out / "mimicked.csv.meta.json")
    vrep = validate_coefficients(built, seed=seed, n_samples=1024, pair_budget=1024)
    return True, {
        "masked_fraction": mc.masked_fraction,
        "integrability_mean": ens.integrability_mean,
        "built_model_validation": vrep.to_json(),
    }


def _run_pde(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    p = cfg.get("pde", {})
    grid = _grid_from_config(p)
    horizon = p.get("horizon", 0.5)
    scheme = p.get("scheme", "implicit_euler")

    ones = lambda x: np.ones(np.asarray(x).shape[0])
    sol_const = solve_cauchy(model, None, ones, grid, horizon, scheme=scheme, store="ends")
    has_killing = bool(np.any(np.abs(model.c(0.0, grid.nodes()[:4])) > 0))
    if has_killing:
        cref = float(model.c(0.0, grid.nodes()[:1])[0])
        expected = float(np.exp(cref * horizon))
    else:
        expected = 1.0
    const_err = float(np.abs(sol_const.values[-1] - expected).max())

    g = _payoff_from_spec(cfg.get("duality", {}).get("g", {
        "type": "radial_bump", "center": [0.0, 0.04], "radius": 0.5}))
    sol = solve_terminal_value(model, g, horizon, grid, scheme=scheme, store="ends")
    with open(out / "solution.csv", "w", newline="") as fh:
        fh.write("t," + ",".join(f"x_{j+1}" for j in range(grid.d)) + ",u\n")
        nodes = grid.nodes()
        vals = sol.values[0].ravel()
        for i in range(nodes.shape[0]):
            fh.write(",".join([repr(0.0)] + [repr(float(v)) for v in nodes[i]]
                              + [repr(float(vals[i]))]) + "\n")
    ok = const_err <= (1e-6 if has_killing else 1e-8)
    return ok, {"constant_data_error": const_err, "killing": has_killing,
                "scheme": scheme}


def _run_duality(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    start = _start_from_config(cfg)
    dcfg = cfg.get("duality", {})
    p = cfg.get("pde", {})
    grid = _grid_from_config(p)
    horizon = dcfg.get("horizon", p.get("horizon", 0.5))
    g = _payoff_from_spec(dcfg.get("g", {"type": "radial_bump",
                                         "center": [0.0, 0.04], "radius": 0.5}))
    e = cfg.get("ensemble", {"n_paths": 20000, "step": 2.0**-9, "horizon": horizon})
    # the break corrupts only the solver side; the simulation stays faithful
    pde_model = strip_generator_term(model, break_gen) if break_gen else model
    rep = duality_check(
        pde_model, g, np.asarray(start.x), horizon, grid,
        mc_paths=e["n_paths"], mc_step=e["step"], mc_seed=seed,
        mc_scheme=e.get("scheme", "full_truncation"),
        scheme=p.get("scheme", "implicit_euler"),
        pde_eval_shift=dcfg.get("pde_eval_shift"),
        mc_model=model,
    )
    return rep.passed, {"duality": rep.to_json(), "broken_generator": break_gen}


def _run_restart(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    start = _start_from_config(cfg)
    r = cfg.get("restart", {})
    e = cfg.get("ensemble", {"n_paths": 10000, "step": 2.0**-7})
    rep = strong_markov_restart_test(
        model, start,
        level=r.get("level", 0.01), t_cap=r.get("t_cap", 0.5), u=r.get("u", 0.25),
        g_list=[(f"x_{i+1}", (lambda i: (lambda x: x[:, i]))(i)) for i in range(model.d)],
        n_paths=e["n_paths"], h=e["step"], seed=seed,
        n_bins=r.get("n_bins", 4), min_bin=r.get("min_bin", 200),
        ks_threshold=r.get("ks_threshold", 0.05),
        perturb=r.get("perturb"),
    )
    return rep.passed, {"restart": rep.to_json()}


def _run_full_mimic(cfg, out, seed, break_gen):
    model = _model_from_config(cfg)
    start = _start_from_config(cfg)
    e = cfg["ensemble"]
    grid = TimeGrid(start.t, start.t + e["horizon"], e["step"])
    stride = e.get("store_stride", 1)
    driver = _driver_from_config(cfg, model)
    ens = simulate_ito_process(driver, np.asarray(start.x), grid, e["n_paths"], seed,
                               record_drivers=True, store_stride=stride)
    spec = _binning_from_config(cfg)
    mc = estimate_mimicking_coefficients(ens, spec)
    cap = cfg["binning"].get("max_masked_fraction", 0.9)
    built = build_mimicking_model(mc, max_masked_fraction=cap)
    save_mimicked(mc, out / "mimicked.csv", out / "mimicked.csv.meta.json")
    vrep = validate_coefficients(built, seed=seed, n_samples=1024, pair_budget=1024)
    mimic = simulate_sde(built, start, grid, e["n_paths"], seed + 1,
                         scheme=e.get("scheme", "full_truncation"), store_stride=stride)
    times = cfg.get("compare_times", [0.25, 0.5, 1.0])
    comparison = compare_marginals(
        ens, mimic, times,
        g_list=[(f"x_{i+1}", (lambda i: (lambda x: x[:, i]))(i)) for i in range(model.d)],
        seed=seed, thresholds=cfg.get("thresholds"),
    )
    return comparison.passed, {
        "comparison": comparison.to_json(),
        "masked_fraction": mc.masked_fraction,
        "built_model_validation": vrep.to_json(),
    }


_RUNNERS = {
    "simulate": _run_simulate,
    "validate": _run_validate,
    "martingale": _run_martingale,
    "project": _run_project,
    "pde": _run_pde,
    "duality": _run_duality,
    "restart": _run_restart,
    "full-mimic": _run_full_mimic,
}


def run(config: dict, threads: int | None = None, break_generator: str | None = None) -> int:
    """Validate the config, execute its pipeline, write artifacts, return exit status."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        print(f"config schema violation: {exc.message}", file=sys.stderr)
        return 2

    if threads is not None:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(threads)
        except ImportError:
            pass  # results are thread-count independent; the cap is best-effort

    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.monotonic()
    ok, payload = _RUNNERS[config["kind"]](config, out, config["seed"], break_generator)
    wallclock = time.monotonic() - t_start

    report = {"kind": config["kind"], "passed": bool(ok), **payload}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    manifest = {
        "config_sha256": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "version": __version__,
        "wallclock_s": wallclock,
        "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "threads": threads,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mimicsde",
                                     description="degenerate half-space diffusion pipelines")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute a pipeline from a JSON config")
    runp.add_argument("--config", required=True, help="path to the JSON config")
    runp.add_argument("--threads", type=int, default=None,
                      help="cap worker threads (results are unaffected)")
    runp.add_argument("--break-generator", choices=["drift", "diffusion"], default=None,
                      help="negative control: corrupt the checking-side generator")
    args = parser.parse_args(argv)
    with open(args.config) as fh:
        config = json.load(fh)
    return run(config, threads=args.threads, break_generator=args.break_generator)


if __name__ == "__main__":
    sys.exit(main())
