"""Command-line front end.

Exit codes: 0 success, 1 bad configuration/usage, 2 numeric abort,
3 solvability conditions failed, 4 optimizer stall.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import approx as approx_mod
from .config import ConfigError, default_network_params, default_sim_settings, \
    load_config, write_default_config
from .exo import build_scenario1_exo, build_scenario3_exo
from .fitting import FitError, fit_sinusoid_bank, load_injection_csv
from .network import SteadyStateError, optimal_dispatch, steady_state_solve
from .regulator import hyperbolicity_check
from .sim import SimConfig, SimulationDiverged, build_approx_solution, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_SOLVABILITY = 3
EXIT_STALL = 4


def _load(args):
    if args.config:
        try:
            return load_config(args.config)
        except (ConfigError, OSError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    return default_network_params(), {**default_sim_settings(), "banks": None}, {}


def _outdir(args):
    out = args.output or os.environ.get("ORLFC_OUTPUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _sim_config(args, sim_defaults, scenario):
    overrides = {}
    for key in ("horizon", "seed", "step", "rtol", "atol"):
        if key in sim_defaults:
            overrides[key] = sim_defaults[key]
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "noise_std", None) is not None:
        overrides["noise_std"] = args.noise_std
    if getattr(args, "eps_bar", None) is not None:
        overrides["eps_bar"] = args.eps_bar
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if getattr(args, "dispatch0", None):
        overrides["initial_dispatch"] = args.dispatch0
    if getattr(args, "omega0", None):
        overrides["omega0"] = tuple(float(v) for v in args.omega0.split(","))
    if getattr(args, "integrator", None):
        overrides["integrator"] = args.integrator
    return SimConfig.for_scenario(scenario, **overrides)


def cmd_simulate(args):
    params, exo_settings, sim_defaults = _load(args)
    config = _sim_config(args, sim_defaults, args.scenario)
    out = _outdir(args)
    controller = {"approx": "approx", "approximate": "approx"}.get(
        args.controller, args.controller)
    solution = None
    if controller == "approx" and args.solution:
        solution = approx_mod.ApproxSolution.load(args.solution)
    try:
        trace = run_scenario(args.scenario, controller, params, exo_settings, config,
                             approx_solution=solution)
    except SimulationDiverged as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    stem = os.path.join(out, f"scenario{args.scenario}_{controller}")
    trace.write_csv(stem + "_trace.csv")
    trace.write_metrics(stem + "_metrics.txt")
    trace.write_manifest(stem + "_manifest.json")
    for key in ("max_abs_omega", "final_err_norm", "time_to_err_1e-3",
                "time_to_err_1e-6", "v_min", "v_max"):
        print(f"{key} = {trace.metrics[key]:.6g}")
    print(f"wrote {stem}_trace.csv")
    return EXIT_OK


def cmd_check_solvability(args):
    params, exo_settings, _ = _load(args)
    exo = build_scenario1_exo(params, exo_settings)
    P_d = exo.output(exo.initial_state())
    try:
        steady = steady_state_solve(P_d, params)
    except SteadyStateError as exc:
        print(f"steady-state solve failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    report = hyperbolicity_check(params, steady, P_d)
    print("consensus-block eigenvalues:",
          " ".join(f"{v:.4f}" for v in report.a33_eigenvalues))
    print(f"zero-dynamics eigenvalues: {report.n_neutral} neutral "
          f"(dispatch family, expected {report.expected_neutral}), "
          f"transverse real-part margin {report.transverse_margin:.4e}")
    print(f"family-subspace alignment residual: {report.neutral_alignment:.2e}")
    print(f"min |det| of the Schur complement over the rho grid: "
          f"raw {report.min_abs_det_raw:.3e} (at rho={report.rho_at_min:.3e}), "
          f"family-deflated {report.min_abs_det_deflated:.3e}")
    print(report.notes)
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_SOLVABILITY


def cmd_solve_approx(args):
    params, exo_settings, sim_defaults = _load(args)
    config = _sim_config(args, sim_defaults, args.scenario)
    out = _outdir(args)
    if args.scenario in (1, 2):
        exo = build_scenario1_exo(params, exo_settings)
    else:
        exo = build_scenario3_exo(params, banks=exo_settings.get("banks"))
    path = os.path.join(out, f"approx_solution_scenario{args.scenario}.json")
    eps_bar = config.eps_bar
    if args.init_solution:
        prev = approx_mod.ApproxSolution.load(args.init_solution)
        init = (prev.u_coeffs, prev.x_coeffs)
    else:
        init = None
    try:
        if np.isinf(eps_bar):
            solution = build_approx_solution(args.scenario, params, exo, config,
                                             run_gradient=False)
        else:
            domain = approx_mod.PenaltyDomain.from_exo(
                exo, order=5, nodes_per_phase=32,
                max_phases=2 if args.scenario in (1, 2) else 0,
                window=config.horizon)
            solution = approx_mod.algorithm1_run(domain, params, exo,
                                                 eps_bar=eps_bar, init=init,
                                                 max_iter=args.max_iter,
                                                 anchor=config.anchor,
                                                 verbose=args.verbose)
    except approx_mod.Algorithm1Stall as exc:
        exc.best.save(path)
        _write_penalty_log(out, args.scenario, exc.best)
        print(f"stall: {exc}; best-so-far solution written to {path}", file=sys.stderr)
        return EXIT_STALL
    solution.save(path)
    _write_penalty_log(out, args.scenario, solution)
    print(f"penalty {solution.penalty:.6e} after {solution.iterations} iterations "
          f"(target {eps_bar:g})")
    print(f"wrote {path}")
    return EXIT_OK if solution.converged or np.isinf(eps_bar) else EXIT_STALL


def _write_penalty_log(out, scenario, solution):
    with open(os.path.join(out, f"approx_penalty_scenario{scenario}.csv"), "w") as fh:
        fh.write("iteration,penalty\n")
        for k, v in enumerate(solution.history):
            fh.write(f"{k},{v:.17g}\n")


def cmd_dispatch(args):
    params, exo_settings, _ = _load(args)
    if args.injections:
        P_d = np.array([float(v) for v in args.injections.split(",")])
        if P_d.size != params.n:
            print(f"expected {params.n} injection values", file=sys.stderr)
            return EXIT_CONFIG
    else:
        exo = build_scenario1_exo(params, exo_settings)
        P_d = exo.output(exo.initial_state())
    P_opt = optimal_dispatch(P_d, params.cost)
    marginal = 2 * params.cost.q * P_opt + params.cost.r
    out = _outdir(args)
    path = os.path.join(out, "dispatch.csv")
    with open(path, "w") as fh:
        fh.write("area,P_d,P_c_opt,marginal_cost\n")
        for i in range(params.n):
            fh.write(f"{i + 1},{P_d[i]:.17g},{P_opt[i]:.17g},{marginal[i]:.17g}\n")
    for i in range(params.n):
        print(f"area {i + 1}: P_d = {P_d[i]: .6f}, P_c_opt = {P_opt[i]: .6f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_fit_exo(args):
    try:
        t, p = load_injection_csv(args.csv)
        bank = fit_sinusoid_bank(t, p, n_components=args.components)
    except (OSError, ValueError) as exc:
        print(f"cannot fit {args.csv}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"offset = {bank.offset:.6g}")
    for a, w, ph in bank.components:
        print(f"component: amplitude {a:.6g}, angular frequency {w:.6g} rad/s, "
              f"phase {ph:.6g} rad")
    print(f"rms residual = {bank.rms_residual:.6g}")
    out = _outdir(args)
    path = os.path.join(out, "fitted_exo.json")
    with open(path, "w") as fh:
        json.dump({"offset": bank.offset, "components": bank.components,
                   "rms_residual": bank.rms_residual}, fh, indent=1)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_write_config(args):
    out = args.path or "orlfc.ini"
    write_default_config(out)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="orlfc",
        description="Multi-area frequency-control simulator with output-regulation "
                    "controllers.")
    p.add_argument("--config", help="INI configuration file (defaults are built in)")
    p.add_argument("--output", help="output directory (or set ORLFC_OUTPUT_DIR)")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run a scenario and write trace/metrics")
    ps.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    ps.add_argument("--controller", choices=("classical", "approx", "approximate",
                                             "droop"), default="classical")
    ps.add_argument("--horizon", type=float)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--step", type=float)
    ps.add_argument("--noise-std", dest="noise_std", type=float)
    ps.add_argument("--eps-bar", dest="eps_bar", type=float)
    ps.add_argument("--integrator", choices=("rk45", "rk4"))
    ps.add_argument("--data", help="scenario-3 injection CSV directory")
    ps.add_argument("--solution", help="pre-solved approximate-regulator file")
    ps.add_argument("--dispatch0", choices=("optimal", "local"),
                    help="dispatch of the initial steady state")
    ps.add_argument("--omega0", help="comma-separated initial frequency deviations")
    ps.set_defaults(func=cmd_simulate)

    pc = sub.add_parser("check-solvability",
                        help="regulator-equation solvability report")
    pc.set_defaults(func=cmd_check_solvability)

    pa = sub.add_parser("solve-approx", help="run the approximate-regulation solve")
    pa.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    pa.add_argument("--eps-bar", dest="eps_bar", type=float)
    pa.add_argument("--max-iter", type=int, default=500)
    pa.add_argument("--horizon", type=float)
    pa.add_argument("--init-solution", help="warm start from a saved solution file")
    pa.add_argument("--verbose", action="store_true")
    pa.set_defaults(func=cmd_solve_approx)

    pd = sub.add_parser("dispatch", help="optimal dispatch table for given injections")
    pd.add_argument("--injections", help="comma-separated per-area P_d values (p.u.)")
    pd.set_defaults(func=cmd_dispatch)

    pf = sub.add_parser("fit-exo", help="fit a sinusoid bank to an injection CSV")
    pf.add_argument("csv")
    pf.add_argument("--components", type=int, default=2)
    pf.set_defaults(func=cmd_fit_exo)

    pw = sub.add_parser("write-config", help="write the default INI config")
    pw.add_argument("path", nargs="?")
    pw.set_defaults(func=cmd_write_config)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; keep 1 for config problems
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SteadyStateError, SimulationDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
