"""Command-line orchestration: validate / solve / simulate / verify / report.

    regimelq <command> --config <path> [--seed N] [--output DIR]

Commands
--------
validate
    Check the definiteness assumptions and print the measured diffusion
    size; exit 0 iff the assumptions hold.
solve
    Run the Riccati solver and persist the solution as CSV plus a sibling
    ``.meta.json`` with tolerances, residual history and diagnostics.
    Exit 2 (history still persisted) when the fixed point does not
    converge.
simulate
    Estimate the feedback cost and the cost of each configured
    perturbation by Monte Carlo; write the estimates as CSV.
verify
    Run the forward-backward identity checks and the optimality gaps and
    write a PASS/FAIL report; exit 3 when a check fails.  Requires the ODE
    backend (deterministic coefficients).
report
    Render previously written artifacts into a human-readable summary and
    a plot-ready CSV series.

Exit codes: 0 success, 1 validation/configuration failure, 2 solver
non-convergence, 3 verification failure, 4 I/O error.  All artifacts are
byte-deterministic given the config and seed: no timestamps, fixed float
formatting (17 significant digits in CSV files).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import matcore
from .config import RunConfig, parse_config
from .control import Policy, feedback_gain, mc_cost, optimality_gap, value_at
from .errors import (
    AssumptionViolation,
    IoError,
    NoConvergence,
    RegimeLQError,
)
from .esre import EsreSolution, SolverOptions, solve_esre, solve_p0
from .fbsde import tree_fbsde_oracle, xinv_product_check, ypx_residual
from .model import check_smallness, validate_assumptions

COMMANDS = ("validate", "solve", "simulate", "verify", "report")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NO_CONVERGENCE = 2
EXIT_VERIFICATION = 3
EXIT_IO = 4


def _f17(x) -> str:
    return format(float(x), ".17g")


def _f10(x) -> str:
    return format(float(x), ".10g")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_solution_csv(solution: EsreSolution, path) -> None:
    """Write the solution as ``t,regime,row,col,P,Lambda`` lines.

    One line per (sample, regime, entry), sorted by (t, regime, row, col);
    regime/row/col are 1-based.  Floats carry 17 significant digits, so a
    read-back reproduces the stored values exactly.  A sibling
    ``<path>.meta.json`` records backend, grid, tolerances, iteration
    counts, the residual history and the diagnostics.
    """
    path = Path(path)
    ksamples, ell, n, _ = solution.P.shape
    lines = ["t,regime,row,col,P,Lambda"]
    for k in range(ksamples):
        t = _f17(solution.grid[k])
        for i in range(ell):
            for r in range(n):
                for c in range(n):
                    lines.append(
                        f"{t},{i + 1},{r + 1},{c + 1},"
                        f"{_f17(solution.P[k, i, r, c])},"
                        f"{_f17(solution.Lambda[k, i, r, c])}"
                    )
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write solution to {path}: {exc}") from exc
    _write_metadata(path, solution=solution)


def _metadata_payload(solution: EsreSolution = None, options=None,
                      converged: bool = True, residual_history=None) -> dict:
    if solution is not None:
        options = solution.options
        residual_history = solution.residual_history
        d = solution.diagnostics
        diag = {
            "rho": float(d.rho),
            "k_estimate": float(d.k_estimate),
            "apriori_bound": float(d.apriori_bound),
            "measured_sup": float(d.measured_sup),
            "log_apriori_bound": float(d.log_apriori_bound),
            "log_measured_sup": float(d.log_measured_sup),
            "lambda_l2": [float(v) for v in np.atleast_1d(d.lambda_l2)],
            "smallness": float(d.smallness),
            "smallness_threshold": float(d.smallness_threshold),
            "smallness_ok": bool(d.smallness_ok),
        }
        grid = {
            "samples": int(len(solution.grid)),
            "t0": float(solution.grid[0]),
            "t_end": float(solution.grid[-1]),
        }
        backend = solution.backend
        iterations = int(solution.iterations)
    else:
        diag = None
        grid = None
        backend = options.backend
        iterations = len(residual_history or [])
    return {
        "backend": backend,
        "converged": bool(converged),
        "iterations": iterations,
        "grid": grid,
        "tolerances": {
            "grid_steps": int(options.grid_steps),
            "tree_depth": int(options.tree_depth),
            "picard_tol": float(options.picard_tol),
            "picard_max_iter": int(options.picard_max_iter),
            "psd_tol": float(options.psd_tol),
            "cond_threshold": float(options.cond_threshold),
            "smallness_threshold": float(options.smallness_threshold),
        },
        "residual_history": [float(r) for r in (residual_history or [])],
        "diagnostics": diag,
    }


def _write_metadata(solution_path: Path, solution: EsreSolution = None,
                    options=None, converged: bool = True,
                    residual_history=None) -> Path:
    meta_path = Path(str(solution_path) + ".meta.json")
    payload = _metadata_payload(solution, options, converged, residual_history)
    try:
        meta_path.write_text(json.dumps(payload, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write metadata to {meta_path}: {exc}") from exc
    return meta_path


def read_solution_csv(path):
    """Read back a solution file: (grid, P, Lambda) arrays."""
    path = Path(path)
    try:
        lines = path.read_text().strip().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read solution from {path}: {exc}") from exc
    if not lines or lines[0] != "t,regime,row,col,P,Lambda":
        raise IoError(f"{path} is not a solution file")
    rows = [line.split(",") for line in lines[1:]]
    times = sorted({float(r[0]) for r in rows})
    ell = max(int(r[1]) for r in rows)
    n = max(int(r[2]) for r in rows)
    t_index = {t: k for k, t in enumerate(times)}
    p = np.zeros((len(times), ell, n, n))
    lam = np.zeros_like(p)
    for r in rows:
        k = t_index[float(r[0])]
        i, rr, cc = int(r[1]) - 1, int(r[2]) - 1, int(r[3]) - 1
        p[k, i, rr, cc] = float(r[4])
        lam[k, i, rr, cc] = float(r[5])
    return np.asarray(times), p, lam


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------


@dataclass
class CommandResult:
    exit_code: int
    artifacts: dict


def _resolve_paths(config: RunConfig, output_dir) -> dict:
    out = config.output
    paths = {
        "solution": Path(out.solution_path),
        "report": Path(out.report_path),
        "estimates": Path(out.estimates_path),
    }
    if output_dir is not None:
        base = Path(output_dir)
        base.mkdir(parents=True, exist_ok=True)
        paths = {k: base / p.name for k, p in paths.items()}
    return paths


def _sim_inputs(config: RunConfig):
    sim = config.simulate
    x0 = sim.x0 if sim.x0 is not None else config.problem.x0
    if x0 is None:
        raise RegimeLQError("simulation needs x0 (set problem.x0 or simulate.x0)")
    i0 = sim.i0 if sim.i0 is not None else config.problem.i0
    return np.asarray(x0, dtype=float), int(i0)


def _cmd_validate(config: RunConfig, paths, echo) -> CommandResult:
    report = validate_assumptions(config.problem)
    smallness = check_smallness(config.problem)
    flag = "ok" if smallness <= config.solver.smallness_threshold else "warn"
    echo(f"assumptions: {'PASS' if report.passed else 'FAIL'}")
    for v in report.violations:
        echo(
            f"  violation {v.assumption} regime={v.regime} at={v.where} "
            f"min_eig={_f10(v.margin)}"
        )
    echo(f"diffusion size: {_f10(smallness)} ({flag}, threshold "
         f"{_f10(config.solver.smallness_threshold)})")
    return CommandResult(EXIT_OK if report.passed else EXIT_VALIDATION, {})


def _cmd_solve(config: RunConfig, paths, echo) -> CommandResult:
    try:
        solution = solve_esre(config.problem, config.solver)
    except NoConvergence as exc:
        echo(f"solver did not converge: {exc}")
        meta = _write_metadata(paths["solution"], options=config.solver,
                               converged=False,
                               residual_history=exc.residual_history)
        return CommandResult(EXIT_NO_CONVERGENCE, {"metadata": str(meta)})
    write_solution_csv(solution, paths["solution"])
    echo(f"converged in {solution.iterations} sweeps "
         f"(final residual {_f10(solution.residual_history[-1])})")
    for i in range(config.problem.ell):
        echo(f"P(0,{i + 1}) = {np.array2string(solution.P[0, i], precision=10)}")
    echo(f"solution written to {paths['solution']}")
    return CommandResult(EXIT_OK, {
        "solution": str(paths["solution"]),
        "metadata": str(paths["solution"]) + ".meta.json",
    })


def _cmd_simulate(config: RunConfig, paths, echo, seed) -> CommandResult:
    solution = solve_esre(config.problem, config.solver)
    gains = feedback_gain(solution, config.problem)
    x0, i0 = _sim_inputs(config)
    sim = config.simulate
    use_seed = sim.seed if seed is None else seed
    rows = ["policy,mean,std_error,n_paths,dt,seed"]
    est = mc_cost(config.problem, gains, x0, i0, sim.n_paths, sim.dt, use_seed)
    val = value_at(solution, x0, i0)
    echo(f"feedback cost: {_f10(est.mean)} +- {_f10(est.std_error)} "
         f"(value {_f10(val)})")
    rows.append(f"feedback,{_f17(est.mean)},{_f17(est.std_error)},"
                f"{est.n_paths},{_f17(est.dt)},{use_seed}")
    for k, pert in enumerate(sim.perturbations):
        pol = Policy(gains=gains, offset=pert)
        pe = mc_cost(config.problem, pol, x0, i0, sim.n_paths, sim.dt, use_seed)
        echo(f"perturbation[{k}] cost: {_f10(pe.mean)} +- {_f10(pe.std_error)}")
        rows.append(f"perturbation[{k}],{_f17(pe.mean)},{_f17(pe.std_error)},"
                    f"{pe.n_paths},{_f17(pe.dt)},{use_seed}")
    try:
        paths["estimates"].write_text("\n".join(rows) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write estimates: {exc}") from exc
    echo(f"estimates written to {paths['estimates']}")
    return CommandResult(EXIT_OK, {"estimates": str(paths["estimates"])})


def _fit_order(dts, values) -> float:
    dts = np.asarray(dts, dtype=float)
    values = np.maximum(np.asarray(values, dtype=float), 1e-300)
    if np.all(values < 1e-13):
        return np.inf        # residuals at roundoff level: order is moot
    return float(np.polyfit(np.log(dts), np.log(values), 1)[0])


def _cmd_verify(config: RunConfig, paths, echo, seed) -> CommandResult:
    if config.solver.backend != "ode":
        raise RegimeLQError(
            "verify requires the ODE backend (deterministic coefficients); "
            "tree-backend runs support validate/solve/report"
        )
    spec = config.problem
    solution = solve_esre(spec, config.solver)
    gains = feedback_gain(solution, spec)
    x0, i0 = _sim_inputs(config)
    sim = config.simulate
    use_seed = sim.seed if seed is None else seed
    checks = []
    lines = ["verification report", "==================="]

    # forward-backward identity on a dt ladder
    dt_sol = solution.grid[1] - solution.grid[0]
    dt_list = [16 * dt_sol, 8 * dt_sol, 4 * dt_sol]
    stats = ypx_residual(solution, spec, i0, dt_list)
    order = _fit_order([s.dt for s in stats], [s.rms for s in stats])
    ok = order >= 0.9
    checks.append(ok)
    lines.append(f"[{'PASS' if ok else 'FAIL'}] product-identity residual order "
                 f"{_f10(order)} >= 0.9")
    for s in stats:
        lines.append(f"    dt={_f10(s.dt)} rms={_f10(s.rms)} max={_f10(s.max)}")

    # inverse-state product drift (informational scale check)
    st = xinv_product_check(spec, i0, gains, dt_sol * 4, seed=use_seed)
    lines.append(f"[info] inverse-state product drift rms={_f10(st.rms)} "
                 f"at dt={_f10(st.dt)}")

    # coupled tree oracle (only meaningful without control noise)
    if spec.D.is_zero() and spec.n <= 2:
        devs = []
        for depth in (4, 8):
            opts = SolverOptions(backend="tree", tree_depth=depth,
                                 picard_tol=config.solver.picard_tol,
                                 picard_max_iter=config.solver.picard_max_iter)
            p0 = solve_p0(spec, opts)
            _, dev = tree_fbsde_oracle(spec, i0, p0, opts)
            devs.append(dev)
        ratio = devs[0] / devs[1] if devs[1] > 0 else np.inf
        # a deviation at roundoff level cannot be expected to halve
        ok = ratio >= 1.5 or devs[0] <= 1e-12
        checks.append(ok)
        lines.append(f"[{'PASS' if ok else 'FAIL'}] coupled-oracle deviation "
                     f"shrinks x{_f10(ratio)} (>= 1.5) when depth doubles "
                     f"({_f10(devs[0])} -> {_f10(devs[1])})")

    # value match and optimality gaps
    val = value_at(solution, x0, i0)
    est = mc_cost(spec, gains, x0, i0, sim.n_paths, sim.dt, use_seed)
    tol = max(3.0 * est.std_error, 0.01 * (1.0 + abs(val)))
    ok = abs(est.mean - val) <= tol
    checks.append(ok)
    lines.append(f"[{'PASS' if ok else 'FAIL'}] feedback cost {_f10(est.mean)} "
                 f"matches value {_f10(val)} within {_f10(tol)}")

    perturbations = sim.perturbations
    for k, pert in enumerate(perturbations):
        gap = optimality_gap(spec, solution, pert, sim.n_paths, sim.dt,
                             use_seed, gains=gains)
        not_below = gap.gap >= -3.0 * gap.std_error
        pred_tol = max(3.0 * gap.std_error,
                       0.02 * (1.0 + abs(gap.theoretical_gap)))
        near_pred = abs(gap.gap - gap.theoretical_gap) <= pred_tol
        checks.append(not_below and near_pred)
        lines.append(
            f"[{'PASS' if (not_below and near_pred) else 'FAIL'}] "
            f"perturbation[{k}] gap {_f10(gap.gap)} +- {_f10(gap.std_error)} "
            f"vs predicted {_f10(gap.theoretical_gap)} (tol {_f10(pred_tol)})"
        )

    passed = all(checks)
    lines.append(f"result: {'PASS' if passed else 'FAIL'} "
                 f"({sum(checks)}/{len(checks)} checks)")
    try:
        paths["report"].write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write report: {exc}") from exc
    for line in lines:
        echo(line)
    return CommandResult(
        EXIT_OK if passed else EXIT_VERIFICATION,
        {"report": str(paths["report"])},
    )


def _cmd_report(config: RunConfig, paths, echo) -> CommandResult:
    sol_path = paths["solution"]
    meta_path = Path(str(sol_path) + ".meta.json")
    grid, p, lam = read_solution_csv(sol_path)
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read metadata {meta_path}: {exc}") from exc

    series_path = Path(str(paths["report"]) + ".series.csv")
    rows = ["t,regime,frob_P,min_eig_P,frob_Lambda"]
    for k in range(len(grid)):
        for i in range(p.shape[1]):
            rows.append(
                f"{_f17(grid[k])},{i + 1},"
                f"{_f17(np.linalg.norm(p[k, i]))},"
                f"{_f17(matcore.min_eigenvalue(p[k, i]))},"
                f"{_f17(np.linalg.norm(lam[k, i]))}"
            )
    lines = [
        "solution report",
        "===============",
        f"backend: {meta['backend']}",
        f"converged: {meta['converged']}",
        f"iterations: {meta['iterations']}",
        f"grid samples: {len(grid)} on [{_f10(grid[0])}, {_f10(grid[-1])}]",
        "tolerances: " + ", ".join(
            f"{k}={_f10(v) if isinstance(v, float) else v}"
            for k, v in meta["tolerances"].items()
        ),
        "residual history: " + " ".join(_f10(r) for r in meta["residual_history"]),
    ]
    diag = meta.get("diagnostics")
    if diag:
        lines += [
            f"growth constant K: {_f10(diag['k_estimate'])}",
            f"exponential rate rho: {_f10(diag['rho'])}",
            f"a priori bound (log): {_f10(diag['log_apriori_bound'])}, "
            f"measured sup (log): {_f10(diag['log_measured_sup'])}",
            f"diffusion size: {_f10(diag['smallness'])} "
            f"(threshold {_f10(diag['smallness_threshold'])}, "
            f"{'ok' if diag['smallness_ok'] else 'warn'})",
        ]
    for i in range(p.shape[1]):
        lines.append(f"P(0,{i + 1}) = {np.array2string(p[0, i], precision=10)}")
    lines.append(f"series written to {series_path}")
    try:
        paths["report"].write_text("\n".join(lines) + "\n")
        series_path.write_text("\n".join(rows) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write report: {exc}") from exc
    for line in lines:
        echo(line)
    return CommandResult(EXIT_OK, {
        "report": str(paths["report"]),
        "series": str(series_path),
    })


def run_command(command: str, config: RunConfig, *, seed: int = None,
                output_dir=None, echo=print) -> CommandResult:
    """Execute one CLI command against a parsed configuration.

    ``seed`` overrides the configured simulation seed; ``output_dir``
    redirects all artifact files into one directory.
    """
    if command not in COMMANDS:
        raise RegimeLQError(f"unknown command {command!r}")
    paths = _resolve_paths(config, output_dir)
    if command == "validate":
        return _cmd_validate(config, paths, echo)
    if command == "solve":
        return _cmd_solve(config, paths, echo)
    if command == "simulate":
        return _cmd_simulate(config, paths, echo, seed)
    if command == "verify":
        return _cmd_verify(config, paths, echo, seed)
    return _cmd_report(config, paths, echo)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="regimelq",
        description="Regime-switching LQ control: solve, simulate, verify.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration (YAML)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override simulate.seed")
    parser.add_argument("--output", default=None,
                        help="directory receiving all artifact files")
    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config)
        result = run_command(args.command, config, seed=args.seed,
                             output_dir=args.output)
        return result.exit_code
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except AssumptionViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RegimeLQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
