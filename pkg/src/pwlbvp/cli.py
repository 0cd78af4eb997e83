"""Command-line entry points and artifact emission.

Subcommands: ``solve`` (full DP -> tube -> refine pipeline), ``validate``
(parse and report the config only), ``oracle`` (guarded brute force) and
``control`` (control curve from a written solution). Exit codes: 0 success,
2 infeasible discretization, 3 refine divergence (best iterate still
written), 1 any other error. ``PWLBVP_OUTPUT_DIR`` overrides the output
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dp as dpmod
from .config import RunConfig, parse_config
from .errfun import ErrorAccumulator, total_error
from .exceptions import ConfigError, GuardExceeded, InfeasibleDiscretization, PwlBvpError
from .model import Mesh, Piece, PwlModel, eval_model_many, model_derivative_many
from .problems import builtin, expression_problem, make_control
from .refine import refine_loop


def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _model_to_dict(model: PwlModel) -> dict:
    return {
        "mesh_nodes": model.mesh.nodes.tolist(),
        "theta_N": model.theta_N.tolist(),
        "pieces": [
            {
                "t0": p.t0,
                "t1": p.t1,
                "A_coeffs": p.A_coeffs.tolist(),
                "b_coeffs": p.b_coeffs.tolist(),
                "theta": p.theta.tolist(),
            }
            for p in model.pieces
        ],
    }


def model_from_dict(d: dict) -> PwlModel:
    mesh = Mesh(np.asarray(d["mesh_nodes"], dtype=float))
    pieces = tuple(
        Piece(
            float(pd["t0"]),
            float(pd["t1"]),
            np.asarray(pd["A_coeffs"], dtype=float),
            np.asarray(pd["b_coeffs"], dtype=float),
            np.asarray(pd["theta"], dtype=float),
        )
        for pd in d["pieces"]
    )
    return PwlModel(mesh, pieces, np.asarray(d["theta_N"], dtype=float))


def problem_from_spec(spec: dict):
    if "builtin" in spec:
        return builtin(spec["builtin"], **spec.get("params", {}))
    return expression_problem(
        spec["dim"],
        spec["field"],
        beta0=spec.get("beta0"),
        beta1=spec.get("beta1"),
        beta=spec.get("beta"),
        state_box=np.asarray(spec["state_box"], dtype=float),
    )


def write_trajectory_csv(model: PwlModel, problem, path: Path, samples: int = 201) -> None:
    """t, state, model derivative, field value and residual norm per sample."""
    ts = np.linspace(0.0, 1.0, samples)
    x = eval_model_many(model, ts)
    dx = model_derivative_many(model, ts)
    fx = problem.field_many(x, ts)
    rnorm = np.linalg.norm(dx - fx, axis=1)
    n = model.dim
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"dx{i + 1}" for i in range(n)]
        + [f"f{i + 1}" for i in range(n)]
        + ["residual_norm"]
    )
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, t in enumerate(ts):
            w.writerow([_fmt(t)] + [_fmt(v) for v in x[j]] + [_fmt(v) for v in dx[j]] + [_fmt(v) for v in fx[j]] + [_fmt(rnorm[j])])


def emit_plot_data(model: PwlModel, problem, path, samples: int = 201) -> None:
    """CSV with header t,x1..xn,residual_norm; 17-significant-digit floats."""
    path = Path(path)
    ts = np.linspace(0.0, 1.0, samples)
    x = eval_model_many(model, ts)
    dx = model_derivative_many(model, ts)
    fx = problem.field_many(x, ts)
    rnorm = np.linalg.norm(dx - fx, axis=1)
    header = ["t"] + [f"x{i + 1}" for i in range(model.dim)] + ["residual_norm"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, t in enumerate(ts):
            w.writerow([_fmt(t)] + [_fmt(v) for v in x[j]] + [_fmt(rnorm[j])])


def write_control_csv(model: PwlModel, problem, path: Path, samples: int = 201) -> None:
    u = make_control(model, problem)
    ts = np.linspace(0.0, 1.0, samples)
    vals = u(ts)
    header = ["t"] + [f"u{i + 1}" for i in range(model.dim)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, t in enumerate(ts):
            w.writerow([_fmt(t)] + [_fmt(v) for v in vals[j]])


def _write_error(outdir: Path, code: str, message: str, extra: dict | None = None) -> None:
    payload = {"error": code, "message": message}
    if extra:
        payload.update(extra)
    _json_dump(payload, outdir / "error.json")


def _solution_payload(model: PwlModel, problem, cfg: RunConfig, dp_cost: float, beta_res: float) -> dict:
    add = total_error(model, problem.field_many, quad=cfg.dp.quad)
    uni = total_error(model, problem.field_many, acc=ErrorAccumulator.uniform_max(), uniform_samples=cfg.dp.uniform_samples)
    vals = model.node_values()
    return {
        "problem": problem.spec or {},
        "model": _model_to_dict(model),
        "node_values": vals.tolist(),
        "theta_0": vals[0].tolist(),
        "theta_N": model.theta_N.tolist(),
        "total_error_additive": add,
        "total_error_uniform": uni,
        "dp_cost": dp_cost,
        "beta_residual": beta_res,
        "seed": cfg.seed,
    }


def run(cfg: RunConfig) -> int:
    """Execute the pipeline and write the artifact set; returns the exit code."""
    outdir = Path(os.environ.get("PWLBVP_OUTPUT_DIR", cfg.output_dir))
    outdir.mkdir(parents=True, exist_ok=True)
    problem = cfg.problem
    try:
        model, dp_cost, stats = dpmod.solve_dp(problem, cfg.mesh, cfg.dp)
    except InfeasibleDiscretization as e:
        _write_error(outdir, "infeasible_discretization", str(e), {"constraint": e.constraint})
        return 2
    except PwlBvpError as e:
        _write_error(outdir, "error", str(e))
        return 1
    _json_dump(stats.to_dict(), outdir / "dp_stats.json")

    exit_code = 0
    clog_dict = {"entries": [], "flag": "skipped", "best_index": 0}
    if cfg.refine_enabled:
        model, clog = refine_loop(model, problem, cfg.refine)
        clog_dict = clog.to_dict()
        if clog.flag == "diverged":
            exit_code = 3
    _json_dump(clog_dict, outdir / "convergence.json")

    beta_res = problem.boundary.residual(model.node_values()[0], model.theta_N)
    _json_dump(_solution_payload(model, problem, cfg, dp_cost, beta_res), outdir / "solution.json")
    write_trajectory_csv(model, problem, outdir / "trajectory.csv", cfg.trajectory_samples)
    _json_dump({"pieces": dpmod.stiffness_diagnostics(model, problem)}, outdir / "diagnostics.json")
    if exit_code == 3:
        _write_error(outdir, "refine_divergence", "refinement diverged; best iterate written")
    return exit_code


def _cmd_solve(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    return run(cfg)


def _cmd_validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    summary = {
        "problem": cfg.problem.spec or {},
        "mesh_intervals": cfg.mesh.N,
        "dp": {
            "mode": cfg.dp.mode,
            "accumulator": cfg.dp.accumulator.kind,
            "theta_points": cfg.dp.theta_counts,
            "v_points": cfg.dp.v_counts,
            "tube_iterations": cfg.dp.tube_iterations,
        },
        "refine_enabled": cfg.refine_enabled,
        "output_dir": cfg.output_dir,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_oracle(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    outdir = Path(os.environ.get("PWLBVP_OUTPUT_DIR", cfg.output_dir))
    outdir.mkdir(parents=True, exist_ok=True)
    v_box = cfg.dp.v_box if cfg.dp.v_box is not None else dpmod.auto_v_box(cfg.problem)
    grid = dpmod.discretize_states(cfg.problem.state_box, v_box, (cfg.dp.theta_counts, cfg.dp.v_counts))
    try:
        res = dpmod.brute_force_solve(cfg.problem, cfg.mesh, grid, cfg.dp)
    except GuardExceeded as e:
        _write_error(outdir, "guard_exceeded", str(e))
        return 1
    except InfeasibleDiscretization as e:
        _write_error(outdir, "infeasible_discretization", str(e), {"constraint": e.constraint})
        return 2
    _json_dump({"cost": res.cost, "path": list(res.path), "choices": [c for c in res.choices]}, outdir / "oracle.json")
    return 0


def _cmd_control(args) -> int:
    sol = json.loads(Path(args.solution).read_text())
    model = model_from_dict(sol["model"])
    problem = problem_from_spec(sol["problem"])
    out = Path(args.output or (Path(args.solution).parent / "control.csv"))
    write_control_csv(model, problem, out)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pwlbvp", description="Piecewise-linear BVP solver toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="run the DP + tube + refine pipeline")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_solve)
    p = sub.add_parser("validate", help="parse the config and report it")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_validate)
    p = sub.add_parser("oracle", help="guarded brute-force solve")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_oracle)
    p = sub.add_parser("control", help="emit the control curve for a written solution")
    p.add_argument("solution")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(fn=_cmd_control)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
