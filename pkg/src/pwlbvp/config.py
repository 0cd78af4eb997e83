"""Run-configuration files: INI-style sections, strict unknown-key checking."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .dp import DpConfig
from .errfun import ErrorAccumulator, QuadratureRule
from .exceptions import ConfigError
from .model import Mesh, Problem
from .problems import builtin, expression_problem
from .refine import RefineConfig

_KNOWN = {
    "problem": {
        "builtin",
        "params",
        "dim",
        "field",
        "beta0",
        "beta1",
        "beta",
        "state_box",
    },
    "mesh": {"n_intervals", "nodes"},
    "dp": {
        "theta_points",
        "v_points",
        "v_box",
        "mode",
        "accumulator",
        "quad_order",
        "quad_panels",
        "uniform_samples",
        "eps_beta",
        "eps_cont",
        "candidate_a",
        "tube_iterations",
        "tube_shrink",
    },
    "refine": {
        "enabled",
        "max_iterations",
        "residual_tol",
        "boundary_tol",
        "eta_strategy",
        "boundary_strategy",
        "line_search_bound",
        "substeps",
    },
    "output": {"directory", "seed", "trajectory_samples"},
}


@dataclass
class RunConfig:
    problem: Problem
    mesh: Mesh
    dp: DpConfig
    refine: RefineConfig
    refine_enabled: bool = True
    output_dir: str = "out"
    seed: int = 0
    trajectory_samples: int = 201
    raw: dict = field(default_factory=dict)


def _parse_floats(text: str) -> list[float]:
    items = [p for chunk in text.split(",") for p in chunk.split()]
    try:
        return [float(p) for p in items]
    except ValueError as e:
        raise ConfigError(f"expected numbers, got {text!r}") from e


def _parse_box(text: str, what: str) -> np.ndarray:
    """Per-dimension lo:hi ranges separated by commas, e.g. '-1:1, 0:2'."""
    rows = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 2:
            raise ConfigError(f"{what}: each range must look like lo:hi, got {part!r}")
        try:
            rows.append((float(bits[0]), float(bits[1])))
        except ValueError as e:
            raise ConfigError(f"{what}: non-numeric bound in {part!r}") from e
    if not rows:
        raise ConfigError(f"{what}: empty box specification")
    return np.asarray(rows, dtype=float)


def _parse_params(text: str) -> dict:
    """Comma-separated key=value pairs; values parse as float when possible."""
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"params entry must look like key=value, got {part!r}")
        key, val = part.split("=", 1)
        key = key.strip()
        val = val.strip()
        try:
            out[key] = float(val)
        except ValueError:
            out[key] = val
    return out


def _parse_matrices(text: str, n: int) -> list[np.ndarray]:
    """Candidate matrices separated by ';', each a row-major number list."""
    mats = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        vals = _parse_floats(part)
        if len(vals) != n * n:
            raise ConfigError(f"candidate matrix needs {n * n} entries for dimension {n}, got {len(vals)}")
        mats.append(np.asarray(vals, dtype=float).reshape(n, n))
    return mats


def parse_config(path: str) -> RunConfig:
    """Parse and validate a run-configuration file.

    Unknown sections or keys are hard errors (anti-typo); all defaults are
    documented in the README.
    """
    cp = configparser.ConfigParser(strict=True, interpolation=None)
    cp.optionxform = str.lower
    try:
        read = cp.read(path)
    except configparser.Error as e:
        # configparser messages carry line numbers
        raise ConfigError(f"config parse error: {e}") from e
    if not read:
        raise ConfigError(f"config file not found or unreadable: {path}")
    for section in cp.sections():
        if section not in _KNOWN:
            raise ConfigError(f"unknown section [{section}]; known: {sorted(_KNOWN)}")
        for key in cp[section]:
            if key not in _KNOWN[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]; known: {sorted(_KNOWN[section])}")

    def get(section, key, default=None):
        if cp.has_option(section, key):
            return cp.get(section, key)
        return default

    # problem
    if not cp.has_section("problem"):
        raise ConfigError("missing required section [problem]")
    name = get("problem", "builtin")
    if name is not None:
        params = _parse_params(get("problem", "params", ""))
        if cp.has_option("problem", "state_box"):
            params["box"] = _parse_box(get("problem", "state_box"), "problem.state_box")
        try:
            problem = builtin(name.strip(), **params)
        except TypeError as e:
            raise ConfigError(f"bad params for builtin {name!r}: {e}") from e
    else:
        dim_s = get("problem", "dim")
        if dim_s is None:
            raise ConfigError("problem needs either builtin=... or dim= with field expressions")
        dim = int(dim_s)
        fields = [s.strip() for s in get("problem", "field", "").split(";") if s.strip()]
        if len(fields) != dim:
            raise ConfigError(f"problem.field must give {dim} ';'-separated expressions, got {len(fields)}")
        box = _parse_box(get("problem", "state_box", "-3:3"), "problem.state_box")
        problem = expression_problem(
            dim,
            fields,
            beta0=get("problem", "beta0"),
            beta1=get("problem", "beta1"),
            beta=get("problem", "beta"),
            state_box=box,
        )

    # mesh
    if cp.has_option("mesh", "nodes"):
        nodes = np.asarray(_parse_floats(get("mesh", "nodes")), dtype=float)
        mesh = Mesh(nodes)
    else:
        n_int = int(get("mesh", "n_intervals", 8))
        if n_int < 2:
            raise ConfigError("mesh.n_intervals must satisfy N >= 2")
        mesh = Mesh.uniform(n_int)

    # dp
    acc_name = get("dp", "accumulator", "additive").strip().lower()
    if acc_name == "additive":
        acc = ErrorAccumulator.additive()
    elif acc_name in ("uniform", "uniform_max"):
        acc = ErrorAccumulator.uniform_max()
    else:
        raise ConfigError(f"unknown accumulator {acc_name!r}; use additive or uniform")
    mode = get("dp", "mode", "hermite").strip().lower()
    cand = ()
    if cp.has_option("dp", "candidate_a"):
        cand = tuple(_parse_matrices(get("dp", "candidate_a"), problem.dim))
    eps_beta = get("dp", "eps_beta", "auto").strip().lower()
    eps_cont = get("dp", "eps_cont", "auto").strip().lower()
    v_box = None
    if cp.has_option("dp", "v_box"):
        v_box = _parse_box(get("dp", "v_box"), "dp.v_box")
    try:
        dp_cfg = DpConfig(
            accumulator=acc,
            quad=QuadratureRule(order=int(get("dp", "quad_order", 5)), panels=int(get("dp", "quad_panels", 1))),
            uniform_samples=int(get("dp", "uniform_samples", 33)),
            eps_beta=None if eps_beta == "auto" else float(eps_beta),
            eps_cont=None if eps_cont == "auto" else float(eps_cont),
            mode=mode,
            candidate_A=cand,
            theta_counts=int(get("dp", "theta_points", 21)),
            v_counts=int(get("dp", "v_points", 11)),
            v_box=v_box,
            tube_iterations=int(get("dp", "tube_iterations", 2)),
            tube_shrink=float(get("dp", "tube_shrink", 0.5)),
        )
    except Exception as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid dp configuration: {e}") from e

    # refine
    refine_enabled = get("refine", "enabled", "true").strip().lower() in ("1", "true", "yes", "on")
    strategy = get("refine", "eta_strategy", "closed_form").strip().lower()
    try:
        refine_cfg = RefineConfig(
            max_iterations=int(get("refine", "max_iterations", 20)),
            residual_tol=float(get("refine", "residual_tol", 1e-8)),
            boundary_tol=float(get("refine", "boundary_tol", 1e-8)),
            eta_strategy=strategy,
            boundary_strategy=get("refine", "boundary_strategy", "gradient").strip().lower(),
            line_search_bound=float(get("refine", "line_search_bound", 4.0)),
            substeps=int(get("refine", "substeps", 8)),
            quad=dp_cfg.quad,
        )
    except Exception as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid refine configuration: {e}") from e

    return RunConfig(
        problem=problem,
        mesh=mesh,
        dp=dp_cfg,
        refine=refine_cfg,
        refine_enabled=refine_enabled,
        output_dir=get("output", "directory", "out"),
        seed=int(get("output", "seed", 0)),
        trajectory_samples=int(get("output", "trajectory_samples", 201)),
        raw={s: dict(cp[s]) for s in cp.sections()},
    )
