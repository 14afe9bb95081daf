"""Run configuration, the verification suite and the ``eqmaps`` command line."""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np
from scipy.integrate import quad, solve_ivp

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError, DomainError, NumericalError, OutOfRegimeError
from .evolution import (FlowState, auto_dt, make_perturbation, qsa_state_from_map,
                        run_stability_experiment, step_full_flow, step_qsa)
from .grid_geometry import (ComplexRadialField, LogRadialGrid, energy, harmonic_components,
                            harmonic_map, l2_norm, make_grid, x_norm)
from .hasimoto import (frame_system_matrix, frame_transport, hasimoto_extract, propagator_matrix,
                       propagator_p, reconstruct_z)
from .linops import (OperatorKind, build_operator, coercivity_spectrum, kato_smoothing_probe,
                     midpoints, potential_asymptotics, repulsivity_check, resolvent_probe,
                     unweighted_resolvent_norm)
from .modulation import (ModulationState, OrthogonalityKind, assemble_map, default_kind,
                         project_orthogonal, split)

INTEGRATORS = ("full_flow", "qsa", "both")
PROBES = ("repulsivity", "asymptotics", "coercivity", "resolvent", "kato")
EXIT_OK, EXIT_CONFIG, EXIT_REGIME, EXIT_NUMERICAL = 0, 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    m: int = 4
    grid: dict = field(default_factory=lambda: {"r_min": 1e-4, "r_max": 1e4, "n": 2048})
    delta1: float = 0.05
    T: float = 1.0
    dt: float | str = 0.01
    integrator: str = "full_flow"
    orthogonality: str = "auto"
    probes: tuple = ("repulsivity",)
    output_dir: str = "runs"
    seed: int = 0
    delta: float = 0.5
    sample_every: int = 10
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if isinstance(self.m, bool) or int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"m must be a positive integer, got {self.m!r}")
        g = self.grid
        try:
            r_min, r_max, n = float(g["r_min"]), float(g["r_max"]), int(g["n"])
        except (KeyError, TypeError, ValueError):
            raise ConfigurationError("grid needs numeric r_min, r_max and n") from None
        if not 0 < r_min < 1 < r_max:
            raise ConfigurationError("grid must satisfy 0 < r_min < 1 < r_max")
        if n < 16:
            raise ConfigurationError("grid needs at least 16 points")
        for name in ("T", "delta"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not self.delta1 >= 0:
            raise ConfigurationError("delta1 must be non-negative")
        if self.dt != "auto" and not (isinstance(self.dt, (int, float)) and self.dt > 0):
            raise ConfigurationError("dt must be positive or 'auto'")
        if self.integrator not in INTEGRATORS:
            raise ConfigurationError(f"integrator must be one of {INTEGRATORS}")
        if self.orthogonality not in ("auto", "L2", "X"):
            raise ConfigurationError("orthogonality must be L2, X or auto")
        unknown = set(self.probes) - set(PROBES)
        if unknown:
            raise ConfigurationError(f"unknown probes {sorted(unknown)}")
        if self.sample_every < 1:
            raise ConfigurationError("sample_every must be at least 1")

    @property
    def log_grid(self) -> LogRadialGrid:
        return make_grid(float(self.grid["r_min"]), float(self.grid["r_max"]), int(self.grid["n"]))

    @property
    def kind(self) -> OrthogonalityKind:
        return default_kind(self.m) if self.orthogonality == "auto" else OrthogonalityKind(self.orthogonality)

    @property
    def step(self) -> float:
        return auto_dt(self.log_grid) if self.dt == "auto" else float(self.dt)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["probes"] = list(self.probes)
        return out


_FIELDS = {f for f in RunConfig.__dataclass_fields__}


def _flatten(data: dict) -> dict:
    """Accept flat keys or ``[run]``, ``[grid]``, ``[probes]`` and ``[sweep]`` sections."""
    flat = {}
    for key, value in data.items():
        if key == "grid":
            flat["grid"] = dict(value)
        elif key == "probes" and isinstance(value, dict):
            flat["probes"] = tuple(value.get("enabled", ()))
        elif key == "sweep":
            flat["sweep"] = dict(value)
        elif isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    if "probes" in flat:
        flat["probes"] = tuple(flat["probes"])
    unknown = set(flat) - _FIELDS
    if unknown:
        raise ConfigurationError(f"unknown configuration keys {sorted(unknown)}")
    return flat


def load_config(path=None, **overrides) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    flat = _flatten(data)
    grid = dict(RunConfig().grid)
    grid.update(flat.pop("grid", {}))
    for key in ("r_min", "r_max", "n"):
        if overrides.get(key) is not None:
            grid[key] = overrides.pop(key)
        overrides.pop(key, None)
    flat.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(grid=grid, **flat)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


# ---------------------------------------------------------------------------
# verification suite

@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e})"


def _check(name, value, tol, upper=True) -> Check:
    value = float(value)
    ok = math.isfinite(value) and (value < tol if upper else value >= tol)
    return Check(name, value, tol, ok)


def _midpoint_l2(grid: LogRadialGrid, f: np.ndarray) -> float:
    mid = midpoints(grid)
    return math.sqrt(grid.dy * float(np.sum(mid**2 * np.abs(f) ** 2)))


def _smooth_perturbation(grid: LogRadialGrid, m: int, size: float, rng) -> ComplexRadialField:
    rho = grid.r_values
    a, b = rng.uniform(0.5, 1.5, size=2)
    z = (a * rho**m * np.exp(-rho) + 1j * b * rho ** (m + 1) * np.exp(-rho / 2) / 50.0)
    z = project_orthogonal(ComplexRadialField(grid, z), m, OrthogonalityKind.X)
    return ComplexRadialField(grid, z.values * size / float(x_norm(z)))


def verification_suite(config: RunConfig) -> list[Check]:
    m, grid, rng = config.m, config.log_grid, config.rng()
    checks = []
    worst = max(abs(float(energy(harmonic_map(m, grid, s), m)) / (4 * math.pi * m) - 1.0)
                for s in (0.5, 1.0, 2.0))
    checks.append(_check("harmonic map energy equals 4πm (relative)", worst, 5e-6))

    r = grid.r_values
    h1, _ = harmonic_components(m, r)
    h1f = ComplexRadialField(grid, h1.astype(complex))
    n_op = build_operator(OperatorKind.N, m, grid)
    l0 = build_operator(OperatorKind.L0, m, grid)
    checks.append(_check("N h1 relative to h1 in X", float(l2_norm(ComplexRadialField(
        grid, n_op.apply(h1).astype(complex)))) / float(x_norm(h1f)), 1e-6))
    checks.append(_check("L0 h1 relative to h1", _midpoint_l2(grid, l0.apply(h1)) / float(l2_norm(h1f)), 1e-6))
    adj = build_operator(OperatorKind.L0_ADJOINT, m, grid)
    product_form = adj.compose(l0)
    fields = rng.standard_normal((grid.n_points, 100))
    gap = np.max(np.abs(n_op.matrix @ fields - product_form.matrix @ fields))
    checks.append(_check("N minus L0*L0 on random fields (max)", gap, 1e-9))

    rho_s, r_s = np.exp(rng.uniform(-4, 4, size=(2, 1000)))
    exact = np.array([-quad(lambda t: m / t * harmonic_components(m, t)[0], a, b,
                            epsabs=1e-14, epsrel=1e-13)[0] for a, b in zip(rho_s[:50], r_s[:50])])
    closed = propagator_p(rho_s, r_s, m)
    formula_gap = np.max(np.abs(closed + 2.0 * (np.arctan(r_s**m) - np.arctan(rho_s**m))))
    checks.append(_check("propagator phase closed form", formula_gap, 1e-12))
    checks.append(_check("propagator phase against quadrature", np.max(np.abs(closed[:50] - exact)), 1e-10))
    worst = 0.0
    for a, b in zip(rho_s[:20], r_s[:20]):
        x0 = rng.standard_normal(2)
        sol = solve_ivp(lambda t, x: frame_system_matrix(t, m) @ x, (a, b), x0, method="DOP853",
                        rtol=1e-12, atol=1e-14)
        worst = max(worst, float(np.max(np.abs(sol.y[:, -1] - propagator_matrix(a, b, m) @ x0))))
    checks.append(_check("propagator matrix against ODE solve", worst, 1e-8))

    s, alpha = rng.uniform(0.7, 1.5), rng.uniform(-1.0, 1.0)
    for size in (1e-3, 1e-2):
        z = _smooth_perturbation(grid.scaled(s), m, size, rng)
        v = assemble_map(ModulationState(s, alpha, z), m, grid=grid)
        data = hasimoto_extract(v, frame_transport(v, alpha), m)
        back = reconstruct_z(data.q, s, alpha, m)
        err = float(x_norm(ComplexRadialField(z.grid, back.values - z.values))) / size
        checks.append(_check(f"round trip z to q to z at |z|_X={size:g}", err, 1e-6))
        mod = split(v, m, OrthogonalityKind.X, seed=(1.0, 0.0))
        checks.append(_check(f"split recovers scale and rotation at |z|_X={size:g}",
                             max(abs(mod.s - s), abs(mod.alpha - alpha)), 1e-8))

    if m >= 2:
        rep = repulsivity_check(m, grid)
        checks.append(_check("1 + r²V at least (m-1)²", (m - 1) ** 2 - rep.min_one_plus_r2V, 1e-12))
        checks.append(_check("1 + r²V at most (m+1)²", rep.max_one_plus_r2V - (m + 1) ** 2, 1e-12))
        checks.append(_check("repulsivity margin", rep.min_repulsivity - rep.lower_bound, -1e-9, upper=False))
    return checks


# ---------------------------------------------------------------------------
# subcommands

def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))


def cmd_verify(config: RunConfig, out: Path) -> int:
    start = time.perf_counter()
    checks = verification_suite(config)
    for c in checks:
        print(c.line())
    _write_json(out / "verify.json", {"config": config.to_dict(), "wall_time": time.perf_counter() - start,
                                      "checks": [asdict(c) for c in checks]})
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERICAL


def cmd_simulate(config: RunConfig, out: Path) -> int:
    integrators = ("full_flow", "qsa") if config.integrator == "both" else (config.integrator,)
    for name in integrators:
        cfg = replace(config, integrator=name, output_dir=str(out / name))
        diag = run_stability_experiment(config.m, config.delta1, config.T, cfg)
        summary = diag.summary()
        print(json.dumps({k: summary[k] for k in ("integrator", "final_time", "blowup", "max_s_drift",
                                                   "max_alpha_drift", "max_ode_ratio")}, default=float))
    return EXIT_OK


def run_probe(name: str, config: RunConfig) -> dict:
    m, grid = config.m, config.log_grid
    if name == "repulsivity":
        return repulsivity_check(m, grid).to_dict()
    if name == "asymptotics":
        inner, outer = potential_asymptotics(m, grid)
        return {"inner": inner, "outer": outer, "expected_inner": (m + 1) ** 2,
                "expected_outer": (m - 1) ** 2}
    if name == "coercivity":
        return {f"b={b}_{kind or 'none'}": coercivity_spectrum(m, b, kind, grid)
                for b in (0.0, 1.0) for kind in (None, config.kind.value)
                if not (kind and (m < 3 or (b == 1.0 and m <= 3)))}
    if name == "resolvent":
        op = build_operator(OperatorKind.H, m, grid)
        rng = config.rng()
        mus = rng.uniform(-3, 3, 16) + 1j * 10 ** rng.uniform(-2, 1, 16)
        return {"weighted_max": resolvent_probe(m, grid, mus, op),
                "unweighted_at_i": unweighted_resolvent_norm(op, 1j)}
    if name == "kato":
        rng = config.rng()
        r = grid.r_values
        out = {}
        for c in sorted(rng.uniform(1.0, 2.0, 3)):
            phi = (r / c) ** 4 * np.exp(-((r / c) ** 2)) + 0j
            rep = kato_smoothing_probe(m, grid, phi, config.T, config.step)
            out[f"width={c:.4f}"] = {"ratio": rep.ratio, "norm_drift": rep.max_norm_drift}
        return out
    raise ConfigurationError(f"unknown probe {name!r}")


def cmd_probe(config: RunConfig, out: Path, names) -> int:
    names = names or config.probes
    unknown = set(names) - set(PROBES)
    if unknown:
        raise ConfigurationError(f"unknown probes {sorted(unknown)}")
    report = {}
    for name in names:
        report[name] = run_probe(name, config)
        print(name, json.dumps(report[name], default=float))
    _write_json(out / "probe.json", {"config": config.to_dict(), "probes": report})
    return EXIT_OK


def _sweep_job(args) -> dict:
    data, directory = args
    cfg = RunConfig(**data)
    code = main(["simulate", "--from-dict", json.dumps(data), "--output-dir", directory])
    return {"config": cfg.to_dict(), "exit_code": code, "directory": directory}


def cmd_sweep(config: RunConfig, out: Path, workers: int) -> int:
    if not config.sweep:
        raise ConfigurationError("sweep needs a [sweep] section of parameter lists")
    keys = sorted(config.sweep)
    base = config.to_dict()
    base.pop("sweep")
    jobs = []
    for k, values in enumerate(product(*(config.sweep[key] for key in keys))):
        data = dict(base, **dict(zip(keys, values)))
        RunConfig(**data)
        jobs.append((data, str(out / f"job_{k:03d}")))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_sweep_job, jobs))
    _write_json(out / "sweep.json", {"config": config.to_dict(), "jobs": results})
    return max(r["exit_code"] for r in results)


def _orders(diffs) -> list:
    return [math.log2(a / b) if a > 0 and b > 0 else float("nan") for a, b in zip(diffs, diffs[1:])]


def convergence_study(config: RunConfig, levels: int = 3, mode: str = "dt") -> dict:
    """Successive differences and observed orders of the final ``q`` under dt or grid halving."""
    m = config.m
    if mode not in ("dt", "grid"):
        raise ConfigurationError("convergence mode must be dt or grid")
    base = config.log_grid
    runs = []
    for level in range(levels):
        if mode == "dt":
            grid, dt = base, config.step / 2**level
        else:
            n = (base.n_points - 1) * 2**level + 1
            grid, dt = make_grid(base.r_min, base.r_max, n), config.step
        v0 = assemble_map(make_perturbation(m, grid, config.delta1, kind=config.kind), m, grid=grid)
        steps = int(math.ceil(config.T / dt - 1e-9))
        dt = config.T / steps
        if config.integrator == "qsa":
            state = qsa_state_from_map(v0, m)
            for _ in range(steps):
                state = step_qsa(state, dt, m)
            q = state.q_tilde.values
        else:
            flow = FlowState(0.0, v0)
            for _ in range(steps):
                flow = step_full_flow(flow, dt, m)
            mod = split(flow.v, m, config.kind)
            q = hasimoto_extract(flow.v, frame_transport(flow.v, mod.alpha), m).q.values
        runs.append(q[:: 2**level] if mode == "grid" else q)
    diffs = [float(l2_norm(ComplexRadialField(base, a - b))) for a, b in zip(runs, runs[1:])]
    return {"mode": mode, "differences": diffs, "orders": _orders(diffs)}


def cmd_convergence(config: RunConfig, out: Path, levels: int, mode: str) -> int:
    report = convergence_study(config, levels, mode)
    print(json.dumps(report))
    _write_json(out / "convergence.json", {"config": config.to_dict(), **report})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file; flags override its values")
    common.add_argument("--from-dict", help=argparse.SUPPRESS)
    common.add_argument("--m", type=int, help="equivariance index")
    common.add_argument("--r-min", type=float, dest="r_min", help="inner grid radius")
    common.add_argument("--r-max", type=float, dest="r_max", help="outer grid radius")
    common.add_argument("--n", type=int, help="number of grid points")
    common.add_argument("--delta1", type=float, help="square root of the energy excess of the initial data")
    common.add_argument("--T", type=float, dest="T", help="final time")
    common.add_argument("--dt", help="time step, or 'auto'")
    common.add_argument("--integrator", choices=INTEGRATORS, help="time integrator")
    common.add_argument("--orthogonality", choices=("auto", "L2", "X"), help="splitting condition")
    common.add_argument("--output-dir", dest="output_dir", help="directory for artifacts")
    common.add_argument("--seed", type=int, help="seed of the random generator")
    common.add_argument("--delta", type=float, help="regime threshold for delta1 and |q|")
    common.add_argument("--sample-every", type=int, dest="sample_every", help="steps between diagnostics")

    parser = argparse.ArgumentParser(
        prog="eqmaps", description="Equivariant maps near the harmonic map: checks, probes and simulations.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run the identity and invariant checks")
    sub.add_parser("simulate", parents=[common], help="evolve perturbed data and record diagnostics")
    probe = sub.add_parser("probe", parents=[common], help="operator probes")
    probe.add_argument("names", nargs="*", help=f"probes to run, from {', '.join(PROBES)}")
    sweep = sub.add_parser("sweep", parents=[common], help="simulate over a grid of configurations")
    sweep.add_argument("--workers", type=int, default=2, help="parallel jobs")
    conv = sub.add_parser("convergence", parents=[common], help="dt or grid halving study")
    conv.add_argument("--levels", type=int, default=3, help="number of resolutions")
    conv.add_argument("--mode", choices=("dt", "grid"), default="dt", help="what to refine")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in ("m", "r_min", "r_max", "n", "delta1", "T", "integrator",
                                               "orthogonality", "output_dir", "seed", "delta",
                                               "sample_every")}
    if args.dt is not None:
        overrides["dt"] = args.dt if args.dt == "auto" else _number(args.dt)
    if args.from_dict:
        data = json.loads(args.from_dict)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**data)
    return load_config(args.config, **overrides)


def _number(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigurationError(f"dt must be a number or 'auto', got {text!r}") from None


def run(subcommand: str, config: RunConfig, **options) -> int:
    """Execute one subcommand; returns the process exit code."""
    out = Path(config.output_dir)
    try:
        if subcommand == "verify":
            return cmd_verify(config, out)
        if subcommand == "simulate":
            return cmd_simulate(config, out)
        if subcommand == "probe":
            return cmd_probe(config, out, options.get("names"))
        if subcommand == "sweep":
            return cmd_sweep(config, out, options.get("workers", 2))
        if subcommand == "convergence":
            return cmd_convergence(config, out, options.get("levels", 3), options.get("mode", "dt"))
        raise ConfigurationError(f"unknown subcommand {subcommand!r}")
    except ConfigurationError as exc:
        return _fail(out, EXIT_CONFIG, exc)
    except (OutOfRegimeError, DomainError) as exc:
        return _fail(out, EXIT_REGIME, exc)
    except NumericalError as exc:
        return _fail(out, EXIT_NUMERICAL, exc)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = _config_from_args(args)
    except ConfigurationError as exc:
        return _fail(None, EXIT_CONFIG, exc)
    options = {k: getattr(args, k) for k in ("names", "workers", "levels", "mode") if hasattr(args, k)}
    return run(args.command, config, **options)


def _fail(out, code: int, exc: Exception) -> int:
    report = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    for attr in ("residual", "trace"):
        if getattr(exc, attr, None) is not None:
            report[attr] = getattr(exc, attr)
    print(json.dumps(report, default=float), file=sys.stderr)
    if out is not None:
        try:
            _write_json(out / "error.json", report)
        except OSError:
            pass
    return code
