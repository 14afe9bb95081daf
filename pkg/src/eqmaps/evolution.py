"""Time integration of the equivariant map flow and of the (q, s, α) system,
with the stability diagnostics recorded along trajectories.

The full flow ``v_t = (1/r²) v × (v_yy + m² R² v)`` is discretized with a
staggered gradient so that its discrete energy is an exact quadratic invariant
of the implicit midpoint rule, as is ``|v| = 1`` at every node.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.optimize import brentq
from scipy.sparse import linalg as spla

from .errors import ConfigurationError, ConvergenceError, NumericalError, OutOfRegimeError
from .grid_geometry import (STRICHARTZ_PAIRS, ComplexRadialField, LogRadialGrid, SphereField,
                            _label, d_dr, energy, energy_excess, integrate, l2_norm,
                            tail_integral_dy)
from .hasimoto import HasimotoData, frame_transport, hasimoto_extract, reconstruct_z
from .linops import OperatorKind, build_operator, cayley_propagator
from .modulation import (ModulationState, OrthogonalityKind, assemble_map, check_kind,
                         modulation_rhs, project_orthogonal, split)

_R2 = np.diag([-1.0, -1.0, 0.0])

# staggered first derivative onto cell midpoints: coefficients of f_{i+k} − f_{i+1−k}
_STAGGERED = (np.array([1.0]),
              np.array([9.0 / 8.0, -1.0 / 24.0]),
              np.array([1225.0 / 1024.0, -245.0 / 3072.0, 49.0 / 5120.0, -5.0 / 7168.0]))


def staggered_gradient(grid: LogRadialGrid) -> sparse.csr_matrix:
    """``∂_y`` from nodes to midpoints: eighth order inside, lower order near the ends."""
    n = grid.n_points
    rows, cols, vals = [], [], []
    for i in range(n - 1):
        width = min(i + 1, n - 1 - i)
        coef = _STAGGERED[0] if width == 1 else _STAGGERED[1] if width < 4 else _STAGGERED[2]
        for k, c in enumerate(coef, start=1):
            rows += [i, i]
            cols += [i + k, i + 1 - k]
            vals += [c, -c]
    return sparse.csr_matrix((np.array(vals) / grid.dy, (rows, cols)), shape=(n - 1, n))


@lru_cache(maxsize=8)
def _flow_operators(grid: LogRadialGrid):
    grad = staggered_gradient(grid)
    lap = sparse.csr_matrix(-(grad.T @ grad))
    return grad, lap, sparse.csr_matrix(sparse.kron(lap, sparse.eye(3)))


def _flow_field(grid: LogRadialGrid, v: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    _, lap, _ = _flow_operators(grid)
    b = lap @ v + m * m * (v @ _R2)
    return np.cross(v, b) / grid.r_values[:, None] ** 2, b


def _cross_blocks(a: np.ndarray) -> sparse.bsr_matrix:
    n = a.shape[0]
    blocks = np.zeros((n, 3, 3))
    blocks[:, 0, 1], blocks[:, 0, 2] = -a[:, 2], a[:, 1]
    blocks[:, 1, 0], blocks[:, 1, 2] = a[:, 2], -a[:, 0]
    blocks[:, 2, 0], blocks[:, 2, 1] = -a[:, 1], a[:, 0]
    return sparse.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(3 * n, 3 * n))


def _flow_jacobian(grid: LogRadialGrid, v: np.ndarray, m: int) -> sparse.csr_matrix:
    _, _, lap3 = _flow_operators(grid)
    n = grid.n_points
    _, b = _flow_field(grid, v, m)
    lin = lap3 + m * m * sparse.kron(sparse.eye(n), _R2)
    jac = -_cross_blocks(b) + _cross_blocks(v) @ lin
    return sparse.csr_matrix(sparse.diags(np.repeat(1.0 / grid.r_values**2, 3)) @ jac)


def flow_energy(v: SphereField, m: int) -> float:
    """The discrete energy conserved by ``step_full_flow``."""
    grad, _, _ = _flow_operators(v.grid)
    g = grad @ v.values
    vals = v.values
    return math.pi * v.grid.dy * float(np.sum(g**2) + m * m * np.sum(vals[:, :2] ** 2))


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    v: SphereField
    modulation: ModulationState | None = None
    hasimoto: HasimotoData | None = None

    def with_diagnostics(self, m: int, kind=None, seed=None) -> "FlowState":
        mod = self.modulation
        if mod is None:
            mod = split(self.v, m, kind, seed=seed)
        has = self.hasimoto
        if has is None:
            has = hasimoto_extract(self.v, frame_transport(self.v, mod.alpha), m)
        return FlowState(self.t, self.v, mod, has)


def step_full_flow(state: FlowState, dt: float, m: int, *, tol: float = 1e-12,
                   max_iter: int = 30) -> FlowState:
    """One implicit-midpoint step, solved by simplified Newton on the midpoint value."""
    if dt == 0 or not math.isfinite(dt):
        raise ConfigurationError("dt must be a nonzero finite number")
    grid = state.v.grid
    v0 = state.v.values
    n = grid.n_points
    jac = _flow_jacobian(grid, v0, m)
    lu = spla.splu(sparse.csc_matrix(sparse.eye(3 * n) - 0.5 * dt * jac))
    w = v0.copy()
    trace = []
    for _ in range(max_iter):
        f, _ = _flow_field(grid, w, m)
        res = w - v0 - 0.5 * dt * f
        delta = lu.solve(res.ravel()).reshape(n, 3)
        w -= delta
        size = float(np.max(np.abs(delta)))
        if not math.isfinite(size):
            raise NumericalError(f"midpoint iteration produced non-finite values; reduce dt={dt}")
        trace.append(size)
        # below 1e-10 a stalled update is the roundoff floor of the residual
        if size < tol or (size < 1e-10 and len(trace) > 1 and size > 0.5 * trace[-2]):
            break
    else:
        raise ConvergenceError(f"midpoint iteration did not converge at t={state.t}; reduce dt={dt}",
                               size, trace)
    v1 = 2.0 * w - v0
    v1 /= np.linalg.norm(v1, axis=1)[:, None]
    return FlowState(state.t + dt, SphereField(grid, v1, m, unit_tol=1e-12))


# ---------------------------------------------------------------------------
# the (q, s, α) system

def assemble_potentials(v3, q: ComplexRadialField, nu: ComplexRadialField, m: int
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Potentials of the ``q̃`` equation: ``V1`` (map part), ``V2`` (quadratic part)
    and the gauge field ``S = −Q/2 + ∫_r^∞ Q/τ dτ`` with ``Q = |q|² + (2m/r) Re(ν̄q)``.
    """
    grid = q.grid
    if nu.grid.n_points != grid.n_points:
        raise ConfigurationError("q and ν must share a grid")
    v3 = np.asarray(getattr(v3, "values", v3), dtype=float)
    r = grid.r_values
    qv, nv = q.values, nu.values
    v1 = m * (1.0 + v3) * (m * v3 - m - 2.0) / r**2 + m * d_dr(grid, v3) / r
    cross = (m / r) * np.real(np.conj(nv) * qv)
    v2 = 0.5 * np.abs(qv) ** 2 + cross
    big_q = np.abs(qv) ** 2 + 2.0 * cross
    s_field = -0.5 * big_q + tail_integral_dy(grid, big_q)
    return v1, v2, s_field


@dataclass(frozen=True, eq=False)
class QSAState:
    t: float
    q_tilde: ComplexRadialField
    s: float
    alpha: float

    def __post_init__(self):
        if not self.s > 0:
            raise OutOfRegimeError(f"scale reached {self.s} at t={self.t}")


@dataclass(frozen=True)
class QSARates:
    potential: np.ndarray
    s_dot: float
    alpha_dot: float
    s_field: np.ndarray
    z: ComplexRadialField


def qsa_rates(q: ComplexRadialField, s: float, alpha: float, m: int, *,
              kind=OrthogonalityKind.X, nonlinear: bool = True) -> QSARates:
    """Potential and modulation speeds at ``(q, s, α)``.

    The frame at ``r_min`` is pinned to the rotated profile, so besides the
    potentials of the ``q̃`` equation the phase picks up ``−S(r_min) − α̇``.
    """
    grid = q.grid
    n = grid.n_points
    if not nonlinear or not np.any(q.values):
        zero = np.zeros(n)
        z = ComplexRadialField(grid.scaled(s), np.zeros(n, dtype=complex))
        return QSARates(zero, 0.0, 0.0, zero, z)
    z = reconstruct_z(q, s, alpha, m, kind=kind)
    mod = ModulationState(s, alpha, z)
    v = assemble_map(mod, m, grid=grid)
    data = hasimoto_extract(v, frame_transport(v, alpha), m)
    v1, v2, s_field = assemble_potentials(data.v3, q, data.nu, m)
    s_dot, alpha_dot = modulation_rhs(mod, m, kind)
    potential = v1 - v2 + tail_integral_dy(grid, 2.0 * v2) - s_field[0] - alpha_dot
    return QSARates(potential, s_dot, alpha_dot, s_field, z)


@lru_cache(maxsize=8)
def _free_half_step(grid: LogRadialGrid, m: int, dt: float):
    op = build_operator(OperatorKind.FREE, m, grid, angular_index=m + 1, order=4)
    return cayley_propagator(op, 0.5 * dt)


def step_qsa(state: QSAState, dt: float, m: int, *, kind=OrthogonalityKind.X,
             nonlinear: bool = True) -> QSAState:
    """Strang step: half free step, potential kick with midpoint-evaluated
    potential and modulation speeds, half free step."""
    if dt == 0 or not math.isfinite(dt):
        raise ConfigurationError("dt must be a nonzero finite number")
    grid = state.q_tilde.grid
    half = _free_half_step(grid, m, dt)
    qa = half(state.q_tilde.values)
    field_a = ComplexRadialField(grid, qa)
    pred = qsa_rates(field_a, state.s, state.alpha, m, kind=kind, nonlinear=nonlinear)
    s_half = state.s + 0.5 * dt * pred.s_dot
    if not s_half > 0:
        raise OutOfRegimeError(f"scale reached {s_half} at t={state.t + 0.5 * dt}")
    q_half = ComplexRadialField(grid, np.exp(-0.5j * dt * pred.potential) * qa)
    mid = qsa_rates(q_half, s_half, state.alpha + 0.5 * dt * pred.alpha_dot, m,
                    kind=kind, nonlinear=nonlinear)
    qb = np.exp(-1j * dt * mid.potential) * qa
    q1 = half(qb)
    if not np.all(np.isfinite(q1)):
        raise NumericalError(f"non-finite q at t={state.t + dt}; reduce dt={dt}")
    return QSAState(state.t + dt, ComplexRadialField(grid, q1),
                    state.s + dt * mid.s_dot, state.alpha + dt * mid.alpha_dot)


def qsa_state_from_map(v: SphereField, m: int, t: float = 0.0, *,
                       kind=OrthogonalityKind.X, seed=None) -> QSAState:
    """Split ``v`` and read off ``q`` in the frame pinned to the rotated profile."""
    mod = split(v, m, kind, seed=seed)
    data = hasimoto_extract(v, frame_transport(v, mod.alpha), m)
    return QSAState(t, data.q, mod.s, mod.alpha)


# ---------------------------------------------------------------------------
# initial data and stability experiments

def make_perturbation(m: int, grid: LogRadialGrid, delta1: float, *, s0: float = 1.0,
                      alpha0: float = 0.0, kind=None) -> ModulationState:
    """Perturbation ``c ρ^m e^{−ρ}(1+i)/√2`` projected off the constraint, with ``c``
    chosen so the energy excess equals ``delta1²``.  ``grid`` is the physical grid."""
    kind = check_kind(kind, m)
    rho_grid = grid.scaled(s0)
    if delta1 < 0:
        raise ConfigurationError("delta1 must be non-negative")
    rho = rho_grid.r_values
    shape = project_orthogonal(
        ComplexRadialField(rho_grid, rho**m * np.exp(-rho) * (1.0 + 1.0j) / math.sqrt(2.0)), m, kind)
    shape = shape.values / np.max(np.abs(shape.values))
    if delta1 == 0:
        return ModulationState(s0, alpha0, ComplexRadialField(rho_grid, 0.0 * shape))

    def excess(c):
        mod = ModulationState(s0, alpha0, ComplexRadialField(rho_grid, c * shape))
        return float(energy_excess(assemble_map(mod, m, grid=grid), m)) - delta1**2

    hi = 0.05
    while excess(hi) < 0:
        hi *= 2.0
        if hi >= 0.9:
            raise OutOfRegimeError(f"energy excess {delta1}² is out of reach of small perturbations")
    c = brentq(excess, 0.0, hi, xtol=1e-14, rtol=1e-13)
    return ModulationState(s0, alpha0, ComplexRadialField(rho_grid, c * shape))


class _YAccumulator:
    """Running Strichartz and weighted space-time norms of uniformly sampled ``q``."""

    def __init__(self, spacing: float):
        self.spacing = spacing
        self.count = 0
        self.sup = 0.0
        self.sums = {spec: 0.0 for spec in STRICHARTZ_PAIRS[1:]}
        self.weighted = 0.0
        self._last = None

    def add(self, q: ComplexRadialField) -> float:
        grid = q.grid
        a2 = np.abs(q.values) ** 2
        now = {spec: max(float(integrate(grid, a2 ** (spec.p_exponent / 2))), 0.0)
               ** (spec.r_exponent / spec.p_exponent) for spec in self.sums}
        now["weighted"] = max(float(integrate(grid, a2 / grid.r_values**2)), 0.0)
        self.sup = max(self.sup, math.sqrt(max(float(integrate(grid, a2)), 0.0)))
        if self._last is not None:
            for spec in self.sums:
                self.sums[spec] += 0.5 * self.spacing * (self._last[spec] + now[spec])
            self.weighted += 0.5 * self.spacing * (self._last["weighted"] + now["weighted"])
        self._last = now
        self.count += 1
        return self.value

    def components(self) -> dict:
        parts = {f"L{_label(STRICHARTZ_PAIRS[0].r_exponent)}L{_label(STRICHARTZ_PAIRS[0].p_exponent)}":
                 self.sup}
        for spec, total in self.sums.items():
            parts[f"L{_label(spec.r_exponent)}L{_label(spec.p_exponent)}"] = total ** (1.0 / spec.r_exponent)
        weighted = math.sqrt(self.weighted)
        return {**parts, "weighted": weighted, "Y": max(parts.values()) + weighted}

    @property
    def value(self) -> float:
        return self.components()["Y"]


CSV_COLUMNS = ("t", "energy", "excess", "s", "alpha", "q_l2", "q_over_r_l2",
               "y_norm_partial", "ode_ratio")


@dataclass
class TrajectoryDiagnostics:
    m: int
    delta1: float
    integrator: str
    series: dict = field(default_factory=lambda: {k: [] for k in CSV_COLUMNS + ("s_field_l2",)})
    y_components: dict = field(default_factory=dict)
    blowup: bool = False
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def record(self, **values) -> None:
        t = values["t"]
        if self.series["t"] and not t > self.series["t"][-1]:
            raise NumericalError("sampling times must increase")
        for key, x in values.items():
            if not math.isfinite(x):
                raise NumericalError(f"non-finite {key} at t={t}")
            self.series[key].append(float(x))

    def array(self, key: str) -> np.ndarray:
        return np.asarray(self.series[key])

    def summary(self) -> dict:
        s, alpha = self.array("s"), self.array("alpha")
        t, qr = self.array("t"), self.array("q_over_r_l2")
        out = {"m": self.m, "delta1": self.delta1, "integrator": self.integrator,
               "samples": len(t), "final_time": float(t[-1]) if len(t) else 0.0,
               "blowup": self.blowup, "wall_time": self.wall_time}
        if len(t):
            s_drift = float(np.max(np.abs(s / s[0] - 1.0)))
            a_drift = float(np.max(np.abs(alpha - alpha[0])))
            ratio = self.array("ode_ratio")
            out.update({
                "max_s_drift": s_drift, "max_alpha_drift": a_drift,
                "s_drift_constant": s_drift / self.delta1**2 if self.delta1 else None,
                "alpha_drift_constant": a_drift / self.delta1**2 if self.delta1 else None,
                "q_over_r_sq_time_integral": float(np.trapezoid(qr**2, t)) if len(t) > 1 else 0.0,
                "max_ode_ratio": float(np.max(ratio)),
                "energy_drift": float(np.max(np.abs(self.array("energy") / self.series["energy"][0] - 1.0))),
                "y_norm": self.y_components,
            })
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# config: " + json.dumps(self.config, sort_keys=True) + "\n")
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in zip(*(self.series[k] for k in CSV_COLUMNS)):
                writer.writerow([repr(x) for x in row])

    def write(self, directory, stem: str = "trajectory") -> None:
        from pathlib import Path
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_csv(directory / f"{stem}.csv")
        payload = {"config": self.config, "summary": self.summary()}
        (directory / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


@dataclass(frozen=True)
class ExperimentSettings:
    grid: LogRadialGrid = field(default_factory=lambda: LogRadialGrid(1e-4, 1e4, 2048))
    dt: float | str = 0.01
    integrator: str = "full_flow"
    orthogonality: str | None = None
    delta: float = 0.5
    sample_every: int = 10
    output_dir: str | None = None
    config: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, config) -> "ExperimentSettings":
        if config is None:
            return cls()
        if isinstance(config, cls):
            return config
        grid = getattr(config, "grid", None)
        if isinstance(grid, dict):
            grid = LogRadialGrid(float(grid["r_min"]), float(grid["r_max"]), int(grid["n"]))
        echo = config.to_dict() if hasattr(config, "to_dict") else {}
        kind = getattr(config, "orthogonality", None)
        return cls(grid=grid or cls().grid, dt=getattr(config, "dt", 0.01),
                   integrator=getattr(config, "integrator", "full_flow"),
                   orthogonality=None if kind == "auto" else kind,
                   delta=float(getattr(config, "delta", 0.5)),
                   sample_every=int(getattr(config, "sample_every", 10)),
                   output_dir=getattr(config, "output_dir", None), config=echo)


def auto_dt(grid: LogRadialGrid, s0: float = 1.0) -> float:
    return 0.25 * grid.dy**2 * s0**2


def _wrap_near(angle: float, ref: float) -> float:
    return ref + (angle - ref + math.pi) % (2.0 * math.pi) - math.pi


def run_stability_experiment(m: int, delta1: float, T: float, config=None) -> TrajectoryDiagnostics:
    """Evolve perturbed harmonic-map data with energy excess ``delta1²`` and record
    modulation and dispersion diagnostics.  Reports; asserts nothing."""
    settings = ExperimentSettings.from_config(config)
    if int(m) != m or m < 1:
        raise ConfigurationError("m must be a positive integer")
    if not T > 0:
        raise ConfigurationError("T must be positive")
    if delta1 > settings.delta:
        raise OutOfRegimeError(f"delta1={delta1} exceeds the regime threshold {settings.delta}")
    grid = settings.grid
    kind = check_kind(settings.orthogonality, m)
    dt = auto_dt(grid) if settings.dt == "auto" else float(settings.dt)
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    steps = int(math.ceil(T / dt - 1e-9))
    dt = T / steps
    every = max(1, settings.sample_every)
    integrator = settings.integrator
    if integrator not in ("full_flow", "qsa"):
        raise ConfigurationError(f"unknown integrator {integrator!r}")

    mod0 = make_perturbation(m, grid, delta1, kind=kind)
    v0 = assemble_map(mod0, m, grid=grid)
    config_echo = dict(settings.config) or {"grid": grid.to_dict(), "dt": dt, "integrator": integrator}
    # where artifacts go does not change them
    config_echo.pop("output_dir", None)
    config_echo.update({"m": m, "delta1": delta1, "T": T, "dt_used": dt,
                        "exploratory": m < 4})
    diag = TrajectoryDiagnostics(m, delta1, integrator, config=config_echo)
    acc = _YAccumulator(every * dt)
    s0 = mod0.s
    start = time.perf_counter()

    state_s, state_alpha = mod0.s, mod0.alpha

    def sample(t, v, s, alpha, q, s_dot, alpha_dot, nu, v3):
        _, _, s_field = assemble_potentials(v3, q, nu, m)
        e = float(energy(v, m))
        qr2 = max(float(integrate(grid, np.abs(q.values) ** 2 / grid.r_values**2)), 0.0)
        ratio = (abs(s * s_dot) + abs(s * s * alpha_dot)) / qr2 if qr2 > 0 else 0.0
        diag.record(t=t, energy=e, excess=e - 4.0 * math.pi * m, s=s, alpha=alpha,
                    q_l2=float(l2_norm(q)), q_over_r_l2=math.sqrt(qr2),
                    y_norm_partial=acc.add(q), ode_ratio=ratio,
                    s_field_l2=float(l2_norm(ComplexRadialField(grid, s_field.astype(complex)))))

    def sample_map(t, v, seed):
        nonlocal state_s, state_alpha
        mod = split(v, m, kind, seed=seed)
        alpha = _wrap_near(mod.alpha, state_alpha)
        mod = ModulationState(mod.s, alpha, mod.z)
        data = hasimoto_extract(v, frame_transport(v, alpha), m)
        s_dot, alpha_dot = modulation_rhs(mod, m, kind)
        state_s, state_alpha = mod.s, alpha
        sample(t, v, mod.s, alpha, data.q, s_dot, alpha_dot, data.nu, data.v3)
        return mod

    try:
        if integrator == "full_flow":
            flow = FlowState(0.0, v0)
            sample_map(0.0, v0, (mod0.s, mod0.alpha))
            for k in range(1, steps + 1):
                flow = step_full_flow(flow, dt, m)
                if k % every == 0 or k == steps:
                    mod = sample_map(k * dt, flow.v, (state_s, state_alpha))
                    if mod.s < 1e-6 * s0:
                        diag.blowup = True
                        break
        else:
            qkind = OrthogonalityKind.X
            qs = qsa_state_from_map(v0, m, kind=qkind, seed=(mod0.s, mod0.alpha))
            for k in range(0, steps + 1):
                if k:
                    qs = step_qsa(qs, dt, m, kind=qkind)
                if k % every == 0 or k == steps:
                    rates = qsa_rates(qs.q_tilde, qs.s, qs.alpha, m, kind=qkind)
                    mod = ModulationState(qs.s, qs.alpha, rates.z)
                    v = assemble_map(mod, m, grid=grid)
                    data = hasimoto_extract(v, frame_transport(v, qs.alpha), m)
                    sample(qs.t, v, qs.s, qs.alpha, qs.q_tilde, rates.s_dot, rates.alpha_dot,
                           data.nu, data.v3)
                if qs.s < 1e-6 * s0:
                    diag.blowup = True
                    break
    except (OutOfRegimeError, NumericalError) as exc:
        diag.wall_time = time.perf_counter() - start
        diag.y_components = acc.components() if acc.count else {}
        exc.partial = diag
        if settings.output_dir:
            diag.write(settings.output_dir, "partial_trajectory")
        raise
    diag.wall_time = time.perf_counter() - start
    diag.y_components = acc.components()
    if settings.output_dir:
        diag.write(settings.output_dir)
    return diag
