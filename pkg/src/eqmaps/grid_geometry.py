"""Logarithmic radial grids, quadrature, differentiation and the energy functionals.

All radial integrals ``∫ f(r) r dr`` are evaluated in the variable ``y = ln r``
where they become ``∫ f r² dy``.  The grid is uniform in ``y``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import ConfigurationError, DomainError

# Euler-Maclaurin end correction of the trapezoid rule, exact for polynomials of
# degree < 8 near each end.  All eight weights are positive.
_END_ORDER = 8
_BERNOULLI = {2: 1.0 / 6.0, 4: -1.0 / 30.0, 6: 1.0 / 42.0, 8: -1.0 / 30.0}


def _end_weights(k: int = _END_ORDER) -> np.ndarray:
    rhs = np.zeros(k)
    rhs[0] = -0.5
    for d in range(1, k, 2):
        rhs[d] = _BERNOULLI[d + 1] / (d + 1)
    vander = np.array([[float(j) ** d for j in range(k)] for d in range(k)])
    return 1.0 + np.linalg.solve(vander, rhs)


_GREGORY = _end_weights()

# eighth-order central first derivative, offsets 1..4 (antisymmetric)
_D1_CENTRAL = np.array([4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0])
# rows 0..3 near the left end as (first column, coefficients); fields are flat
# in y at both ends, so lower order there costs nothing
_D1_EDGE = (
    (0, np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0),
    (0, np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0),
    (0, np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0),
    (0, np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0),
)

SERIAL_DIGITS = 17


@dataclass(frozen=True, eq=False)
class LogRadialGrid:
    """Mesh uniform in ``y = ln r`` on ``[r_min, r_max]`` with ``n_points`` nodes."""

    r_min: float
    r_max: float
    n_points: int

    @cached_property
    def y_values(self) -> np.ndarray:
        return np.linspace(math.log(self.r_min), math.log(self.r_max), self.n_points)

    @cached_property
    def dy(self) -> float:
        return (math.log(self.r_max) - math.log(self.r_min)) / (self.n_points - 1)

    @cached_property
    def r_values(self) -> np.ndarray:
        return np.exp(self.y_values)

    @cached_property
    def dy_weights(self) -> np.ndarray:
        """Weights for ``∫ g dy`` (end-corrected trapezoid)."""
        w = np.full(self.n_points, self.dy)
        k = len(_GREGORY)
        w[:k] *= _GREGORY
        w[-k:] *= _GREGORY[::-1]
        return w

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """Weights for ``∫ f r dr = ∫ f r² dy``."""
        return self.dy_weights * self.r_values**2

    def scaled(self, s: float) -> "LogRadialGrid":
        """The same nodes expressed in ``ρ = r/s``."""
        return LogRadialGrid(self.r_min / s, self.r_max / s, self.n_points)

    def to_dict(self) -> dict:
        return {"r_min": self.r_min, "r_max": self.r_max, "n_points": self.n_points}

    @classmethod
    def from_dict(cls, data: dict) -> "LogRadialGrid":
        return cls(float(data["r_min"]), float(data["r_max"]), int(data["n_points"]))


def make_grid(r_min: float, r_max: float, n: int) -> LogRadialGrid:
    if not (np.isfinite(r_min) and np.isfinite(r_max)) or r_min <= 0 or r_max <= r_min:
        raise ConfigurationError(f"need 0 < r_min < r_max, got ({r_min}, {r_max})")
    if int(n) != n or n < 16:
        raise ConfigurationError(f"need an integer n >= 16, got {n}")
    return LogRadialGrid(float(r_min), float(r_max), int(n))


class Quadrature(float):
    """A float carrying the integrand magnitudes at the two boundary nodes.

    The pair ``tails`` is a truncation indicator: large values mean the
    integrand has not decayed at the ends of the grid.
    """

    def __new__(cls, value, tails=(0.0, 0.0)):
        obj = super().__new__(cls, value)
        obj.tails = (float(tails[0]), float(tails[1]))
        return obj


def integrate(grid: LogRadialGrid, f: np.ndarray) -> Quadrature:
    """``∫ f r dr`` over the grid."""
    f = np.asarray(f)
    integrand = f * grid.r_values**2
    value = np.sum(grid.quad_weights * f)
    return Quadrature(float(np.real(value)), (abs(integrand[0]), abs(integrand[-1])))


def integrate_dy(grid: LogRadialGrid, g: np.ndarray) -> Quadrature:
    """``∫ g dy``, i.e. ``∫ g dr / r``."""
    g = np.asarray(g)
    return Quadrature(float(np.real(np.sum(grid.dy_weights * g))), (abs(g[0]), abs(g[-1])))


def cumulative_dy(grid: LogRadialGrid, g: np.ndarray, start: int = 0) -> np.ndarray:
    """Running integral ``G(y_j) = ∫_{y_start}^{y_j} g dy`` of fourth order.

    Each cell uses the cubic through the four nearest nodes; the result is
    zero at node ``start`` and signed on both sides of it.
    """
    g = np.asarray(g)
    n = g.shape[0]
    h = grid.dy
    cell = np.empty((n - 1,) + g.shape[1:], dtype=np.result_type(g, float))
    cell[1:-1] = h * (-g[:-3] + 13.0 * g[1:-2] + 13.0 * g[2:-1] - g[3:]) / 24.0
    cell[0] = h * (9.0 * g[0] + 19.0 * g[1] - 5.0 * g[2] + g[3]) / 24.0
    cell[-1] = h * (9.0 * g[-1] + 19.0 * g[-2] - 5.0 * g[-3] + g[-4]) / 24.0
    total = np.concatenate([np.zeros((1,) + g.shape[1:], dtype=cell.dtype), np.cumsum(cell, axis=0)])
    return total - total[start]


def tail_integral_dy(grid: LogRadialGrid, g: np.ndarray) -> np.ndarray:
    """``∫_{y_j}^{y_max} g dy`` accumulated inward with a zero tail beyond ``r_max``."""
    return -cumulative_dy(grid, g, start=grid.n_points - 1)


def _edge_rows(n: int):
    """``(row, first column, coefficients)`` for the near-boundary rows at both ends."""
    for j, (c0, coef) in enumerate(_D1_EDGE):
        yield j, c0, coef
        yield n - 1 - j, n - c0 - len(coef), -coef[::-1]


def derivative_matrix(grid: LogRadialGrid) -> sparse.csr_matrix:
    """Sparse ``∂_y``: eighth order inside, one-sided or lower order in the last four rows."""
    n = grid.n_points
    rows, cols, vals = [], [], []
    inner = np.arange(4, n - 4)
    for k, c in enumerate(_D1_CENTRAL, start=1):
        for sign in (1, -1):
            rows.append(inner), cols.append(inner + sign * k), vals.append(np.full(inner.size, sign * c))
    for j, c0, coef in _edge_rows(n):
        rows.append(np.full(coef.size, j)), cols.append(np.arange(c0, c0 + coef.size)), vals.append(coef)
    return sparse.csr_matrix((np.concatenate(vals) / grid.dy,
                              (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def d_dy(grid: LogRadialGrid, f: np.ndarray) -> np.ndarray:
    """``∂_y`` along axis 0 (vectorized over trailing axes), as ``derivative_matrix``."""
    f = np.asarray(f)
    n = f.shape[0]
    out = np.zeros_like(f, dtype=np.result_type(f, float))
    for k, c in enumerate(_D1_CENTRAL, start=1):
        out[4:-4] += c * (f[4 + k:n - 4 + k] - f[4 - k:n - 4 - k])
    for j, c0, coef in _edge_rows(n):
        out[j] = np.tensordot(coef, f[c0:c0 + coef.size], axes=(0, 0))
    return out / grid.dy


def d_dr(grid: LogRadialGrid, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    r = grid.r_values.reshape((-1,) + (1,) * (f.ndim - 1))
    return d_dy(grid, f) / r


@dataclass(frozen=True, eq=False)
class SphereField:
    """Samples of the profile ``v(r)`` of ``u = e^{mθR} v(r)``; shape (n, 3)."""

    grid: LogRadialGrid
    values: np.ndarray
    equivariance_index: int = 1
    unit_tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_points, 3):
            raise DomainError(f"expected shape ({self.grid.n_points}, 3), got {vals.shape}")
        dev = np.max(np.abs(np.linalg.norm(vals, axis=1) - 1.0))
        if not dev <= self.unit_tol:
            raise DomainError(f"field is not unit length (max deviation {dev:.3e})")
        if self.equivariance_index < 1:
            raise DomainError("equivariance index must be >= 1")
        object.__setattr__(self, "values", vals)

    def boundary_trend(self) -> tuple[float, float]:
        """Distances of the end values from ``-k̂`` and ``+k̂``."""
        k = np.array([0.0, 0.0, 1.0])
        return float(np.linalg.norm(self.values[0] + k)), float(np.linalg.norm(self.values[-1] - k))

    def to_csv(self, path) -> None:
        _write_csv(path, self.grid, ["v1", "v2", "v3"], self.values.T)

    def to_json(self) -> str:
        return _to_json(self.grid, self.values.tolist(), m=self.equivariance_index)

    @classmethod
    def from_json(cls, text: str) -> "SphereField":
        data = json.loads(text)
        grid = LogRadialGrid.from_dict(data["grid"])
        return cls(grid, np.array(data["values"], dtype=float), int(data.get("m", 1)))


@dataclass(frozen=True, eq=False)
class ComplexRadialField:
    grid: LogRadialGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != (self.grid.n_points,):
            raise DomainError(f"expected {self.grid.n_points} samples, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("non-finite samples")
        object.__setattr__(self, "values", vals)

    def to_csv(self, path, r_label: str = "r", names=("re", "im")) -> None:
        _write_csv(path, self.grid, list(names), [self.values.real, self.values.imag], r_label)

    @classmethod
    def from_csv(cls, path, grid: LogRadialGrid) -> "ComplexRadialField":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        arr = np.array([[float(x) for x in row] for row in rows])
        return cls(grid, arr[:, 1] + 1j * arr[:, 2])

    def to_json(self) -> str:
        return _to_json(self.grid, [[v.real, v.imag] for v in self.values])

    @classmethod
    def from_json(cls, text: str) -> "ComplexRadialField":
        data = json.loads(text)
        vals = np.array(data["values"], dtype=float)
        return cls(LogRadialGrid.from_dict(data["grid"]), vals[:, 0] + 1j * vals[:, 1])


def _fmt(x: float) -> str:
    return f"{float(x):.{SERIAL_DIGITS}g}"


def _write_csv(path, grid, names, columns, r_label="r") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([r_label, *names])
        for j, r in enumerate(grid.r_values):
            writer.writerow([_fmt(r)] + [_fmt(col[j]) for col in columns])


def _to_json(grid, values, **extra) -> str:
    # json emits shortest round-trip reprs, which are exact at <= 17 digits
    return json.dumps({"grid": grid.to_dict(), "values": values, **extra})


@dataclass(frozen=True, eq=False)
class HarmonicProfile:
    m: int
    grid: LogRadialGrid
    h1: np.ndarray
    h3: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.stack([self.h1, np.zeros_like(self.h1), self.h3], axis=1)


def harmonic_components(m: int, rho) -> tuple[np.ndarray, np.ndarray]:
    """``h1 = 2/(ρ^m + ρ^-m)`` and ``h3 = (ρ^m − ρ^-m)/(ρ^m + ρ^-m)``, overflow-free."""
    my = m * np.log(np.asarray(rho, dtype=float))
    return 1.0 / np.cosh(my), np.tanh(my)


def harmonic_profile(m: int, grid: LogRadialGrid, s: float = 1.0) -> HarmonicProfile:
    if int(m) != m or m < 1:
        raise ConfigurationError(f"equivariance index must be a positive integer, got {m}")
    h1, h3 = harmonic_components(int(m), grid.r_values / s)
    return HarmonicProfile(int(m), grid, h1, h3)


def rotation(alpha: float) -> np.ndarray:
    """``e^{αR}``: rotation by α about the third axis."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def harmonic_map(m: int, grid: LogRadialGrid, s: float = 1.0, alpha: float = 0.0) -> SphereField:
    h1, h3 = harmonic_components(m, grid.r_values / s)
    vals = np.stack([h1, np.zeros_like(h1), h3], axis=1) @ rotation(alpha).T
    return SphereField(grid, vals, m)


def _field_values(v) -> tuple[LogRadialGrid, np.ndarray]:
    if isinstance(v, SphereField):
        return v.grid, v.values
    raise DomainError("expected a SphereField")


def energy_density_dy(grid: LogRadialGrid, values: np.ndarray, m: int) -> np.ndarray:
    """Energy integrand per unit ``y``: ``|v_y|² + m²(v1² + v2²)``."""
    vy = d_dy(grid, values)
    return np.sum(vy**2, axis=1) + m**2 * (values[:, 0] ** 2 + values[:, 1] ** 2)


def energy(v: SphereField, m: int) -> Quadrature:
    """``π ∫ (|v_r|² + (m²/r²)(v1² + v2²)) r dr``."""
    grid, vals = _field_values(v)
    dev = np.max(np.abs(np.linalg.norm(vals, axis=1) - 1.0))
    if dev > 1e-10:
        raise DomainError(f"energy requires a unit field (deviation {dev:.3e})")
    q = integrate_dy(grid, energy_density_dy(grid, vals, m))
    return Quadrature(math.pi * q, tuple(math.pi * t for t in q.tails))


def energy_excess(v: SphereField, m: int) -> Quadrature:
    e = energy(v, m)
    return Quadrature(e - 4.0 * math.pi * m, e.tails)


def dirichlet_distance(v: SphereField, w: np.ndarray, m: int) -> float:
    """Equivariant Ḣ¹ distance ``‖e^{mθR}(v − w)‖_{Ḣ¹}``."""
    diff = v.values - w
    return math.sqrt(2.0 * math.pi * integrate_dy(v.grid, energy_density_dy(v.grid, diff, m)))


def _complex_values(z) -> tuple[LogRadialGrid, np.ndarray]:
    if isinstance(z, ComplexRadialField):
        return z.grid, z.values
    raise DomainError("expected a ComplexRadialField")


def x_norm(z: ComplexRadialField) -> Quadrature:
    """``(∫ (|z_ρ|² + |z|²/ρ²) ρ dρ)^{1/2} = (∫ |z_y|² + |z|² dy)^{1/2}``."""
    grid, vals = _complex_values(z)
    dens = np.abs(d_dy(grid, vals)) ** 2 + np.abs(vals) ** 2
    q = integrate_dy(grid, dens)
    return Quadrature(math.sqrt(max(q, 0.0)), q.tails)


def l2_norm(z: ComplexRadialField) -> Quadrature:
    """``(∫ |z|² r dr)^{1/2}``."""
    grid, vals = _complex_values(z)
    q = integrate(grid, np.abs(vals) ** 2)
    return Quadrature(math.sqrt(max(q, 0.0)), q.tails)


@dataclass(frozen=True)
class NormSpec:
    """Admissible Strichartz pair in two dimensions: ``1/r + 1/p = 1/2``."""

    r_exponent: float
    p_exponent: float

    def __post_init__(self):
        r, p = self.r_exponent, self.p_exponent
        if not (2.0 < r <= math.inf and 2.0 <= p < math.inf):
            raise ConfigurationError(f"non-admissible exponents (r={r}, p={p})")
        inv_r = 0.0 if math.isinf(r) else 1.0 / r
        if abs(inv_r + 1.0 / p - 0.5) > 1e-12:
            raise ConfigurationError(f"1/r + 1/p must equal 1/2 (r={r}, p={p})")


STRICHARTZ_PAIRS = (NormSpec(math.inf, 2.0), NormSpec(4.0, 4.0), NormSpec(8.0 / 3.0, 8.0))
WEIGHTED = "weighted"


def _time_integral(samples: np.ndarray, dt: float) -> float:
    if samples.size == 1:
        return 0.0
    return float(dt * (np.sum(samples) - 0.5 * (samples[0] + samples[-1])))


def spacetime_norm(history: Sequence, spec, dt: float) -> float:
    """Mixed norm ``L^r_t L^p_x`` of uniformly sampled frames, or the weighted
    ``‖q/r‖_{L²_t L²_x}`` when ``spec == "weighted"``.  Spatial norms use ``r dr``.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    frames = [np.asarray(f.values if isinstance(f, ComplexRadialField) else f) for f in history]
    if not frames:
        return 0.0
    grid = history[0].grid if isinstance(history[0], ComplexRadialField) else None
    if grid is None:
        raise ConfigurationError("history frames must be ComplexRadialField")
    if spec == WEIGHTED:
        per_frame = np.array([integrate(grid, np.abs(f) ** 2 / grid.r_values**2) for f in frames])
        return math.sqrt(max(_time_integral(per_frame, dt), 0.0))
    if not isinstance(spec, NormSpec):
        raise ConfigurationError(f"unknown norm spec {spec!r}")
    p = spec.p_exponent
    spatial = np.array([max(integrate(grid, np.abs(f) ** p), 0.0) ** (1.0 / p) for f in frames])
    if math.isinf(spec.r_exponent):
        return float(np.max(spatial))
    r = spec.r_exponent
    return max(_time_integral(spatial**r, dt), 0.0) ** (1.0 / r)


def y_norm(history: Sequence, dt: float) -> dict:
    """Components of the Y norm and its value (max of Strichartz parts plus the weighted part)."""
    parts = {f"L{_label(s.r_exponent)}L{_label(s.p_exponent)}": spacetime_norm(history, s, dt)
             for s in STRICHARTZ_PAIRS}
    weighted = spacetime_norm(history, WEIGHTED, dt)
    return {**parts, "weighted": weighted, "Y": max(parts.values()) + weighted}


def _label(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return f"{x:g}"
