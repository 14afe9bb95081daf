"""Splitting a map into a rotated, rescaled harmonic profile plus a tangential
perturbation ``z``, and the ODE for the scale ``s`` and rotation ``α``.

Notation: ``ĵ = (0,1,0)``, ``h = (h1, 0, h3)``, ``J^h ĵ = h × ĵ = (-h3, 0, h1)``.
A complex ``z = z1 + i z2`` stands for the tangent vector ``z1 ĵ + z2 J^h ĵ``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ConvergenceError, DomainError, OutOfRegimeError
from .grid_geometry import (ComplexRadialField, LogRadialGrid, SphereField, d_dr, d_dy,
                            dirichlet_distance, energy_excess, harmonic_components, integrate,
                            rotation)

J_HAT = np.array([0.0, 1.0, 0.0])
K_HAT = np.array([0.0, 0.0, 1.0])
GENERATOR = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


class OrthogonalityKind(str, Enum):
    L2 = "L2"
    X = "X"


def default_kind(m: int) -> OrthogonalityKind:
    return OrthogonalityKind.L2 if m >= 3 else OrthogonalityKind.X


def check_kind(kind, m: int) -> OrthogonalityKind:
    kind = default_kind(m) if kind is None else OrthogonalityKind(kind)
    if kind is OrthogonalityKind.L2 and m < 3:
        raise ConfigurationError("L2 orthogonality needs m >= 3 (ρh1 must lie in L²)")
    return kind


def frame_vectors(h1: np.ndarray, h3: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(h, ĵ, J^h ĵ)`` sampled along the profile, each of shape (n, 3)."""
    zero = np.zeros_like(h1)
    h = np.stack([h1, zero, h3], axis=1)
    j = np.stack([zero, np.ones_like(h1), zero], axis=1)
    jh = np.stack([-h3, zero, h1], axis=1)
    return h, j, jh


def basis_decode(z: np.ndarray, h1: np.ndarray, h3: np.ndarray) -> np.ndarray:
    _, j, jh = frame_vectors(h1, h3)
    return z.real[:, None] * j + z.imag[:, None] * jh


def basis_encode(eta: np.ndarray, h1: np.ndarray, h3: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    h, j, jh = frame_vectors(h1, h3)
    normal = np.einsum("ij,ij->i", eta, h)
    if np.max(np.abs(normal), initial=0.0) > tol:
        raise DomainError(f"vector field is not tangent to h (max |η·h| = {np.max(np.abs(normal)):.3e})")
    return np.einsum("ij,ij->i", eta, j) + 1j * np.einsum("ij,ij->i", eta, jh)


def tangent_coordinates(w: np.ndarray, h1: np.ndarray, h3: np.ndarray) -> np.ndarray:
    """Coordinates of the projection of ``w`` onto ``T_h S²``."""
    _, j, jh = frame_vectors(h1, h3)
    return np.einsum("ij,ij->i", w, j) + 1j * np.einsum("ij,ij->i", w, jh)


@dataclass(frozen=True)
class GammaField:
    gamma: np.ndarray
    gamma_rho: np.ndarray


def _gamma_values(z: np.ndarray) -> np.ndarray:
    mod2 = np.abs(z) ** 2
    if np.max(mod2, initial=0.0) > 1.0:
        raise DomainError("|z| > 1: γ = (1 − |z|²)^{1/2} − 1 is undefined")
    # (1 − |z|²)^{1/2} − 1 without cancellation
    return -mod2 / (np.sqrt(1.0 - mod2) + 1.0)


def gamma_from_z(z: ComplexRadialField) -> GammaField:
    gamma = _gamma_values(z.values)
    z_rho = d_dr(z.grid, z.values)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma_rho = -np.real(np.conj(z.values) * z_rho) / (1.0 + gamma)
    return GammaField(gamma, gamma_rho)


@dataclass(frozen=True, eq=False)
class ModulationState:
    """Scale, rotation and perturbation; ``z`` lives on the grid of ``ρ = r/s``."""

    s: float
    alpha: float
    z: ComplexRadialField

    def __post_init__(self):
        if not self.s > 0:
            raise DomainError(f"scale must be positive, got {self.s}")

    def physical_grid(self) -> LogRadialGrid:
        g = self.z.grid
        return LogRadialGrid(g.r_min * self.s, g.r_max * self.s, g.n_points)

    def save(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".z.csv")
        self.z.to_csv(csv_path, r_label="rho", names=("re_z", "im_z"))
        payload = {"s": self.s, "alpha": self.alpha, "z_csv_ref": csv_path.name,
                   "grid": self.z.grid.to_dict()}
        json_path.write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, json_path) -> "ModulationState":
        json_path = Path(json_path)
        data = json.loads(json_path.read_text())
        grid = LogRadialGrid.from_dict(data["grid"])
        z = ComplexRadialField.from_csv(json_path.parent / data["z_csv_ref"], grid)
        return cls(float(data["s"]), float(data["alpha"]), z)


def assemble_values(z: np.ndarray, rho: np.ndarray, alpha: float, m: int) -> np.ndarray:
    if np.max(np.abs(z), initial=0.0) >= 1.0:
        raise DomainError("|z| >= 1 at some node")
    h1, h3 = harmonic_components(m, rho)
    gamma = _gamma_values(z)
    z1, z2 = z.real, z.imag
    local = np.stack([(1.0 + gamma) * h1 - h3 * z2, z1, (1.0 + gamma) * h3 + h1 * z2], axis=1)
    return local @ rotation(alpha).T


def assemble_map(state: ModulationState, m: int, grid: LogRadialGrid | None = None) -> SphereField:
    """``v(r) = e^{αR}[(1+γ)h + z1 ĵ + z2 J^h ĵ](r/s)``."""
    grid = state.physical_grid() if grid is None else grid
    if grid.n_points != state.z.grid.n_points:
        raise ConfigurationError("grid size does not match the perturbation samples")
    vals = assemble_values(state.z.values, grid.r_values / state.s, state.alpha, m)
    return SphereField(grid, vals, m, unit_tol=1e-12)


def orthogonality_weight(kind: OrthogonalityKind, m: int, rho: np.ndarray) -> np.ndarray:
    """Test function ``g`` with orthogonality written as ``(g, z)_{L²(ρdρ)} = 0``.

    For the X kind, ``⟨h1, z⟩_X = (N0 h1, z)_{L²}`` and ``N0 h1 = 2m² h1³/ρ²``.
    """
    h1, _ = harmonic_components(m, rho)
    if kind is OrthogonalityKind.L2:
        return h1
    return 2.0 * m * m * h1**3 / rho**2


def _weight_log_derivative(kind: OrthogonalityKind, m: int, rho: np.ndarray) -> np.ndarray:
    """``ρ g_ρ / g``."""
    _, h3 = harmonic_components(m, rho)
    if kind is OrthogonalityKind.L2:
        return -m * h3
    return -3.0 * m * h3 - 2.0


def l0_of_weight(kind: OrthogonalityKind, m: int, rho: np.ndarray) -> np.ndarray:
    """``L0 g = g_ρ + (m/ρ) h3 g`` in closed form."""
    h1, h3 = harmonic_components(m, rho)
    if kind is OrthogonalityKind.L2:
        return np.zeros_like(rho)
    return -4.0 * m * m * h1**3 * (1.0 + m * h3) / rho**3


def pairing(grid: LogRadialGrid, f: np.ndarray, g: np.ndarray) -> complex:
    """``∫ f g ρ dρ`` (bilinear; ``f`` is real in all uses)."""
    return complex(np.sum(grid.quad_weights * f * g))


def orthogonality_residual(z: ComplexRadialField, m: int, kind=None) -> complex:
    """``(g, z)/(g, h1)``: zero exactly on the orthogonal complement of ``h1``."""
    kind = check_kind(kind, m)
    rho = z.grid.r_values
    g = orthogonality_weight(kind, m, rho)
    h1, _ = harmonic_components(m, rho)
    return pairing(z.grid, g, z.values) / pairing(z.grid, g, h1).real


def project_orthogonal(z: ComplexRadialField, m: int, kind=None) -> ComplexRadialField:
    kind = check_kind(kind, m)
    h1, _ = harmonic_components(m, z.grid.r_values)
    coef = orthogonality_residual(z, m, kind)
    return ComplexRadialField(z.grid, z.values - coef * h1)


def x_product(grid: LogRadialGrid, f: np.ndarray, g: np.ndarray, m: int) -> complex:
    """``⟨f, g⟩_X = ∫ (f̄_ρ g_ρ + (m²/ρ²) f̄ g) ρ dρ``."""
    fy, gy = d_dy(grid, f), d_dy(grid, g)
    dens = np.conj(fy) * gy + m * m * np.conj(f) * g
    return complex(np.sum(grid.dy_weights * dens))


# ---------------------------------------------------------------------------
# splitting

def _coordinates(v: SphereField, s: float, alpha: float, m: int) -> np.ndarray:
    """``z(ρ_j) = (ĵ + i J^h ĵ)(ρ_j) · e^{-αR} v(r_j)`` with ``ρ_j = r_j/s``."""
    h1, h3 = harmonic_components(m, v.grid.r_values / s)
    local = v.values @ rotation(alpha)
    return local[:, 1] + 1j * (-h3 * local[:, 0] + h1 * local[:, 2])


def _split_residual(v, s, alpha, m, kind):
    """Orthogonality functional and its derivatives in ``(ln s, α)``.

    The functional ``∫ g(ρ) z(ρ) ρ dρ`` is written in the physical variable,
    ``s^{-2} ∫ g(r/s) c(r/s)·e^{-αR} v(r) r dr`` with ``c = ĵ + i J^h ĵ``, so only
    the explicit profile is differentiated.
    """
    r = v.grid.r_values
    rho = r / s
    h1, h3 = harmonic_components(m, rho)
    g = orthogonality_weight(kind, m, rho)
    w = v.grid.quad_weights / s**2
    local = v.values @ rotation(alpha)
    dlocal = -local @ GENERATOR.T
    c_dot = lambda x: x[:, 1] + 1j * (-h3 * x[:, 0] + h1 * x[:, 2])
    z = c_dot(local)
    f_val = np.sum(w * g * z)
    d_alpha = np.sum(w * g * c_dot(dlocal))
    # d/d ln s of s^{-2} g(ρ) c(ρ) equals -(2 + ρ∂_ρ) applied to g c
    cy = -1j * m * h1**2 * local[:, 0] - 1j * m * h1 * h3 * local[:, 2]
    gy = g * _weight_log_derivative(kind, m, rho)
    d_lns = np.sum(w * (-2.0 * g * z - gy * z - g * cy))
    norm = np.sum(v.grid.quad_weights * g * h1) / s**2
    return f_val / norm, d_lns / norm, d_alpha / norm


def _initial_scale(v: SphereField) -> float:
    v3 = v.values[:, 2]
    idx = np.nonzero(np.diff(np.sign(v3)) > 0)[0]
    if idx.size == 0:
        return 1.0
    j = idx[0]
    y = v.grid.y_values
    t = v3[j] / (v3[j] - v3[j + 1])
    return float(math.exp(y[j] + t * (y[j + 1] - y[j])))


def lattice_seed(v: SphereField, m: int, s0: float | None = None) -> tuple[float, float]:
    """Coarse minimizer of the Ḣ¹ distance to ``e^{αR} h(·/s)`` over a fixed lattice."""
    s0 = _initial_scale(v) if s0 is None else s0
    best = (math.inf, s0, 0.0)
    for k in range(-8, 9):
        s = s0 * 2.0 ** (k / 8.0)
        h1, h3 = harmonic_components(m, v.grid.r_values / s)
        base = np.stack([h1, np.zeros_like(h1), h3], axis=1)
        for j in range(32):
            alpha = 2.0 * math.pi * j / 32.0
            dist = dirichlet_distance(v, base @ rotation(alpha).T, m)
            if dist < best[0]:
                best = (dist, s, alpha)
    return best[1], best[2]


def split(v: SphereField, m: int, kind=None, *, max_excess: float = 0.25, tol: float = 1e-10,
          max_iter: int = 50, s0: float | None = None, seed: tuple[float, float] | None = None
          ) -> ModulationState:
    """Find ``(s, α, z)`` with ``v = e^{αR}[(1+γ)h + z](·/s)`` and ``z`` orthogonal to ``h1``."""
    kind = check_kind(kind, m)
    excess = energy_excess(v, m)
    if excess > max_excess:
        raise OutOfRegimeError(f"energy excess {float(excess):.3e} exceeds {max_excess:.3e}")
    s, alpha = seed if seed is not None else lattice_seed(v, m, s0)
    lns = math.log(s)
    res, dls, dal = _split_residual(v, s, alpha, m, kind)
    trace = [abs(res)]
    for _ in range(max_iter):
        if abs(res) < tol:
            break
        jac = np.array([[dls.real, dal.real], [dls.imag, dal.imag]])
        try:
            step = np.linalg.solve(jac, -np.array([res.real, res.imag]))
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular splitting Jacobian", abs(res), trace) from None
        lam = 1.0
        while True:
            trial = _split_residual(v, math.exp(lns + lam * step[0]), alpha + lam * step[1], m, kind)
            if abs(trial[0]) < abs(res) or lam < 1e-4:
                break
            lam *= 0.5
        lns, alpha = lns + lam * step[0], alpha + lam * step[1]
        res, dls, dal = trial
        trace.append(abs(res))
    else:
        if abs(res) >= tol:
            raise ConvergenceError(f"splitting Newton did not converge (residual {abs(res):.3e})",
                                   abs(res), trace)
    s = math.exp(lns)
    alpha = alpha % (2.0 * math.pi)
    z = _coordinates(v, s, alpha, m)
    if np.max(np.abs(z)) > 0.5:
        raise OutOfRegimeError(f"perturbation too large after splitting (max |z| = {np.max(np.abs(z)):.3f})")
    return ModulationState(s, alpha, ComplexRadialField(v.grid.scaled(s), z))


# ---------------------------------------------------------------------------
# modulation equations

def projected_f1_pairing(grid: LogRadialGrid, z: np.ndarray, m: int, g: np.ndarray,
                         g_log_derivative: np.ndarray) -> complex:
    """``(g, Π F1)_{L²(ρdρ)}`` after integrating the second derivatives by parts.

    ``F1 = −2γ_ρ (m/ρ) h1 ĵ + ξ × Mξ`` is the quadratic part of the map
    equation and ``Π`` takes tangent coordinates along ``h``.  The angular
    part uses ``R²ξ = (z2 h3 − γ h1, −z1, 0)``, which gives the
    ``−(m²/ρ²) h1 h3 g (γ² + i z2 z)`` term.
    """
    rho = grid.r_values
    h1, h3 = harmonic_components(m, rho)
    gamma = _gamma_values(z)
    z_r = d_dr(grid, z)
    gamma_r = -np.real(np.conj(z) * z_r) / (1.0 + gamma)
    g_r = g * g_log_derivative / rho
    z1, z2 = z.real, z.imag
    dens = (1j * g_r * (-gamma * z_r + z * gamma_r)
            + (m / rho) * h1 * g * (-2.0 * gamma_r - 1j * z2 * z_r.real + 1j * z1 * z_r.imag)
            + (m / rho) * h1 * g_r * (gamma**2 - 1j * z2 * z)
            - (m * m / rho**2) * h1 * h3 * g * (gamma**2 + 1j * z2 * z)
            + 1j * (m * m / rho**2) * (2.0 * h1**2 - 1.0) * g * gamma * z)
    return complex(np.sum(grid.quad_weights * dens))


def projected_f1_direct(grid: LogRadialGrid, z: np.ndarray, m: int) -> np.ndarray:
    """``Π F1`` built from the vector ``ξ`` and the map Laplacian ``M``, pointwise."""
    rho = grid.r_values
    h1, h3 = harmonic_components(m, rho)
    h, j, jh = frame_vectors(h1, h3)
    gamma = _gamma_values(z)
    xi = z.real[:, None] * j + z.imag[:, None] * jh + gamma[:, None] * h
    xi_y = d_dy(grid, xi)
    xi_yy = d_dy(grid, xi_y)
    r2xi = xi.copy()
    r2xi[:, :2] *= -1.0
    r2xi[:, 2] = 0.0
    m_xi = (xi_yy + m * m * r2xi) / rho[:, None] ** 2
    gamma_r = d_dr(grid, gamma)
    f1 = -2.0 * (gamma_r * (m / rho) * h1)[:, None] * j + np.cross(xi, m_xi)
    return tangent_coordinates(f1, h1, h3)


@dataclass(frozen=True)
class ModulationSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    g1: complex

    @property
    def solution(self) -> np.ndarray:
        return np.linalg.solve(self.matrix, self.rhs)


def modulation_system(z: ComplexRadialField, m: int, kind=None) -> ModulationSystem:
    """Real 2×2 system for ``(s²α̇, sṡ)`` from ``d/dt (g, z) = 0``.

    With ``a = s²α̇`` and ``b = sṡ`` the condition reads
    ``a[(g,(1+γ)h1) + i(g, h3 z)] + b[−im(g,(1+γ)h1) − (g, ρz_ρ)] = (g, ΠF1) − i(L0 g, L0 z)``.
    """
    kind = check_kind(kind, m)
    grid = z.grid
    rho = grid.r_values
    h1, h3 = harmonic_components(m, rho)
    zz = z.values
    gamma = _gamma_values(zz)
    g = orthogonality_weight(kind, m, rho)
    base = pairing(grid, g, (1.0 + gamma) * h1)
    c_a = base + 1j * pairing(grid, g, h3 * zz)
    c_b = -1j * m * base - pairing(grid, g, d_dy(grid, zz))
    g1 = projected_f1_pairing(grid, zz, m, g, _weight_log_derivative(kind, m, rho))
    l0z = d_dr(grid, zz) + (m / rho) * h3 * zz
    rhs = g1 - 1j * pairing(grid, l0_of_weight(kind, m, rho), l0z)
    mat = np.array([[c_a.real, c_b.real], [c_a.imag, c_b.imag]])
    return ModulationSystem(mat, np.array([rhs.real, rhs.imag]), g1)


def modulation_rhs(state: ModulationState, m: int, kind=None, cond_limit: float = 1e8
                   ) -> tuple[float, float]:
    """``(ṡ, α̇)`` implied by keeping the orthogonality condition in time."""
    system = modulation_system(state.z, m, kind)
    if np.linalg.cond(system.matrix) > cond_limit:
        raise OutOfRegimeError("modulation matrix is nearly singular; perturbation too large")
    a, b = system.solution
    return float(b / state.s), float(a / state.s**2)


def ode_bound_norms(z: ComplexRadialField) -> float:
    """``‖z/ρ²‖² + ‖z_ρ/ρ‖²`` in ``L²(ρdρ)``."""
    rho = z.grid.r_values
    zr = d_dr(z.grid, z.values)
    return float(integrate(z.grid, np.abs(z.values) ** 2 / rho**4 + np.abs(zr) ** 2 / rho**2))
