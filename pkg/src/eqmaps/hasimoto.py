"""Parallel frames along a map, the frame coordinates ``q`` and ``ν``, and the
reconstruction of the perturbation ``z`` from ``q``.

With a frame ``e`` transported by ``e_r = −(v_r·e) v`` the deviation field
``W = v_r − (m/r)(k̂ − v3 v)`` and the projected pole ``k̂ − v3 v`` are written
as ``q1 e + q2 v×e`` and ``ν1 e + ν2 v×e``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, OutOfRegimeError
from .grid_geometry import (ComplexRadialField, LogRadialGrid, SphereField, _write_csv,
                            cumulative_dy, d_dr, d_dy, harmonic_components, l2_norm, rotation,
                            x_norm)
from .modulation import (J_HAT, K_HAT, OrthogonalityKind, _gamma_values, assemble_values,
                         frame_vectors, gamma_from_z, project_orthogonal, tangent_coordinates)


@dataclass(frozen=True, eq=False)
class FrameField:
    grid: LogRadialGrid
    e_values: np.ndarray = field(repr=False)
    # v × e, kept so that coordinates need no second cross product
    je_values: np.ndarray = field(repr=False)

    def unit_defect(self) -> float:
        return float(np.max(np.abs(np.linalg.norm(self.e_values, axis=1) - 1.0)))

    def tangency_defect(self, v: SphereField) -> float:
        return float(np.max(np.abs(np.einsum("ij,ij->i", self.e_values, v.values))))

    def gauge_residual(self, v: SphereField) -> float:
        """Max over nodes of ``|e_r + (v_r·e) v|`` scaled by ``r`` (i.e. in ``y``)."""
        ey = d_dy(self.grid, self.e_values)
        vy = d_dy(self.grid, v.values)
        res = ey + np.einsum("ij,ij->i", vy, self.e_values)[:, None] * v.values
        return float(np.max(np.linalg.norm(res, axis=1)))


def _cross_matrices(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -w[..., 2], w[..., 1]
    out[..., 1, 0], out[..., 1, 2] = w[..., 2], -w[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -w[..., 1], w[..., 0]
    return out


def _midpoint_values(f: np.ndarray) -> np.ndarray:
    """Cubic interpolation of nodal samples to the cell midpoints (axis 0)."""
    mid = np.empty((f.shape[0] - 1,) + f.shape[1:])
    mid[1:-1] = (-f[:-3] + 9.0 * f[1:-2] + 9.0 * f[2:-1] - f[3:]) / 16.0
    mid[0] = (5.0 * f[0] + 15.0 * f[1] - 5.0 * f[2] + f[3]) / 16.0
    mid[-1] = (5.0 * f[-1] + 15.0 * f[-2] - 5.0 * f[-3] + f[-4]) / 16.0
    return mid


def _step_matrices(grid: LogRadialGrid, v: np.ndarray) -> np.ndarray:
    """Classical RK4 propagators of ``e_y = (v × v_y) × e`` over each cell."""
    omega = np.cross(v, d_dy(grid, v))
    a_node = _cross_matrices(omega)
    a_mid = _cross_matrices(_midpoint_values(omega))
    a0, a1 = a_node[:-1], a_node[1:]
    h = grid.dy
    eye = np.eye(3)
    k1 = a0
    k2 = a_mid @ (eye + 0.5 * h * k1)
    k3 = a_mid @ (eye + 0.5 * h * k2)
    k4 = a1 @ (eye + h * k3)
    return eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def frame_transport(v: SphereField, alpha: float = 0.0, phase: float = 0.0) -> FrameField:
    """Parallel frame with ``e(r_min)`` the projection of ``e^{αR} ĵ``, turned by ``phase``
    about ``v(r_min)``.
    """
    vals = v.values
    e = rotation(alpha) @ J_HAT
    e = e - np.dot(e, vals[0]) * vals[0]
    norm = np.linalg.norm(e)
    if norm < 1e-8:
        raise DomainError("initial frame vector is parallel to v(r_min)")
    e = e / norm
    e = math.cos(phase) * e + math.sin(phase) * np.cross(vals[0], e)
    steps = _step_matrices(v.grid, vals)
    out = np.empty_like(vals)
    out[0] = e
    for j in range(steps.shape[0]):
        e = steps[j] @ e
        w = vals[j + 1]
        e = e - (e @ w) * w
        e = e / math.sqrt(e @ e)
        out[j + 1] = e
    return FrameField(v.grid, out, np.cross(vals, out))


@dataclass(frozen=True, eq=False)
class HasimotoData:
    q: ComplexRadialField
    nu: ComplexRadialField
    v3: np.ndarray = field(repr=False)

    @property
    def grid(self) -> LogRadialGrid:
        return self.q.grid

    def to_csv(self, path) -> None:
        q, nu = self.q.values, self.nu.values
        _write_csv(path, self.grid, ("re_q", "im_q", "re_nu", "im_nu", "v3"),
                   (q.real, q.imag, nu.real, nu.imag, self.v3))

    def nu_residual(self, m: int) -> float:
        """Max of ``|ν_r + v3 (q + (m/r) ν)|`` weighted by ``r``."""
        r = self.grid.r_values
        res = d_dy(self.grid, self.nu.values) + self.v3 * (r * self.q.values + m * self.nu.values)
        return float(np.max(np.abs(res)))


def deviation_field(v: SphereField, m: int) -> np.ndarray:
    """``W = v_r − (m/r)(k̂ − v3 v)``."""
    r = v.grid.r_values[:, None]
    vals = v.values
    return d_dr(v.grid, vals) - (m / r) * (K_HAT - vals[:, 2:3] * vals)


def hasimoto_extract(v: SphereField, e: FrameField, m: int) -> HasimotoData:
    w = deviation_field(v, m)
    pole = K_HAT - v.values[:, 2:3] * v.values

    def coords(x):
        return (np.einsum("ij,ij->i", x, e.e_values)
                + 1j * np.einsum("ij,ij->i", x, e.je_values))

    return HasimotoData(ComplexRadialField(v.grid, coords(w)),
                        ComplexRadialField(v.grid, coords(pole)), v.values[:, 2].copy())


def frame_vector_field(data_q: np.ndarray, e: FrameField) -> np.ndarray:
    """The tangent vector ``q1 e + q2 v×e``."""
    return data_q.real[:, None] * e.e_values + data_q.imag[:, None] * e.je_values


# ---------------------------------------------------------------------------
# the linearized frame system around the profile

def propagator_p(rho, r, m: int):
    """``−∫_ρ^r (m/τ) h1(τ) dτ = −2(arctan r^m − arctan ρ^m)``."""
    rho, r = np.asarray(rho, dtype=float), np.asarray(r, dtype=float)
    if np.any(rho <= 0) or np.any(r <= 0):
        raise DomainError("propagator arguments must be positive")
    with np.errstate(over="ignore"):
        return -2.0 * (np.arctan(r**m) - np.arctan(rho**m))


def profile_rotation(r, m: int) -> np.ndarray:
    """``U(r) = [[h1, −h3], [h3, h1]]``."""
    h1, h3 = harmonic_components(m, np.asarray(r, dtype=float))
    return np.array([[h1, -h3], [h3, h1]])


def frame_system_matrix(r: float, m: int) -> np.ndarray:
    """``A(r) = −(h1, h3)ᵀ (h1_r, h3_r)``, the linear part for the (1, 3) frame components."""
    h1, h3 = harmonic_components(m, r)
    return (m / r) * h1 * np.array([[h1 * h3, -h1 * h1], [h3 * h3, -h1 * h3]])


def propagator_matrix(rho: float, r: float, m: int) -> np.ndarray:
    """``P(ρ, r) = U(r) [[1, 0], [p(ρ, r), 1]] U(ρ)^{-1}``."""
    lower = np.array([[1.0, 0.0], [float(propagator_p(rho, r, m)), 1.0]])
    u_inv = profile_rotation(rho, m).T
    return profile_rotation(r, m) @ lower @ u_inv


# ---------------------------------------------------------------------------
# reconstruction of z from q

def g0_term(z: ComplexRadialField, s: float, alpha: float, m: int) -> np.ndarray:
    """``γ_ρ h + (m/ρ)(γ k̂ + γ h3 h + ξ3 ξ)`` on the ``ρ`` grid, shape (n, 3).

    The remainder of the map's deviation field after its linear part ``L0 z``;
    it does not depend on ``s`` or ``α``, which only fix the frame of reference.
    """
    if not s > 0:
        raise DomainError("scale must be positive")
    zz = z.values
    if np.max(np.abs(zz), initial=0.0) > 0.5:
        raise OutOfRegimeError("|z| > 1/2: the quadratic remainder estimate does not apply")
    rho = z.grid.r_values
    h1, h3 = harmonic_components(m, rho)
    gam = gamma_from_z(z)
    h, j, jh = frame_vectors(h1, h3)
    xi = zz.real[:, None] * j + zz.imag[:, None] * jh + gam.gamma[:, None] * h
    xi3 = xi[:, 2]
    return (gam.gamma_rho[:, None] * h
            + (m / rho)[:, None] * (gam.gamma[:, None] * K_HAT + (gam.gamma * h3)[:, None] * h
                                    + xi3[:, None] * xi))


def _g0_tangent(zz: np.ndarray, rho: np.ndarray, m: int) -> np.ndarray:
    """Tangent coordinates of the quadratic remainder, which need no derivatives."""
    h1, h3 = harmonic_components(m, rho)
    gamma = _gamma_values(zz)
    return (m / rho) * (1j * gamma * h1 + (zz.imag * h1 + gamma * h3) * zz)


def l0_operator(grid: LogRadialGrid, z: np.ndarray, m: int) -> np.ndarray:
    """``L0 z = z_ρ + (m/ρ) h3 z`` with fourth-order differences."""
    _, h3 = harmonic_components(m, grid.r_values)
    return d_dr(grid, z) + (m / grid.r_values) * h3 * z


def l0_inverse(grid: LogRadialGrid, f: np.ndarray, m: int, kind=OrthogonalityKind.X) -> np.ndarray:
    """The solution of ``L0 z = f`` orthogonal to ``h1``.

    Since ``L0 = h1 ∂_ρ (·/h1)``, a particular solution is ``h1 ∫ f ρ/h1 dy``;
    the multiple of ``h1`` is then fixed by the orthogonality condition.
    """
    rho = grid.r_values
    h1, _ = harmonic_components(m, rho)
    pivot = int(np.argmin(np.abs(grid.y_values)))
    zp = h1 * cumulative_dy(grid, f * rho / h1, start=pivot)
    return project_orthogonal(ComplexRadialField(grid, zp), m, kind).values


@dataclass(frozen=True, eq=False)
class Reconstruction:
    z: ComplexRadialField
    iterations: int
    trace: list
    contraction: float


def _picard_map(grid: LogRadialGrid, q_hat: np.ndarray, zz: np.ndarray, m: int,
                kind) -> np.ndarray:
    rho = grid.r_values
    vals = assemble_values(zz, rho, 0.0, m)
    v = SphereField(grid, vals, m, unit_tol=1e-10)
    e = frame_transport(v, 0.0)
    h1, h3 = harmonic_components(m, rho)
    rhs = tangent_coordinates(frame_vector_field(q_hat, e), h1, h3) - _g0_tangent(zz, rho, m)
    return l0_inverse(grid, rhs, m, kind)


def reconstruct_z(q: ComplexRadialField, s: float, alpha: float, m: int, *,
                  kind=OrthogonalityKind.X, delta: float = 0.5, tol: float = 1e-10,
                  max_iter: int = 100, full: bool = False):
    """The perturbation ``z`` on the ``ρ = r/s`` grid whose map has frame coordinates ``q``.

    ``q`` is sampled on the physical grid.  The rotation ``α`` only turns the
    frame together with the map, so it does not enter; the scale enters
    through ``ρ ↦ s q(sρ)``.  Iterates ``z ↦ L0^{-1}[Π(q Ê(z)) − Π G0(z)]``
    with damping whenever the update grows.
    """
    if not s > 0:
        raise DomainError("scale must be positive")
    if int(m) != m or m < 1:
        raise ConfigurationError("m must be a positive integer")
    kind = OrthogonalityKind(kind)
    qn = float(l2_norm(q))
    if qn > delta:
        raise OutOfRegimeError(f"‖q‖ = {qn:.3e} exceeds the reconstruction threshold {delta:.3e}")
    grid = q.grid.scaled(s)
    q_hat = s * q.values
    if qn == 0.0:
        zero = ComplexRadialField(grid, np.zeros(grid.n_points, dtype=complex))
        return Reconstruction(zero, 0, [], 0.0) if full else zero
    z = l0_inverse(grid, q_hat, m, kind)
    trace = []
    rates = []
    damping = 1.0
    prev = math.inf
    for k in range(1, max_iter + 1):
        if np.max(np.abs(z)) > 0.5:
            raise OutOfRegimeError("reconstruction left the small-perturbation regime",)
        new = _picard_map(grid, q_hat, z, m, kind)
        step = float(x_norm(ComplexRadialField(grid, new - z)))
        trace.append(step)
        if step < tol:
            z = new
            break
        if step > prev:
            if damping < 0.25:
                raise OutOfRegimeError(
                    f"reconstruction is not contracting (trace {['%.2e' % t for t in trace]})")
            damping *= 0.5
        elif prev < math.inf:
            rates.append(step / prev)
        z = z + damping * (new - z)
        prev = step
    else:
        raise OutOfRegimeError(f"reconstruction did not converge in {max_iter} iterations "
                               f"(last update {trace[-1]:.3e})")
    result = ComplexRadialField(grid, z)
    if full:
        return Reconstruction(result, k, trace, max(rates) if rates else 0.0)
    return result


def contraction_rate(q: ComplexRadialField, m: int, za: ComplexRadialField,
                     zb: ComplexRadialField, kind=OrthogonalityKind.X) -> float:
    """``‖Φ(za) − Φ(zb)‖_X / ‖za − zb‖_X`` for the reconstruction map at ``s = 1``."""
    grid = za.grid
    fa = _picard_map(grid, q.values, za.values, m, kind)
    fb = _picard_map(grid, q.values, zb.values, m, kind)
    den = float(x_norm(ComplexRadialField(grid, za.values - zb.values)))
    return float(x_norm(ComplexRadialField(grid, fa - fb))) / den
