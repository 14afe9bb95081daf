import math

import numpy as np
import pytest
from scipy.integrate import quad

from eqmaps.errors import DomainError, OutOfRegimeError
from eqmaps.grid_geometry import (ComplexRadialField, energy_excess, harmonic_components,
                                  harmonic_map, l2_norm, make_grid, rotation, x_norm)
from eqmaps.hasimoto import (contraction_rate, deviation_field, frame_transport, g0_term,
                             hasimoto_extract, l0_operator, propagator_matrix, propagator_p,
                             reconstruct_z)
from eqmaps.modulation import (ModulationState, assemble_map, frame_vectors, project_orthogonal,
                               split)

GRID = make_grid(1e-4, 1e4, 2048)
M = 4


def bump(grid, size, m=M, kind="X"):
    rho = grid.r_values
    z = rho**m * np.exp(-rho) * (1 + 1j) / math.sqrt(2) + 0.3j * rho ** (m + 1) * np.exp(-rho / 2) / 50
    z = project_orthogonal(ComplexRadialField(grid, z), m, kind)
    return ComplexRadialField(grid, z.values * size / float(x_norm(z)))


def perturbed(size, s=1.7, alpha=0.4):
    z = bump(GRID.scaled(s), size)
    return z, assemble_map(ModulationState(s, alpha, z), M)


def test_frame_on_harmonic_map_is_constant():
    e = frame_transport(harmonic_map(M, GRID))
    assert np.max(np.abs(e.e_values - [0.0, 1.0, 0.0])) < 1e-12
    turned = frame_transport(harmonic_map(M, GRID, 1.0, math.pi / 2), math.pi / 2)
    assert np.max(np.abs(turned.e_values - [-1.0, 0.0, 0.0])) < 1e-12


def test_harmonic_map_coordinates():
    v = harmonic_map(M, GRID, 2.0, math.pi / 2)
    data = hasimoto_extract(v, frame_transport(v, math.pi / 2), M)
    h1, _ = harmonic_components(M, GRID.r_values / 2.0)
    assert np.max(np.abs(data.q.values)) < 1e-9
    assert np.max(np.abs(data.nu.values - 1j * h1)) < 1e-12


@pytest.mark.parametrize("size", [1e-3, 1e-2, 5e-2])
def test_frame_properties_on_perturbed_map(size):
    _, v = perturbed(size)
    e = frame_transport(v, 0.4)
    assert e.unit_defect() < 1e-10
    assert e.tangency_defect(v) < 1e-10
    assert e.gauge_residual(v) < 1e-8
    assert hasimoto_extract(v, e, M).nu_residual(M) < 1e-8


@pytest.mark.parametrize("size", [1e-2, 5e-2])
def test_q_norm_equals_energy_excess(size):
    _, v = perturbed(size)
    q = hasimoto_extract(v, frame_transport(v, 0.4), M).q
    assert math.pi * float(l2_norm(q)) ** 2 == pytest.approx(float(energy_excess(v, M)), rel=1e-6)


def test_propagator_closed_form():
    assert float(propagator_p(1.3, 1.3, 2)) == 0.0
    assert float(propagator_p(1.0, 1e300, 3)) == pytest.approx(-math.pi / 2, abs=1e-15)
    oracle = -quad(lambda t: (1 / t) * 2 * t / (1 + t * t), 0.5, 2.0, epsabs=0, epsrel=1e-13)[0]
    assert float(propagator_p(0.5, 2.0, 1)) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(DomainError):
        propagator_p(0.0, 1.0, 1)


def test_propagator_matrix_composes():
    a, b, c = 0.4, 1.1, 3.0
    lhs = propagator_matrix(b, c, 2) @ propagator_matrix(a, b, 2)
    assert np.max(np.abs(lhs - propagator_matrix(a, c, 2))) < 1e-14
    assert np.max(np.abs(propagator_matrix(a, a, 2) - np.eye(2))) < 1e-15


def test_g0_vanishes_at_zero():
    z = ComplexRadialField(GRID, np.zeros(GRID.n_points))
    assert np.max(np.abs(g0_term(z, 1.0, 0.0, M))) == 0.0


@pytest.mark.parametrize("size", [1e-3, 1e-2, 5e-2])
def test_g0_two_routes(size):
    s, alpha = 1.7, 0.4
    z, v = perturbed(size, s, alpha)
    g0 = g0_term(z, s, alpha, M)
    # deviation field of the assembled map, pulled back to the ρ frame, minus its linear part
    w = deviation_field(v, M) * s @ rotation(alpha)
    h1, h3 = harmonic_components(M, z.grid.r_values)
    _, j, jh = frame_vectors(h1, h3)
    lin = l0_operator(z.grid, z.values, M)
    other = w - (lin.real[:, None] * j + lin.imag[:, None] * jh)
    assert np.max(np.abs(other - g0)) < 1e-8
    # quadratic in z: sup|G0| / ‖z‖_X² stays near a constant
    assert 0.2 < np.max(np.abs(g0)) / size**2 < 0.5


def test_g0_rejects_large_z():
    z = ComplexRadialField(GRID, np.full(GRID.n_points, 0.6))
    with pytest.raises(OutOfRegimeError):
        g0_term(z, 1.0, 0.0, M)


def test_reconstruction_of_zero():
    q = ComplexRadialField(GRID, np.zeros(GRID.n_points))
    assert np.max(np.abs(reconstruct_z(q, 1.0, 0.0, M).values)) == 0.0


@pytest.mark.parametrize("size", [1e-3, 1e-2])
def test_reconstruction_round_trip(size):
    s, alpha = 1.7, 0.4
    z, v = perturbed(size, s, alpha)
    q = hasimoto_extract(v, frame_transport(v, alpha), M).q
    rec = reconstruct_z(q, s, alpha, M, full=True)
    err = float(x_norm(ComplexRadialField(z.grid, rec.z.values - z.values)))
    assert err < 1e-7 * size
    assert rec.contraction < 1.0


def test_reconstruction_scaling():
    z, v = perturbed(1e-2, 1.0, 0.0)
    q = hasimoto_extract(v, frame_transport(v), M).q
    lam = 2.5
    # the same data read on a grid stretched by λ
    stretched = make_grid(GRID.r_min * lam, GRID.r_max * lam, GRID.n_points)
    q_scaled = ComplexRadialField(stretched, q.values / lam)
    a = reconstruct_z(q, 1.0, 0.0, M)
    b = reconstruct_z(q_scaled, lam, 0.0, M)
    assert np.max(np.abs(a.values - b.values)) < 1e-12


def test_reconstruction_rejects_large_q():
    q = ComplexRadialField(GRID, np.exp(-GRID.r_values))
    with pytest.raises(OutOfRegimeError):
        reconstruct_z(q, 1.0, 0.0, M, delta=0.1)


def test_reconstruction_map_contracts():
    z, v = perturbed(1e-2, 1.0, 0.0)
    q = hasimoto_extract(v, frame_transport(v), M).q
    za = bump(GRID, 1e-2)
    zb = ComplexRadialField(GRID, za.values * 0.9)
    assert contraction_rate(q, M, za, zb) < 1.0


def test_split_recovers_assembled_parameters():
    _, v = perturbed(1e-2, 1.7, 0.4)
    mod = split(v, M, "X")
    assert mod.s == pytest.approx(1.7, abs=1e-10)
    assert mod.alpha == pytest.approx(0.4, abs=1e-10)
