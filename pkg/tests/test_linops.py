import math

import numpy as np
import pytest

from eqmaps.errors import ConfigurationError
from eqmaps.grid_geometry import harmonic_components, make_grid
from eqmaps.linops import (OperatorKind, build_operator, coercivity_spectrum, evolution_norm,
                           cayley_propagator, h_potential, kato_smoothing_probe, midpoints,
                           potential_asymptotics, repulsivity_check, repulsivity_profile,
                           resolvent_probe, spectrum, unweighted_resolvent_norm,
                           weighted_resolvent_norm)

WIDE = make_grid(1e-4, 1e4, 2048)


@pytest.mark.parametrize("m", [1, 2, 4])
def test_h1_spans_the_kernels(m):
    h1, _ = harmonic_components(m, WIDE.r_values)
    l0 = build_operator(OperatorKind.L0, m, WIDE)
    n_op = build_operator(OperatorKind.N, m, WIDE)
    assert np.max(np.abs(l0.matrix @ h1)) < 1e-10
    assert np.max(np.abs(n_op.matrix @ h1)) < 1e-10


def test_n_factors_through_l0(rng):
    m = 3
    l0 = build_operator(OperatorKind.L0, m, WIDE)
    adj = build_operator(OperatorKind.L0_ADJOINT, m, WIDE)
    n_op = build_operator(OperatorKind.N, m, WIDE)
    fields = rng.standard_normal((WIDE.n_points, 50))
    assert np.max(np.abs(n_op.matrix @ fields - adj.compose(l0).matrix @ fields)) < 1e-9


def test_l0_adjoint_is_discrete_adjoint(rng):
    m = 2
    l0 = build_operator(OperatorKind.L0, m, WIDE)
    adj = build_operator(OperatorKind.L0_ADJOINT, m, WIDE)
    f = rng.standard_normal(WIDE.n_points)
    g = rng.standard_normal(WIDE.n_points - 1)
    # (L0 f, g) with midpoint weights r² dy against (f, L0* g) with nodal weights r² dy
    lhs = np.sum(l0.apply(f) * g * midpoints(WIDE) ** 2)
    rhs = np.sum(f * adj.apply(g) * WIDE.r_values**2)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def _conjugate_error(n):
    m = 3
    g = make_grid(1e-3, 1e3, n)
    rm = midpoints(g)
    f = rm**2 * np.exp(-rm**2)
    fp = (2 * rm - 2 * rm**3) * np.exp(-rm**2)
    fpp = (2 - 6 * rm**2 - 2 * rm * (2 * rm - 2 * rm**3)) * np.exp(-rm**2)
    exact = -fpp - fp / rm + h_potential(m, rm) / rm**2 * f
    out = build_operator(OperatorKind.L0, m, g).apply(build_operator(OperatorKind.L0_ADJOINT, m, g).apply(f))
    inside = (rm > 1e-2) & (rm < 5)
    return float(np.max(np.abs(out - exact)[inside]))


def test_conjugate_product_is_h_to_second_order():
    coarse, fine = _conjugate_error(1024), _conjugate_error(2048)
    assert fine < 1e-3 * 12.0
    assert math.log2(coarse / fine) > 1.9


@pytest.mark.parametrize("kind", ["H", "N0", "N"])
def test_symmetric_operators(kind):
    op = build_operator(kind, 4, WIDE)
    assert abs(op.matrix - op.matrix.T).max() < 1e-10 * abs(op.matrix).max()


def test_operator_argument_checks():
    with pytest.raises(ConfigurationError):
        build_operator("nope", 2, WIDE)
    with pytest.raises(ConfigurationError):
        build_operator("free", 2, WIDE)
    with pytest.raises(ConfigurationError):
        build_operator("H", 0, WIDE)


def test_repulsivity_profile_against_finite_difference():
    m = 3
    r = np.exp(np.linspace(-3, 3, 41))
    eps = 1e-6

    def rv(x):
        _, h3 = harmonic_components(m, x)
        return (m / x) * (m - 2 * h3)

    deriv = (rv(r * (1 + eps)) - rv(r * (1 - eps))) / (2 * eps * r)
    _, rep = repulsivity_profile(m, r)
    assert np.max(np.abs(rep - (1 - r**2 * deriv))) < 1e-6


@pytest.mark.parametrize("m,low,high", [(2, 1.0, 9.0), (3, 4.0, 16.0), (4, 9.0, 25.0)])
def test_repulsivity_bounds(m, low, high):
    rep = repulsivity_check(m, WIDE)
    assert rep.min_one_plus_r2V == pytest.approx(low, abs=1e-9)
    assert rep.max_one_plus_r2V == pytest.approx(high, abs=1e-9)
    assert rep.min_repulsivity >= rep.lower_bound - 1e-9
    assert rep.min_repulsivity == pytest.approx(low, abs=1e-9)


def test_repulsivity_degenerates_for_m_one():
    rep = repulsivity_check(1, WIDE)
    assert rep.lower_bound == 0.0
    assert rep.min_one_plus_r2V < 1e-6


@pytest.mark.parametrize("m", [2, 4])
def test_potential_asymptotics(m):
    inner, outer = potential_asymptotics(m, WIDE)
    assert inner == pytest.approx((m + 1) ** 2, abs=1e-9)
    assert outer == pytest.approx((m - 1) ** 2, abs=1e-9)


@pytest.mark.parametrize("b,kind,expected", [(0.0, "L2", 0.8677), (0.0, "X", 0.9123),
                                             (1.0, "L2", 0.6769), (1.0, "X", 0.8818)])
def test_coercivity_constants(b, kind, expected):
    grid = make_grid(1e-4, 1e4, 512)
    assert coercivity_spectrum(4, b, kind, grid) == pytest.approx(expected, abs=1e-3)


def test_coercivity_fails_without_orthogonality():
    grid = make_grid(1e-4, 1e4, 256)
    assert abs(coercivity_spectrum(4, 0.0, None, grid)) < 1e-12


def test_coercivity_argument_checks():
    grid = make_grid(1e-2, 1e2, 64)
    with pytest.raises(ConfigurationError):
        coercivity_spectrum(4, 2.0, "L2", grid)
    with pytest.raises(ConfigurationError):
        coercivity_spectrum(2, 0.0, "L2", grid)
    with pytest.raises(ConfigurationError):
        coercivity_spectrum(3, 1.0, "X", grid)


def test_resolvent_bounds():
    grid = make_grid(1e-3, 1e3, 512)
    op = build_operator(OperatorKind.H, 4, grid)
    # weighted: Hardy-type bound, unweighted: distance to the real spectrum
    assert weighted_resolvent_norm(op, 1000j) <= 1.0 / 9.0
    assert unweighted_resolvent_norm(op, 1j) <= 1.0 + 1e-8
    assert np.all(spectrum(op) > 0)


def test_resolvent_sweep_on_default_grid():
    assert resolvent_probe(4, WIDE, [1 + 1j, 10 + 0.1j, -1 + 1j, 0.5 + 0.01j]) < 0.35


def test_resolvent_rejects_real_samples():
    with pytest.raises(ConfigurationError):
        resolvent_probe(4, make_grid(1e-2, 1e2, 64), [2.0])


@pytest.mark.parametrize("nu", [3, 5])
def test_free_operator_resolvent_on_imaginary_axis(nu):
    # for imaginary μ the real part of the form is at least ν² ‖f‖²
    grid = make_grid(1e-3, 1e3, 512)
    op = build_operator(OperatorKind.FREE, 4, grid, angular_index=nu, order=4)
    for mu in (1000j, 1j, 1e-3j):
        assert weighted_resolvent_norm(op, mu) <= 1.0 / nu**2


def test_cayley_step_is_unitary(rng):
    grid = make_grid(1e-3, 1e3, 512)
    step = cayley_propagator(build_operator(OperatorKind.H, 3, grid), 0.1)
    phi = rng.standard_normal(grid.n_points) + 1j * rng.standard_normal(grid.n_points)
    n0 = evolution_norm(grid, phi)
    for _ in range(20):
        phi = step(phi)
    assert evolution_norm(grid, phi) == pytest.approx(n0, rel=1e-10)


def test_kato_probe_trivial_and_bounded():
    grid = make_grid(1e-3, 1e3, 512)
    zero = kato_smoothing_probe(3, grid, np.zeros(grid.n_points), 1.0, 0.1)
    assert zero.ratio == 0.0
    r = grid.r_values
    rep = kato_smoothing_probe(3, grid, r**3 * np.exp(-r**2), 5.0, 0.05)
    assert rep.max_norm_drift < 1e-12
    assert 0.0 < rep.ratio < 1.0
