import math

import numpy as np
import pytest
from scipy.integrate import quad

from eqmaps.errors import ConfigurationError, OutOfRegimeError
from eqmaps.grid_geometry import (ComplexRadialField, dirichlet_distance, energy, energy_excess,
                                  harmonic_components, harmonic_map, l2_norm, make_grid)
from eqmaps.evolution import (CSV_COLUMNS, ExperimentSettings, FlowState, QSAState,
                              assemble_potentials, auto_dt, flow_energy, make_perturbation,
                              qsa_rates, qsa_state_from_map, run_stability_experiment,
                              step_full_flow, step_qsa)
from eqmaps.linops import evolution_norm
from eqmaps.modulation import ModulationState, assemble_map, project_orthogonal

M = 4
SMALL = make_grid(1e-3, 1e3, 1024)


@pytest.fixture(scope="module")
def perturbed_map():
    mod = make_perturbation(M, SMALL, 0.05)
    return assemble_map(mod, M, grid=SMALL)


def test_harmonic_map_is_stationary():
    h = harmonic_map(M, SMALL)
    state = FlowState(0.0, h)
    for _ in range(100):
        state = step_full_flow(state, 0.01, M)
    assert state.t == pytest.approx(1.0)
    assert dirichlet_distance(state.v, h.values, M) < 1e-8


def test_full_flow_conserves_energy_and_reverses(perturbed_map):
    v = perturbed_map
    state = FlowState(0.0, v)
    for _ in range(50):
        state = step_full_flow(state, 0.01, M)
    assert flow_energy(state.v, M) == pytest.approx(flow_energy(v, M), rel=1e-12)
    assert float(energy(state.v, M)) == pytest.approx(float(energy(v, M)), rel=1e-6)
    assert np.max(np.abs(np.linalg.norm(state.v.values, axis=1) - 1)) < 1e-12
    for _ in range(50):
        state = step_full_flow(state, -0.01, M)
    assert np.max(np.abs(state.v.values - v.values)) < 1e-10


def test_full_flow_rejects_bad_step():
    with pytest.raises(ConfigurationError):
        step_full_flow(FlowState(0.0, harmonic_map(M, SMALL)), 0.0, M)


def test_flow_state_diagnostics(perturbed_map):
    state = FlowState(0.0, perturbed_map).with_diagnostics(M)
    assert state.modulation.s == pytest.approx(1.0, abs=1e-10)
    assert math.pi * float(l2_norm(state.hasimoto.q)) ** 2 == pytest.approx(0.05**2, rel=1e-5)


def _windowed_orders():
    grid = make_grid(1e-2, 1e3, 512)
    rho = grid.r_values
    shape = rho**M * np.exp(-((rho / 4) ** 2)) * (1 + 1j) / math.sqrt(2)
    z = project_orthogonal(ComplexRadialField(grid, shape), M, "L2")
    z = ComplexRadialField(grid, z.values * 1.5e-4 / np.max(np.abs(z.values)))
    v0 = assemble_map(ModulationState(1.0, 0.0, z), M)
    finals = []
    for dt in (0.01, 0.005, 0.0025, 0.00125):
        state = FlowState(0.0, v0)
        for _ in range(int(round(0.2 / dt))):
            state = step_full_flow(state, dt, M)
        finals.append(state.v.values)
    window = rho[:-1] >= 1.0

    def seminorm(x):
        return math.sqrt(np.sum(np.diff(x, axis=0)[window] ** 2) / grid.dy)

    diffs = [seminorm(a - b) for a, b in zip(finals, finals[1:])]
    return [math.log2(a / b) for a, b in zip(diffs, diffs[1:])]


def test_time_order_rises_towards_two_away_from_the_origin():
    # pre-asymptotic approach to second order in the window r >= 1
    orders = _windowed_orders()
    assert orders[1] > orders[0]
    assert orders[-1] > 1.4


def test_potentials_on_the_harmonic_map():
    grid = make_grid(1e-3, 1e3, 2048)
    r = grid.r_values
    h1, h3 = harmonic_components(M, r)
    zero = ComplexRadialField(grid, np.zeros(grid.n_points))
    nu = ComplexRadialField(grid, 1j * h1)
    v1, v2, s_field = assemble_potentials(h3, zero, nu, M)
    inside = (r > 1e-2) & (r < 1e2)
    assert np.max(np.abs(((M + 1) ** 2 + r**2 * v1 - (1 + M * M - 2 * M * h3))[inside])) < 1e-9
    assert np.max(np.abs(v2)) == 0.0 and np.max(np.abs(s_field)) == 0.0


def test_potentials_closed_form():
    grid = make_grid(1e-3, 1e3, 2048)
    r = grid.r_values
    q = ComplexRadialField(grid, r * np.exp(-r) * (1 + 0.5j))
    nu = ComplexRadialField(grid, np.exp(-r) * 1j)
    v3 = np.tanh(r)
    v1, v2, s_field = assemble_potentials(v3, q, nu, M)
    cross = (M / r) * np.real(np.conj(nu.values) * q.values)
    assert np.allclose(v2, 0.5 * np.abs(q.values) ** 2 + cross, rtol=1e-15, atol=0)
    exact_v1 = M * (1 + v3) * (M * v3 - M - 2) / r**2 + M * (1 - v3**2) / r
    inside = (r > 1e-2) & (r < 10)
    assert np.max(np.abs(v1 - exact_v1)[inside]) < 1e-7
    # |q|² plus twice the cross term (m/r) Re(ν̄ q) = 2 e^{-2r}
    big_q = lambda t: 1.25 * t * t * math.exp(-2 * t) + 4.0 * math.exp(-2 * t)
    for j in (500, 1024, 1400):
        tail = quad(lambda t: big_q(t) / t, r[j], r[-1], epsabs=0, epsrel=1e-12)[0]
        assert s_field[j] == pytest.approx(-0.5 * big_q(r[j]) + tail, abs=1e-9)
    # ‖S‖ is controlled by ‖q‖ and the cross term
    assert float(l2_norm(ComplexRadialField(grid, s_field.astype(complex)))) < 10 * float(l2_norm(q))


def test_potentials_reject_mismatched_grids():
    a = ComplexRadialField(make_grid(1e-2, 1e2, 64), np.zeros(64))
    b = ComplexRadialField(make_grid(1e-2, 1e2, 65), np.zeros(65))
    with pytest.raises(ConfigurationError):
        assemble_potentials(np.zeros(64), a, b, M)


def test_perturbation_has_requested_excess():
    for d1 in (0.01, 0.05):
        mod = make_perturbation(M, SMALL, d1)
        assert float(energy_excess(assemble_map(mod, M, grid=SMALL), M)) == pytest.approx(d1**2, rel=1e-10)
    zero = make_perturbation(M, SMALL, 0.0)
    assert not np.any(zero.z.values)
    with pytest.raises(ConfigurationError):
        make_perturbation(M, SMALL, -0.1)


def test_qsa_keeps_zero_data_fixed():
    state = QSAState(0.0, ComplexRadialField(SMALL, np.zeros(SMALL.n_points)), 1.3, 0.2)
    out = step_qsa(state, 0.05, M)
    assert out.s == 1.3 and out.alpha == 0.2 and not np.any(out.q_tilde.values)
    rates = qsa_rates(state.q_tilde, 1.3, 0.2, M)
    assert rates.s_dot == 0.0 and rates.alpha_dot == 0.0


def test_qsa_state_rejects_nonpositive_scale():
    with pytest.raises(OutOfRegimeError):
        QSAState(0.0, ComplexRadialField(SMALL, np.zeros(SMALL.n_points)), 0.0, 0.0)


def test_qsa_steps_are_unitary(perturbed_map):
    state = qsa_state_from_map(perturbed_map, M, seed=(1.0, 0.0))
    n0 = evolution_norm(SMALL, state.q_tilde.values)
    linear = state
    for _ in range(5):
        linear = step_qsa(linear, 0.02, M, nonlinear=False)
    assert evolution_norm(SMALL, linear.q_tilde.values) == pytest.approx(n0, rel=1e-10)
    assert (linear.s, linear.alpha) == (state.s, state.alpha)
    full = step_qsa(step_qsa(state, 0.02, M), 0.02, M)
    assert evolution_norm(SMALL, full.q_tilde.values) == pytest.approx(n0, rel=1e-10)


def _gauge_gap(dt):
    grid = make_grid(1e-4, 1e4, 2048)
    v0 = assemble_map(make_perturbation(M, grid, 0.05, kind="X"), M, grid=grid)
    qs = qsa_state_from_map(v0, M, seed=(1.0, 0.0))
    flow = FlowState(0.0, v0)
    for _ in range(int(round(0.2 / dt))):
        flow = step_full_flow(flow, dt, M)
        qs = step_qsa(qs, dt, M)
    ref = qsa_state_from_map(flow.v, M, seed=(qs.s, qs.alpha))
    gap = ComplexRadialField(grid, ref.q_tilde.values - qs.q_tilde.values)
    return float(l2_norm(gap)) / float(l2_norm(ref.q_tilde))


@pytest.mark.slow
def test_qsa_matches_full_flow_including_phase():
    coarse, fine = _gauge_gap(0.02), _gauge_gap(0.01)
    assert fine < 0.01
    assert fine < 0.6 * coarse


def _small_settings(**kw):
    base = dict(grid=make_grid(1e-3, 1e3, 512), dt=0.02, sample_every=5)
    base.update(kw)
    return ExperimentSettings(**base)


def test_unperturbed_experiment_stays_put():
    diag = run_stability_experiment(M, 0.0, 0.4, _small_settings())
    summary = diag.summary()
    assert summary["max_s_drift"] < 1e-10
    assert summary["max_alpha_drift"] < 1e-10
    assert not summary["blowup"]
    # q of the exact profile sits at the discretization floor and stays there
    q = diag.array("q_l2")
    assert np.max(q) < 1.5 * q[0] + 1e-12


def test_experiment_records_expected_columns(tmp_path):
    diag = run_stability_experiment(M, 0.05, 0.2, _small_settings())
    assert diag.series["t"][0] == 0.0 and diag.series["t"][-1] == pytest.approx(0.2)
    assert diag.summary()["energy_drift"] < 1e-8
    diag.write(tmp_path, "run")
    lines = (tmp_path / "run.csv").read_text().splitlines()
    assert lines[0].startswith("# config: ")
    assert lines[1] == ",".join(CSV_COLUMNS)
    assert (tmp_path / "run.json").exists()


def test_experiment_csv_is_deterministic(tmp_path):
    for name in ("a", "b"):
        run_stability_experiment(M, 0.03, 0.1, _small_settings()).to_csv(tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_qsa_experiment_conserves_q_norm():
    diag = run_stability_experiment(M, 0.05, 0.1, _small_settings(integrator="qsa", sample_every=1))
    q = diag.array("q_l2")
    assert np.max(np.abs(q / q[0] - 1)) < 1e-10


def test_experiment_argument_checks():
    with pytest.raises(OutOfRegimeError):
        run_stability_experiment(M, 0.9, 0.1, _small_settings())
    with pytest.raises(ConfigurationError):
        run_stability_experiment(M, 0.05, 0.1, _small_settings(integrator="euler"))
    with pytest.raises(ConfigurationError):
        run_stability_experiment(M, 0.05, -1.0, _small_settings())


def test_auto_dt_formula():
    assert auto_dt(SMALL, 2.0) == pytest.approx(SMALL.dy**2)
