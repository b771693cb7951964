"""Library indexing, masked model assembly, and threshold regression."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from bilevelfit.discovery import (
    DiscoveryState,
    LibrarySpec,
    build_discovery_problem,
    stlsq_discover,
    term_index,
    term_label,
)
from bilevelfit.problem import Trajectory, ValidationError


def test_linear_terms_index_identically():
    for i in range(11):
        assert term_index(i) == i


def test_quadratic_index_is_a_bijection():
    indices = [term_index(i, j) for i in range(11) for j in range(i, 11)]
    assert sorted(indices) == list(range(11, 77))


def test_pinned_term_positions():
    assert term_index(3, 5) == 43
    assert term_index(1, 4) == 25
    assert term_index(4, 10) == 55
    assert term_index(8, 10) == 73
    assert term_index(0, 0) == 11
    assert term_index(10, 10) == 76


def test_term_index_validation():
    with pytest.raises(ValueError, match="out of range"):
        term_index(11)
    with pytest.raises(ValueError, match="requires"):
        term_index(5, 3)
    with pytest.raises(ValueError, match="requires"):
        term_index(0, 11)


def test_term_label():
    assert term_label(2, 17) == "3_17"
    assert term_label(0, 0) == "1_0"


def test_default_library_shape():
    lib = LibrarySpec()
    assert lib.n_states == 11
    assert lib.n_rates == 6
    assert lib.n_terms == 77


def test_library_rejects_other_degrees():
    with pytest.raises(ValueError, match="degree-2"):
        LibrarySpec(degree=3)


def _oscillator_library():
    return LibrarySpec(stoich=np.eye(2), arrhenius=False)


def _oscillator_rhs(t, x):
    return [1.1 * x[0] - 0.4 * x[0] * x[1], -0.4 * x[1] + 0.1 * x[0] * x[1]]


def _oscillator_data():
    times = np.linspace(0.0, 10.0, 201)
    trajectories = []
    for ics in ([6.0, 2.0], [3.0, 4.0]):
        sol = solve_ivp(
            _oscillator_rhs, (times[0], times[-1]), ics,
            t_eval=times, method="LSODA", rtol=1e-11, atol=1e-12,
        )
        trajectories.append(Trajectory(times=times, states=sol.y))
    return trajectories


def _decay_library():
    return LibrarySpec(stoich=np.array([[-1.0], [1.0]]), arrhenius=True)


def _decay_data(temps, e_true=5.2e4, k_true=0.8):
    """Analytic x0 decay and x1 growth at several temperatures."""
    times = np.linspace(0.0, 4.0, 81)
    trajectories = []
    for temp, (a0, b0) in zip(temps, ([5.0, 1.0], [4.0, 3.0], [6.0, 2.0])):
        c = -(1.0 / temp - 1.0 / 373.0) / 8.314
        k_eff = k_true * np.exp(c * e_true)
        x0 = a0 * np.exp(-k_eff * times)
        states = np.vstack([x0, b0 + a0 - x0])
        trajectories.append(Trajectory(times=times, states=states, exogenous={"T": temp}))
    return trajectories


def test_full_library_column_count():
    dprob = build_discovery_problem(_oscillator_data(), _oscillator_library())
    assert dprob.problem.n_linear == 10
    assert dprob.problem.n_nonlinear == 0
    assert dprob.pairs == tuple((r, t) for r in range(2) for t in range(5))
    assert dprob.mask.all()


def test_masked_model_keeps_named_columns():
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, 0] = mask[1, 3] = True
    dprob = build_discovery_problem(_oscillator_data(), _oscillator_library(), mask)
    assert dprob.problem.n_linear == 2
    assert dprob.problem.model.p_names == ("k1_0", "k2_3")


def test_arrhenius_columns_pair_energies_with_rates():
    data = _decay_data((366.0, 373.0, 381.0))
    dprob = build_discovery_problem(data, _decay_library())
    assert dprob.problem.n_linear == 5
    assert dprob.problem.n_nonlinear == 5
    assert dprob.problem.model.p_names[0] == "k1_0"
    assert dprob.problem.model.phi_names[0] == "E1_0"


def test_mask_shape_validation():
    with pytest.raises(ValidationError, match="shape"):
        build_discovery_problem(
            _oscillator_data(), _oscillator_library(), np.ones((3, 5), dtype=bool)
        )


def test_empty_mask_rejected():
    with pytest.raises(ValidationError, match="empty model"):
        build_discovery_problem(
            _oscillator_data(), _oscillator_library(), np.zeros((2, 5), dtype=bool)
        )


def test_missing_temperature_rejected():
    data = _decay_data((366.0, 373.0, 381.0))
    stripped = [Trajectory(times=tr.times, states=tr.states) for tr in data]
    with pytest.raises(ValidationError, match="missing temperature on trajectory 0"):
        build_discovery_problem(stripped, _decay_library())


def test_uniform_reference_temperature_warns():
    data = _decay_data((373.0, 373.0, 373.0))
    with pytest.warns(RuntimeWarning, match="reference temperature"):
        build_discovery_problem(data, _decay_library())


def test_restrict_rebuilds_subproblem():
    dprob = build_discovery_problem(_oscillator_data(), _oscillator_library())
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[1, 3] = True
    sub = dprob.restrict(mask)
    assert sub.problem.n_linear == 3
    assert sub.pairs == ((0, 0), (1, 1), (1, 3))
    np.testing.assert_array_equal(sub.mask, mask)


def test_round_schedules():
    state = DiscoveryState(schedule=(1e-2, 1e-4), criterion="tolerance_schedule")
    state.round = 1
    opts = state.round_options()
    assert opts.gradient_tolerance == 1e-2
    assert opts.max_iterations >= 200
    assert opts.hessian_mode == "reduced_gn"
    state.round = 5
    assert state.round_options().gradient_tolerance == 1e-4

    capped = DiscoveryState(schedule=(30, 0), criterion="iteration_schedule")
    capped.round = 1
    opts = capped.round_options()
    assert opts.max_iterations == 30
    assert opts.gradient_tolerance <= 1e-7
    capped.round = 2
    assert capped.round_options().max_iterations == 500


def test_state_validation():
    with pytest.raises(ValueError, match="criterion"):
        DiscoveryState(criterion="bogus")
    with pytest.raises(ValueError, match="non-empty"):
        DiscoveryState(schedule=())
    with pytest.raises(ValueError, match="nonnegative"):
        DiscoveryState(epsilon=-0.1)
    with pytest.raises(ValueError, match="hessian_mode"):
        DiscoveryState(hessian_mode="newton")


def test_threshold_regression_recovers_oscillator():
    dprob = build_discovery_problem(_oscillator_data(), _oscillator_library())
    est, state = stlsq_discover(dprob, DiscoveryState(epsilon=0.05, ridge=0.0, seed=3))
    assert state.status == "converged"
    kept = [pair for pair in dprob.pairs if state.active_mask[pair]]
    assert kept == [(0, 0), (0, 3), (1, 1), (1, 3)]
    expected = {(0, 0): 1.1, (0, 3): -0.4, (1, 1): -0.4, (1, 3): 0.1}
    for idx, pair in enumerate(kept):
        np.testing.assert_allclose(est.p[idx], expected[pair], rtol=2e-2)


def test_threshold_regression_recovers_activation_energy():
    data = _decay_data((366.0, 373.0, 381.0))
    dprob = build_discovery_problem(data, _decay_library())
    est, state = stlsq_discover(dprob, DiscoveryState(epsilon=0.05, ridge=1e-9, seed=1))
    assert state.status == "converged"
    kept = [pair for pair in dprob.pairs if state.active_mask[pair]]
    assert kept == [(0, 0)]
    np.testing.assert_allclose(est.p[0], 0.8, rtol=2e-2)
    np.testing.assert_allclose(est.phi[0], 5.2e4, rtol=1e-2)


def test_huge_threshold_eliminates_everything():
    dprob = build_discovery_problem(_oscillator_data(), _oscillator_library())
    est, state = stlsq_discover(dprob, DiscoveryState(epsilon=10.0, ridge=0.0))
    assert est is None
    assert state.status == "all_eliminated"
    assert not state.active_mask.any()
    assert state.rounds_log[-1]["n_kept"] == 0


def test_zero_threshold_keeps_full_library():
    dprob = build_discovery_problem(_oscillator_data(), _oscillator_library())
    est, state = stlsq_discover(dprob, DiscoveryState(epsilon=0.0, ridge=0.0))
    assert state.status == "converged"
    assert state.round == 1
    assert state.active_mask.all()
    assert est.p.size == 10


def test_rounds_log_tracks_shrinkage():
    dprob = build_discovery_problem(_oscillator_data(), _oscillator_library())
    _, state = stlsq_discover(dprob, DiscoveryState(epsilon=0.05, ridge=0.0, seed=3))
    sizes = [row["n_active"] for row in state.rounds_log]
    assert sizes[0] == 10
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    for row in state.rounds_log:
        assert row["n_active"] - row["n_kept"] == len(row["dropped"])
