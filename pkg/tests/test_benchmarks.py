"""Reference problems: frozen constants, simulators, validation, records."""

import numpy as np
import pytest

from bilevelfit.benchmarks import (
    CARBOXYLIC_TEMPERATURES,
    make_dataset,
    make_problem,
    refine_estimate,
    simulate_dde,
    simulate_ode,
    validate_estimate,
)
from bilevelfit.fields import MonomialField
from bilevelfit.problem import (
    ConvergenceFlag,
    ModelStructure,
    ParameterEstimate,
    Trajectory,
)
from bilevelfit.records import (
    ResultRecord,
    config_hash,
    read_trajectory_csv,
    write_trajectory_csv,
)


def test_problem_shapes_and_truth_constants():
    cal = make_problem("calcium")
    assert (cal.model.n_linear, cal.model.n_nonlinear) == (11, 6)
    np.testing.assert_allclose(cal.true_p[:3], [0.09, 2.0, 1.27])
    np.testing.assert_allclose(cal.true_phi, [0.19, 0.73, 29.09, 2.67, 0.16, 0.05])
    assert len(cal.experiments) == 1

    men = make_problem("mendes")
    assert (men.model.n_linear, men.model.n_nonlinear) == (15, 21)
    assert len(men.experiments) == 16
    assert men.constraints.ineq_matrix is not None

    dde = make_problem("km_dde")
    assert (dde.model.n_linear, dde.model.n_nonlinear) == (6, 2)
    assert dde.model.delays == (0, 1)
    np.testing.assert_allclose(dde.true_p, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    np.testing.assert_allclose(dde.true_phi, [1.0, 10.0])

    car = make_problem("carboxylic")
    assert (car.model.n_linear, car.model.n_nonlinear) == (12, 12)
    assert len(car.experiments) == 30
    temps = [exp.exogenous["T"] for exp in car.experiments]
    assert temps[:5] == list(CARBOXYLIC_TEMPERATURES)
    assert temps[5] == CARBOXYLIC_TEMPERATURES[0]


def test_problem_factory_validation():
    with pytest.raises(ValueError, match="unknown problem"):
        make_problem("lorenz")
    with pytest.raises(ValueError, match="fixed experiment layout"):
        make_problem("calcium", n_experiments=2)
    assert len(make_problem("carboxylic", n_experiments=7).experiments) == 7


def test_sample_grid_from_span():
    cal = make_problem("calcium")
    times = cal.times
    assert times.size == 601
    np.testing.assert_allclose(times[1] - times[0], 0.1)
    np.testing.assert_allclose(times[-1], 60.0)


def test_dataset_is_seed_deterministic():
    spec = make_problem("carboxylic", n_experiments=3)
    a = make_dataset(spec, seed=0)
    b = make_dataset(spec, seed=0)
    c = make_dataset(spec, seed=1)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.states, tb.states)
    assert not np.array_equal(a[0].states[:, 0], c[0].states[:, 0])
    for traj in a:
        ics = traj.states[:, 0]
        assert np.all(ics >= 4.0) and np.all(ics <= 10.0)


def _decay_model():
    return ModelStructure(
        n_states=1,
        basis=(MonomialField(np.array([-1.0]), np.array([1])),),
        n_linear=1,
        n_nonlinear=0,
        p_names=("k1",),
    )


def test_ode_simulator_matches_exponential():
    times = np.linspace(0.0, 5.0, 26)
    traj = simulate_ode(_decay_model(), np.array([1.0]), np.zeros(0), np.array([1.0]), times)
    assert np.max(np.abs(traj.states[0] - np.exp(-times))) <= 1e-8


def test_ode_simulator_rejects_delay_models():
    spec = make_problem("km_dde")
    with pytest.raises(ValueError, match="use simulate_dde"):
        simulate_ode(spec, spec.true_p, spec.true_phi, spec.history, spec.times)


def test_dde_simulator_matches_first_interval_analytically():
    spec = make_problem("km_dde")
    times = np.linspace(0.0, 1.0, 21)
    traj = simulate_dde(spec, spec.true_p, spec.true_phi, spec.history, times)
    # below the shortest delay both lookups read the constant history
    # x1(t - tau) = 0.1, so the states solve a linear cascade:
    #   x0' = -0.01 x0 + 0.02, x1' = 0.03 x0 - 0.4 x1, x2' = 0.5 x1 - 0.06
    x0 = 2.0 + 3.0 * np.exp(-0.01 * times)
    b = 0.09 / 0.39
    a = 0.1 - 0.15 - b
    x1 = 0.15 + b * np.exp(-0.01 * times) + a * np.exp(-0.4 * times)
    x2 = (
        1.0
        + 0.015 * times
        + (0.5 * b / 0.01) * (1.0 - np.exp(-0.01 * times))
        + (0.5 * a / 0.4) * (1.0 - np.exp(-0.4 * times))
    )
    np.testing.assert_allclose(traj.states, np.vstack([x0, x1, x2]), atol=1e-8)


def test_dde_simulator_rejects_plain_ode_models():
    times = np.linspace(0.0, 1.0, 11)
    with pytest.raises(ValueError, match="use simulate_ode"):
        simulate_dde(_decay_model(), np.array([1.0]), np.zeros(0), np.array([1.0]), times)


def test_calcium_dataset_stays_positive():
    spec = make_problem("calcium")
    data = make_dataset(spec)
    assert np.all(data[0].states > -1e-9)
    assert np.max(data[0].states[0]) > 1.0  # the oscillator actually spikes


def test_validation_report_at_truth():
    spec = make_problem("km_dde")
    data = make_dataset(spec)
    est = ParameterEstimate(
        p=spec.true_p.copy(), phi=spec.true_phi.copy(), loss=0.0,
        iterations=0, convergence_flag=ConvergenceFlag.converged, loss_trace=(0.0,),
    )
    report = validate_estimate(spec, est, data)
    assert report.max_rel_error == 0.0
    assert np.max(report.state_rmse) <= 1e-12
    as_dict = report.to_dict()
    assert set(as_dict) == {"p_rel_error", "phi_rel_error", "max_rel_error", "state_rmse"}


def test_validation_rejects_mismatched_shapes():
    spec = make_problem("km_dde")
    data = make_dataset(spec)
    est = ParameterEstimate(
        p=np.ones(3), phi=spec.true_phi.copy(), loss=0.0,
        iterations=0, convergence_flag=ConvergenceFlag.converged, loss_trace=(0.0,),
    )
    with pytest.raises(ValueError, match="dimensions"):
        validate_estimate(spec, est, data)


def test_refinement_returns_oneshot_when_disabled():
    spec = make_problem("km_dde")
    data = make_dataset(spec)
    est, log = refine_estimate(spec, data, spec.true_phi.copy(), rounds=0)
    assert log == []
    report = validate_estimate(spec, est, data)
    assert report.max_rel_error <= 1e-4


def test_record_json_is_deterministic():
    rec = ResultRecord(command="estimate", problem="calcium", config={"seed": 1, "rounds": 2})
    again = ResultRecord(command="estimate", problem="calcium", config={"rounds": 2, "seed": 1})
    assert rec.to_json(include_timestamps=False) == again.to_json(include_timestamps=False)
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert "timestamps" in rec.to_dict()


def test_trajectory_csv_round_trip(tmp_path):
    times = np.linspace(0.0, 1.0, 9)
    rng = np.random.default_rng(7)
    states = rng.normal(size=(3, 9))
    traj = Trajectory(times=times, states=states, exogenous={"T": 373.0})
    path = write_trajectory_csv(tmp_path / "traj.csv", traj)
    back = read_trajectory_csv(path)
    np.testing.assert_array_equal(back.times, times)
    np.testing.assert_array_equal(back.states, states)
    assert back.exogenous == {"T": 373.0}


def test_trajectory_csv_header_validation(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,x0\n0.0,1.0\n")
    with pytest.raises(ValueError, match="first column must be t"):
        read_trajectory_csv(bad)
    nostates = tmp_path / "nostates.csv"
    nostates.write_text("t,y0\n0.0,1.0\n")
    with pytest.raises(ValueError, match="no state columns"):
        read_trajectory_csv(nostates)
