"""Integrated design assembly and its directional phi-derivatives."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bilevelfit.design import DesignBuilder, assemble_design, design_jvp
from bilevelfit.fields import (
    BasisField,
    DelayedMonomialField,
    MonomialField,
    RationalField,
)
from bilevelfit.interpolate import fit_interpolants
from bilevelfit.problem import ModelStructure, Trajectory, validate_problem


def _linear_problem():
    """One state measured as x(t) = t + 1 with a constant-rate model."""
    times = np.linspace(0.0, 3.0, 7)
    traj = Trajectory(times=times, states=(times + 1.0)[None, :])
    basis = (MonomialField(np.ones(1), np.zeros(1, dtype=int)),)
    model = ModelStructure(n_states=1, basis=basis, n_linear=1, n_nonlinear=0)
    return validate_problem(model, None, [traj]), times


def test_constant_field_gives_elapsed_time_column():
    problem, times = _linear_problem()
    interps = [fit_interpolants(problem.trajectories[0])]
    design = assemble_design(problem, interps, np.zeros(0))
    assert design.n_rows == times.size - 1
    assert_allclose(design.A[:, 0], times[1:] - times[0], rtol=1e-13)
    assert_allclose(design.b, times[1:] - times[0], rtol=1e-13)


def test_row_layout_time_major_then_state():
    times = np.linspace(0.0, 1.0, 5)
    states = np.vstack([times, 10.0 + 2.0 * times])
    traj = Trajectory(times=times, states=states)
    basis = (MonomialField(np.ones(2), np.zeros(2, dtype=int)),)
    model = ModelStructure(n_states=2, basis=basis, n_linear=1, n_nonlinear=0)
    problem = validate_problem(model, None, [traj])
    design = assemble_design(problem, [fit_interpolants(traj)], np.zeros(0))
    increments = (states[:, 1:] - states[:, [0]]).T.ravel()
    assert_allclose(design.b, increments, rtol=1e-14)
    assert design.n_rows == 2 * (times.size - 1)


def test_multiple_experiments_stack_rows():
    times = np.linspace(0.0, 2.0, 5)
    t1 = Trajectory(times=times, states=(times + 1.0)[None, :])
    t2 = Trajectory(times=times, states=(2.0 * times + 3.0)[None, :])
    basis = (MonomialField(np.ones(1), np.zeros(1, dtype=int)),)
    model = ModelStructure(n_states=1, basis=basis, n_linear=1, n_nonlinear=0)
    problem = validate_problem(model, None, [t1, t2])
    interps = [fit_interpolants(t1), fit_interpolants(t2)]
    design = assemble_design(problem, interps, np.zeros(0))
    assert design.n_rows == 2 * (times.size - 1)
    assert_allclose(design.b[: times.size - 1], times[1:])
    assert_allclose(design.b[times.size - 1:], 2.0 * times[1:])


def test_quadratic_integrand_integrates_exactly():
    # x(t) = t interpolates exactly, so the x^2 column is t^3/3 (Simpson
    # is exact through cubics)
    times = np.linspace(0.0, 2.0, 6)
    traj = Trajectory(times=times, states=times[None, :])
    basis = (MonomialField(np.ones(1), np.array([2])),)
    model = ModelStructure(n_states=1, basis=basis, n_linear=1, n_nonlinear=0)
    problem = validate_problem(model, None, [traj])
    design = assemble_design(problem, [fit_interpolants(traj)], np.zeros(0))
    assert_allclose(design.A[:, 0], times[1:] ** 3 / 3.0, rtol=1e-12, atol=1e-14)


def _rational_problem(seed=11):
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 2.0, 9)
    states = np.vstack([1.5 + np.sin(times), 2.0 + 0.3 * np.cos(times)])
    traj = Trajectory(times=times, states=states, exogenous={})
    basis = (
        MonomialField(np.array([1.0, 0.0]), np.array([1, 0])),
        RationalField(np.array([0.0, 1.0]), np.array([0, 1]), num_state=0, km_index=0),
        RationalField(np.array([1.0, -1.0]), np.zeros(2, dtype=int), num_state=1, km_index=1),
    )
    model = ModelStructure(n_states=2, basis=basis, n_linear=3, n_nonlinear=2)
    return validate_problem(model, None, [traj])


def test_jvp_matches_design_finite_differences():
    problem = _rational_problem()
    interps = [fit_interpolants(problem.trajectories[0])]
    phi = np.array([0.9, 1.4])
    builder = DesignBuilder(problem, interps, phi)
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(3):
        v = rng.standard_normal(2)
        dd = builder.jvp(v)
        up = assemble_design(problem, interps, phi + h * v)
        dn = assemble_design(problem, interps, phi - h * v)
        fd = (up.A - dn.A) / (2.0 * h)
        assert_allclose(dd.to_dense(), fd, rtol=1e-6, atol=1e-9)


def test_jvp_column_sparsity():
    problem = _rational_problem()
    interps = [fit_interpolants(problem.trajectories[0])]
    builder = DesignBuilder(problem, interps, np.array([0.9, 1.4]))
    dd = builder.jvp(np.array([1.0, 0.0]))
    assert set(dd.cols) == {1}  # only the km_index=0 rational column moves
    dd = builder.jvp(np.array([0.0, 1.0]))
    assert set(dd.cols) == {2}
    assert_allclose(dd.db_v, 0.0)


def test_matvec_rmatvec_match_dense():
    problem = _rational_problem()
    interps = [fit_interpolants(problem.trajectories[0])]
    builder = DesignBuilder(problem, interps, np.array([1.1, 0.8]))
    dd = builder.jvp(np.array([0.7, -0.4]))
    dense = dd.to_dense()
    rng = np.random.default_rng(8)
    p = rng.standard_normal(dense.shape[1])
    r = rng.standard_normal(dense.shape[0])
    assert_allclose(dd.matvec(p), dense @ p, rtol=1e-13, atol=1e-15)
    assert_allclose(dd.rmatvec(r), dense.T @ r, rtol=1e-13, atol=1e-15)


def _delay_problem(times):
    traj = Trajectory(times=times, states=(times + 1.0)[None, :],
                      history=np.array([1.0]))
    basis = (DelayedMonomialField(np.ones(1), np.zeros(1, dtype=int),
                                  delay_slot=0, delayed_state=0, tau_index=0),)
    model = ModelStructure(n_states=1, basis=basis, n_linear=1, n_nonlinear=1,
                           delays=(0,))
    return validate_problem(model, None, [traj])


def test_delayed_column_against_analytic_integral():
    # x(t) = t + 1 with constant history 1: for tau = 1 the delayed signal
    # is 1 until t = 1 and t thereafter, and the kink sits on a grid node
    times = np.linspace(0.0, 3.0, 7)
    problem = _delay_problem(times)
    interps = [fit_interpolants(problem.trajectories[0])]
    design = assemble_design(problem, interps, np.array([1.0]))

    def integral(t):
        return t if t <= 1.0 else 1.0 + (t**2 - 1.0) / 2.0

    assert_allclose(design.A[:, 0], [integral(t) for t in times[1:]], rtol=1e-13)


def test_delay_jvp_matches_finite_differences():
    times = np.linspace(0.0, 3.0, 13)
    traj = Trajectory(times=times, states=np.sin(times)[None, :],
                      history=np.array([0.0]))
    basis = (DelayedMonomialField(np.ones(1), np.zeros(1, dtype=int),
                                  delay_slot=0, delayed_state=0, tau_index=0),)
    model = ModelStructure(n_states=1, basis=basis, n_linear=1, n_nonlinear=1,
                           delays=(0,))
    problem = validate_problem(model, None, [traj])
    interps = [fit_interpolants(traj)]
    # tau placed so no quadrature node sits near the history boundary
    phi = np.array([0.8])
    dd = design_jvp(problem, interps, phi, np.array([1.0]))
    h = 1e-6
    up = assemble_design(problem, interps, phi + h)
    dn = assemble_design(problem, interps, phi - h)
    fd = (up.A - dn.A) / (2.0 * h)
    assert_allclose(dd.to_dense(), fd, rtol=1e-6, atol=1e-9)


def test_input_validation():
    problem = _rational_problem()
    interps = [fit_interpolants(problem.trajectories[0])]
    with pytest.raises(ValueError, match="phi"):
        DesignBuilder(problem, interps, np.zeros(3))
    with pytest.raises(ValueError, match="per trajectory"):
        DesignBuilder(problem, interps * 2, np.zeros(2))
    builder = DesignBuilder(problem, interps, np.array([1.0, 1.0]))
    with pytest.raises(ValueError, match="direction"):
        builder.jvp(np.zeros(3))


def test_nonseparable_field_uses_vector_quadrature():
    class CrossField(BasisField):
        def value(self, ctx):
            out = np.zeros_like(ctx.x)
            out[:, 0] = ctx.x[:, 0] * ctx.x[:, 1]
            out[:, 1] = -ctx.x[:, 0]
            return out

    times = np.linspace(0.0, 2.0, 7)
    states = np.vstack([times, times**2 + 1.0])
    traj = Trajectory(times=times, states=states)
    model = ModelStructure(n_states=2, basis=(CrossField(),), n_linear=1,
                           n_nonlinear=0)
    problem = validate_problem(model, None, [traj])
    design = assemble_design(problem, [fit_interpolants(traj)], np.zeros(0))
    # integrand rows interleave states: x0*x1 = t^3 + t and -x0 = -t
    expected = np.stack([times[1:] ** 4 / 4 + times[1:] ** 2 / 2,
                         -times[1:] ** 2 / 2], axis=1).ravel()
    assert_allclose(design.A[:, 0], expected, rtol=1e-12, atol=1e-13)
