"""Basis fields: values and directional phi-derivatives against FD."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bilevelfit.fields import (
    REFERENCE_TEMPERATURE,
    ArrheniusMonomialField,
    DelayedMonomialField,
    EvalContext,
    InhibitionGateField,
    MonomialField,
    RationalField,
    TransportField,
)

N_NODES, N_STATES = 9, 3


def _x(seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.5, 3.0, (N_NODES, N_STATES))


def _ctx(phi, x=None, exogenous=None):
    return EvalContext(x=_x() if x is None else x, phi=np.asarray(phi, float),
                       exogenous=exogenous or {})


def _fd_dphi(field, phi, v, make_ctx, h=1e-6):
    up = field.value(make_ctx(np.asarray(phi) + h * np.asarray(v)))
    dn = field.value(make_ctx(np.asarray(phi) - h * np.asarray(v)))
    return (up - dn) / (2.0 * h)


def _check_field(field, phi, make_ctx=None, rtol=1e-6, atol=1e-9):
    make_ctx = make_ctx or (lambda p: _ctx(p))
    ctx = make_ctx(np.asarray(phi, float))
    val = field.value(ctx)
    assert val.shape == (ctx.x.shape[0], field.weights(ctx.phi, ctx.exogenous).size)
    rng = np.random.default_rng(7)
    for _ in range(3):
        v = rng.standard_normal(len(phi))
        got = field.dphi_v(ctx, v)
        fd = _fd_dphi(field, phi, v, make_ctx)
        assert_allclose(got, fd, rtol=rtol, atol=atol)
    # zero direction on the field's dependencies short-circuits to None
    v = np.ones(len(phi))
    v[list(field.phi_deps)] = 0.0
    assert field.dphi_v(ctx, v) is None


def test_monomial_value_and_no_phi_dependence():
    field = MonomialField(np.array([1.0, -2.0, 0.0]), np.array([1, 0, 2]))
    ctx = _ctx(np.zeros(0))
    val = field.value(ctx)
    expected = ctx.x[:, 0] * ctx.x[:, 2] ** 2
    assert_allclose(val[:, 0], expected)
    assert_allclose(val[:, 1], -2.0 * expected)
    assert_allclose(val[:, 2], 0.0)
    assert field.dphi_v(ctx, np.zeros(0)) is None


def test_rational_field():
    field = RationalField(np.array([1.0, 0.5, 0.0]), np.array([0, 1, 0]),
                          num_state=2, km_index=0)
    _check_field(field, [0.8])


def test_rational_field_value():
    field = RationalField(np.ones(1), np.zeros(N_STATES, dtype=int),
                          num_state=1, km_index=0)
    ctx = _ctx([2.0])
    xn = ctx.x[:, 1]
    assert_allclose(field.value(ctx)[:, 0], xn / (xn + 2.0))


def test_arrhenius_field():
    field = ArrheniusMonomialField(np.array([2.0, -1.0, 0.5]), np.array([1, 1, 0]),
                                   e_index=0)
    make_ctx = lambda p: _ctx(p, exogenous={"T": 385.0})
    _check_field(field, [5.0e4], make_ctx, rtol=1e-5, atol=1e-8)


def test_arrhenius_is_identity_at_reference_temperature():
    base = np.array([2.0, -1.0, 0.5])
    field = ArrheniusMonomialField(base, np.zeros(N_STATES, dtype=int), e_index=0)
    w = field.weights(np.array([7.7e4]), {"T": REFERENCE_TEMPERATURE})
    assert_allclose(w, base, rtol=1e-15)


def test_arrhenius_direction_of_temperature_effect():
    field = ArrheniusMonomialField(np.ones(1), np.zeros(N_STATES, dtype=int), e_index=0)
    hot = field.weights(np.array([5e4]), {"T": REFERENCE_TEMPERATURE + 10})
    cold = field.weights(np.array([5e4]), {"T": REFERENCE_TEMPERATURE - 10})
    assert hot[0] > 1.0 > cold[0]


def test_inhibition_gate_field():
    field = InhibitionGateField(np.array([1.0, 0.0, -1.0]),
                                num_signal=("state", 0), den_signal=("state", 2),
                                qa=0, qb=1, qc=2, qd=3)
    _check_field(field, [0.9, 1.7, 0.6, 2.1])


def test_inhibition_gate_with_exogenous_signal():
    field = InhibitionGateField(np.ones(1), num_signal=("exo", "S"),
                                den_signal=("state", 1), qa=0, qb=1, qc=2, qd=3)
    make_ctx = lambda p: _ctx(p, exogenous={"S": 1.3})
    _check_field(field, [1.1, 2.0, 0.7, 1.5], make_ctx)


def test_transport_field():
    field = TransportField(np.array([0.0, 1.0, -1.0]), carrier_state=0,
                           src_signal=("state", 1), dst_signal=("state", 2),
                           qa=0, qb=1)
    _check_field(field, [0.8, 1.9])


def test_delayed_monomial_field():
    # delayed lookup from a known smooth signal; the tau derivative must
    # equal the chain rule through that signal
    times = np.linspace(0.5, 2.5, N_NODES)
    x = _x()

    def make_ctx(phi):
        tau = phi[0]
        xdel = np.zeros((1, N_NODES, N_STATES))
        xdel_dot = np.zeros((1, N_NODES, N_STATES))
        xdel[0, :, 1] = np.sin(times - tau)
        xdel_dot[0, :, 1] = np.cos(times - tau)
        return EvalContext(x=x, phi=np.asarray(phi, float), exogenous={},
                           xdel=xdel, xdel_dot=xdel_dot)

    for power in (1, 2):
        field = DelayedMonomialField(np.array([1.0, 0.5, 0.0]), np.array([1, 0, 0]),
                                     delay_slot=0, delayed_state=1, tau_index=0,
                                     delayed_power=power)
        _check_field(field, [0.3], make_ctx)


def test_delayed_value_uses_the_delayed_state():
    x = _x()
    xdel = np.full((1, N_NODES, N_STATES), 2.0)
    ctx = EvalContext(x=x, phi=np.array([0.1]), exogenous={},
                      xdel=xdel, xdel_dot=np.zeros_like(xdel))
    field = DelayedMonomialField(np.ones(1), np.zeros(N_STATES, dtype=int),
                                 delay_slot=0, delayed_state=2, tau_index=0)
    assert_allclose(field.value(ctx)[:, 0], 2.0)


def test_unknown_signal_kind():
    field = InhibitionGateField(np.ones(1), num_signal=("bogus", 0),
                                den_signal=("state", 1), qa=0, qb=1, qc=2, qd=3)
    with pytest.raises(ValueError, match="signal kind"):
        field.value(_ctx([1.0, 1.0, 1.0, 1.0]))
