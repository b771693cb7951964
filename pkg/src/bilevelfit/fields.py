"""Basis vector fields that compose the right-hand side of a model.

Each field maps interpolated states (and, for delay problems, delayed
states) to an n_states-vector contribution; the model's dynamics are
``sum_j p_j * field_j(x, phi, exogenous)``.  Fields also expose their
directional derivative with respect to the nonlinear parameters so the
design-matrix derivatives can be assembled without numerical
differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

__all__ = [
    "EvalContext",
    "BasisField",
    "SeparableField",
    "MonomialField",
    "RationalField",
    "ArrheniusMonomialField",
    "InhibitionGateField",
    "TransportField",
    "DelayedMonomialField",
    "GAS_CONSTANT",
    "REFERENCE_TEMPERATURE",
]

GAS_CONSTANT = 8.314  # J / (mol K)
REFERENCE_TEMPERATURE = 373.0  # K, Arrhenius reference


@dataclass
class EvalContext:
    """Values a basis field may read at a batch of time nodes.

    x has shape (n_nodes, n_states).  For delay problems xdel and
    xdel_dot have shape (n_delays, n_nodes, n_states) and hold the
    interpolant (and its time derivative) evaluated at t - tau_d;
    xdel_dot is zero wherever the lookup fell into the constant
    history.
    """

    x: np.ndarray
    phi: np.ndarray
    exogenous: Mapping[str, float]
    xdel: np.ndarray | None = None
    xdel_dot: np.ndarray | None = None


class BasisField:
    """One basis vector field theta_j."""

    #: indices of the nonlinear parameters this field depends on
    phi_deps: tuple[int, ...] = ()

    def value(self, ctx: EvalContext) -> np.ndarray:
        """Return the (n_nodes, n_states) integrand values."""
        raise NotImplementedError

    def dphi_v(self, ctx: EvalContext, v: np.ndarray) -> np.ndarray | None:
        """Directional derivative of value w.r.t. phi along v.

        Returns None when the derivative is identically zero (no
        dependence on the support of v).  Delay chain-rule terms are
        included: a field reading xdel[d] contributes
        -d(theta)/d(xdel) * xdel_dot[d] * v[tau_index].
        """
        return None


def _monomial(x: np.ndarray, powers: np.ndarray) -> np.ndarray:
    out = np.ones(x.shape[0])
    for i in np.nonzero(powers)[0]:
        m = powers[i]
        out = out * (x[:, i] if m == 1 else x[:, i] ** m)
    return out


def _signal(ctx: EvalContext, sig: tuple[str, int | str]):
    kind, key = sig
    if kind == "state":
        return ctx.x[:, key]
    if kind == "exo":
        return float(ctx.exogenous[key])
    raise ValueError(f"unknown signal kind {kind!r}")


class SeparableField(BasisField):
    """Field of the form scalar(t) * weights, weights constant in time.

    The scalar part can be integrated once and broadcast over the
    output states, and fields sharing scalar_key share that integral.
    """

    #: hashable identifying the scalar integrand within one (phi, experiment)
    #: evaluation; None disables caching
    scalar_key: Hashable | None = None

    def weights(self, phi: np.ndarray, exogenous: Mapping[str, float]) -> np.ndarray:
        raise NotImplementedError

    def dweights_v(self, phi, exogenous, v) -> np.ndarray | None:
        return None

    def scalar(self, ctx: EvalContext) -> np.ndarray:
        raise NotImplementedError

    def dscalar_v(self, ctx: EvalContext, v: np.ndarray) -> np.ndarray | None:
        return None

    def value(self, ctx: EvalContext) -> np.ndarray:
        return self.scalar(ctx)[:, None] * self.weights(ctx.phi, ctx.exogenous)[None, :]

    def dphi_v(self, ctx: EvalContext, v: np.ndarray) -> np.ndarray | None:
        w = self.weights(ctx.phi, ctx.exogenous)
        ds = self.dscalar_v(ctx, v)
        dw = self.dweights_v(ctx.phi, ctx.exogenous, v)
        out = None
        if ds is not None:
            out = ds[:, None] * w[None, :]
        if dw is not None:
            term = self.scalar(ctx)[:, None] * dw[None, :]
            out = term if out is None else out + term
        return out


@dataclass
class MonomialField(SeparableField):
    """weights * prod_i x_i^powers_i; no nonlinear-parameter dependence."""

    out_weights: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        self.out_weights = np.asarray(self.out_weights, dtype=float)
        self.powers = np.asarray(self.powers, dtype=int)
        self.scalar_key = ("mono", tuple(self.powers))

    def weights(self, phi, exogenous):
        return self.out_weights

    def scalar(self, ctx):
        return _monomial(ctx.x, self.powers)


@dataclass
class RationalField(SeparableField):
    """weights * prod x^powers * x_num / (x_num + phi[km_index]).

    The Michaelis-Menten style saturation used by the calcium and
    Mendes models.
    """

    out_weights: np.ndarray
    powers: np.ndarray
    num_state: int
    km_index: int

    def __post_init__(self):
        self.out_weights = np.asarray(self.out_weights, dtype=float)
        self.powers = np.asarray(self.powers, dtype=int)
        self.phi_deps = (self.km_index,)
        self.scalar_key = ("mm", tuple(self.powers), self.num_state, self.km_index)

    def weights(self, phi, exogenous):
        return self.out_weights

    def scalar(self, ctx):
        xn = ctx.x[:, self.num_state]
        return _monomial(ctx.x, self.powers) * xn / (xn + ctx.phi[self.km_index])

    def dscalar_v(self, ctx, v):
        vk = v[self.km_index]
        if vk == 0.0:
            return None
        xn = ctx.x[:, self.num_state]
        return -self.scalar(ctx) / (xn + ctx.phi[self.km_index]) * vk


@dataclass
class ArrheniusMonomialField(SeparableField):
    """Monomial whose output weights carry an Arrhenius temperature factor.

    weights = base_weights * exp(-phi[e_index]/R * (1/T - 1/T_ref)) with
    the experiment temperature T read from the exogenous constants.
    """

    base_weights: np.ndarray
    powers: np.ndarray
    e_index: int
    gas_constant: float = GAS_CONSTANT
    ref_temperature: float = REFERENCE_TEMPERATURE

    def __post_init__(self):
        self.base_weights = np.asarray(self.base_weights, dtype=float)
        self.powers = np.asarray(self.powers, dtype=int)
        self.phi_deps = (self.e_index,)
        self.scalar_key = ("mono", tuple(self.powers))

    def _exponent_factor(self, exogenous) -> float:
        temp = float(exogenous["T"])
        return -(1.0 / temp - 1.0 / self.ref_temperature) / self.gas_constant

    def weights(self, phi, exogenous):
        c = self._exponent_factor(exogenous)
        return self.base_weights * np.exp(c * phi[self.e_index])

    def dweights_v(self, phi, exogenous, v):
        ve = v[self.e_index]
        if ve == 0.0:
            return None
        c = self._exponent_factor(exogenous)
        return self.weights(phi, exogenous) * (c * ve)

    def scalar(self, ctx):
        return _monomial(ctx.x, self.powers)


@dataclass
class InhibitionGateField(SeparableField):
    """weights / (1 + (u/phi_a)^phi_b + (phi_c/w)^phi_d).

    The Mendes pathway gates; u and w are ("state", i) or ("exo", name)
    signals and must be positive.
    """

    out_weights: np.ndarray
    num_signal: tuple[str, int | str]
    den_signal: tuple[str, int | str]
    qa: int
    qb: int
    qc: int
    qd: int

    def __post_init__(self):
        self.out_weights = np.asarray(self.out_weights, dtype=float)
        self.phi_deps = (self.qa, self.qb, self.qc, self.qd)

    def weights(self, phi, exogenous):
        return self.out_weights

    def _parts(self, ctx):
        phi = ctx.phi
        u = _signal(ctx, self.num_signal)
        w = _signal(ctx, self.den_signal)
        a = (u / phi[self.qa]) ** phi[self.qb]
        b = (phi[self.qc] / w) ** phi[self.qd]
        return u, w, np.broadcast_to(a, ctx.x.shape[:1]).astype(float), np.broadcast_to(b, ctx.x.shape[:1]).astype(float)

    def scalar(self, ctx):
        _, _, a, b = self._parts(ctx)
        return 1.0 / (1.0 + a + b)

    def dscalar_v(self, ctx, v):
        if all(v[i] == 0.0 for i in self.phi_deps):
            return None
        phi = ctx.phi
        u, w, a, b = self._parts(ctx)
        s = 1.0 / (1.0 + a + b)
        dd = np.zeros_like(s)
        if v[self.qa] != 0.0:
            dd += -(phi[self.qb] / phi[self.qa]) * a * v[self.qa]
        if v[self.qb] != 0.0:
            dd += a * np.log(u / phi[self.qa]) * v[self.qb]
        if v[self.qc] != 0.0:
            dd += (phi[self.qd] / phi[self.qc]) * b * v[self.qc]
        if v[self.qd] != 0.0:
            dd += b * np.log(phi[self.qc] / w) * v[self.qd]
        return -(s * s) * dd


@dataclass
class TransportField(SeparableField):
    """Carrier-mediated transfer term of the Mendes model.

    scalar = x_carrier * (1/phi_a) * (F - T) / (1 + F/phi_a + T/phi_b)
    with F, T source/destination signals.
    """

    out_weights: np.ndarray
    carrier_state: int
    src_signal: tuple[str, int | str]
    dst_signal: tuple[str, int | str]
    qa: int
    qb: int

    def __post_init__(self):
        self.out_weights = np.asarray(self.out_weights, dtype=float)
        self.phi_deps = (self.qa, self.qb)

    def weights(self, phi, exogenous):
        return self.out_weights

    def _parts(self, ctx):
        phi = ctx.phi
        f = _signal(ctx, self.src_signal)
        t = _signal(ctx, self.dst_signal)
        xc = ctx.x[:, self.carrier_state]
        den = 1.0 + f / phi[self.qa] + t / phi[self.qb]
        num = xc * (f - t) / phi[self.qa]
        return f, t, np.asarray(num, dtype=float), np.asarray(den, dtype=float)

    def scalar(self, ctx):
        _, _, num, den = self._parts(ctx)
        return num / den

    def dscalar_v(self, ctx, v):
        if v[self.qa] == 0.0 and v[self.qb] == 0.0:
            return None
        phi = ctx.phi
        f, t, num, den = self._parts(ctx)
        s = num / den
        out = np.zeros_like(s)
        if v[self.qa] != 0.0:
            out += (-s / phi[self.qa] + s * f / (phi[self.qa] ** 2 * den)) * v[self.qa]
        if v[self.qb] != 0.0:
            out += (s * t / (phi[self.qb] ** 2 * den)) * v[self.qb]
        return out


@dataclass
class DelayedMonomialField(SeparableField):
    """weights * prod x(t)^powers * x_{delayed_state}(t - tau)^delayed_power.

    tau is the nonlinear parameter phi[tau_index]; delay_slot selects
    the matching row of ctx.xdel.  The tau-derivative applies the chain
    rule through the delayed interpolant (d/dtau Psi(t - tau) =
    -dPsi/dt at the delayed time, zero in the constant-history region).
    """

    out_weights: np.ndarray
    powers: np.ndarray
    delay_slot: int
    delayed_state: int
    tau_index: int
    delayed_power: int = 1

    def __post_init__(self):
        self.out_weights = np.asarray(self.out_weights, dtype=float)
        self.powers = np.asarray(self.powers, dtype=int)
        self.phi_deps = (self.tau_index,)

    def weights(self, phi, exogenous):
        return self.out_weights

    def scalar(self, ctx):
        xd = ctx.xdel[self.delay_slot][:, self.delayed_state]
        out = _monomial(ctx.x, self.powers)
        return out * (xd if self.delayed_power == 1 else xd ** self.delayed_power)

    def dscalar_v(self, ctx, v):
        vt = v[self.tau_index]
        if vt == 0.0:
            return None
        xd = ctx.xdel[self.delay_slot][:, self.delayed_state]
        xd_dot = ctx.xdel_dot[self.delay_slot][:, self.delayed_state]
        m = self.delayed_power
        core = m * (xd ** (m - 1)) if m != 1 else 1.0
        return _monomial(ctx.x, self.powers) * core * (-xd_dot) * vt
