"""Shared data model: experiments, model structures, constraints.

A problem couples one ModelStructure with one or more measured
Trajectory objects and an optional affine ConstraintSet on the linear
coefficients.  validate_problem checks the cross-object invariants once
and returns an immutable handle the numerical modules consume.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fields import BasisField, EvalContext

__all__ = [
    "ValidationError",
    "Trajectory",
    "ModelStructure",
    "ConstraintSet",
    "ConvergenceFlag",
    "ParameterEstimate",
    "Problem",
    "validate_problem",
]


class ValidationError(ValueError):
    """Raised when a problem component violates a structural invariant."""


@dataclass(frozen=True)
class Trajectory:
    """Measurements of one experiment.

    times: (n_times,) strictly increasing sample instants.
    states: (n_states, n_times) measured values, row per state.
    history: optional (n_states,) constant values for t below times[0]
        (delay problems only).
    exogenous: named per-experiment constants such as T, S, P.
    """

    times: np.ndarray
    states: np.ndarray
    history: np.ndarray | None = None
    exogenous: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        if self.history is not None:
            object.__setattr__(self, "history", np.asarray(self.history, dtype=float))
        if times.ndim != 1:
            raise ValidationError("times must be one-dimensional")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("times must be strictly increasing")
        if states.ndim != 2 or states.shape[1] != times.size:
            raise ValidationError(
                "dimension mismatch: states must be (n_states, n_times) "
                f"matching {times.size} sample instants, got {states.shape}"
            )
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(states)):
            raise ValidationError("non-finite measurement values")
        if self.history is not None and self.history.shape != (states.shape[0],):
            raise ValidationError("dimension mismatch: history must have one value per state")

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_times(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class ModelStructure:
    """Basis fields plus the linear/nonlinear parameter split.

    basis[j] multiplies the linear coefficient p_j.  delays lists which
    phi entries are time delays (their values must stay nonnegative).
    stoich is carried for bookkeeping when the basis was generated
    rate-wise from a stoichiometric matrix; the basis fields already
    embed it.
    """

    n_states: int
    basis: tuple[BasisField, ...]
    n_linear: int
    n_nonlinear: int
    delays: tuple[int, ...] = ()
    stoich: np.ndarray | None = None
    p_names: tuple[str, ...] | None = None
    phi_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "basis", tuple(self.basis))
        object.__setattr__(self, "delays", tuple(int(d) for d in self.delays))
        if len(self.basis) != self.n_linear:
            raise ValidationError(
                f"dimension mismatch: {len(self.basis)} basis fields for n_linear={self.n_linear}"
            )
        for d in self.delays:
            if not 0 <= d < self.n_nonlinear:
                raise ValidationError(f"delay index {d} outside phi range")
        if self.p_names is not None and len(self.p_names) != self.n_linear:
            raise ValidationError("dimension mismatch: p_names length")
        if self.phi_names is not None and len(self.phi_names) != self.n_nonlinear:
            raise ValidationError("dimension mismatch: phi_names length")


def _as_matrix(m, n_cols: int, what: str) -> np.ndarray:
    if m is None:
        return np.zeros((0, n_cols))
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return np.zeros((0, n_cols))
    if m.shape[1] != n_cols:
        raise ValidationError(f"dimension mismatch: {what} must have {n_cols} columns")
    return m


@dataclass(frozen=True)
class ConstraintSet:
    """Affine constraints G p = c, H p <= d and box bounds on phi."""

    n_linear: int
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    ineq_matrix: np.ndarray | None = None
    ineq_rhs: np.ndarray | None = None
    phi_lower: np.ndarray | float = -np.inf
    phi_upper: np.ndarray | float = np.inf

    def __post_init__(self):
        g = _as_matrix(self.eq_matrix, self.n_linear, "eq_matrix")
        h = _as_matrix(self.ineq_matrix, self.n_linear, "ineq_matrix")
        c = np.zeros(0) if self.eq_rhs is None else np.atleast_1d(np.asarray(self.eq_rhs, dtype=float))
        d = np.zeros(0) if self.ineq_rhs is None else np.atleast_1d(np.asarray(self.ineq_rhs, dtype=float))
        if c.size != g.shape[0]:
            raise ValidationError("dimension mismatch: eq_rhs length")
        if d.size != h.shape[0]:
            raise ValidationError("dimension mismatch: ineq_rhs length")
        if g.shape[0] > self.n_linear:
            raise ValidationError("more equality constraints than linear parameters")
        if g.shape[0] and np.linalg.matrix_rank(g) < g.shape[0]:
            raise ValidationError("rank-deficient equalities")
        object.__setattr__(self, "eq_matrix", g)
        object.__setattr__(self, "eq_rhs", c)
        object.__setattr__(self, "ineq_matrix", h)
        object.__setattr__(self, "ineq_rhs", d)

    @property
    def m_eq(self) -> int:
        return self.eq_matrix.shape[0]

    @property
    def m_ineq(self) -> int:
        return self.ineq_matrix.shape[0]

    def phi_bounds(self, n_nonlinear: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.broadcast_to(np.asarray(self.phi_lower, dtype=float), (n_nonlinear,)).copy()
        hi = np.broadcast_to(np.asarray(self.phi_upper, dtype=float), (n_nonlinear,)).copy()
        return lo, hi

    @staticmethod
    def nonnegative_p(n_linear: int, **kw) -> "ConstraintSet":
        """The p >= 0 constraint as H p <= d with H = -I, d = 0."""
        return ConstraintSet(
            n_linear,
            ineq_matrix=-np.eye(n_linear),
            ineq_rhs=np.zeros(n_linear),
            **kw,
        )


class ConvergenceFlag(enum.Enum):
    converged = "converged"
    max_iter = "max_iter"
    line_search_failure = "line_search_failure"
    regularity_warning = "regularity_warning"


@dataclass
class ParameterEstimate:
    """Result of an estimation run."""

    p: np.ndarray
    phi: np.ndarray
    loss: float
    iterations: int
    convergence_flag: ConvergenceFlag
    loss_trace: tuple[float, ...] = ()

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.loss < 0:
            raise ValidationError("loss must be nonnegative")


@dataclass(frozen=True)
class Problem:
    """Validated handle: one model, its constraints, and the data."""

    model: ModelStructure
    constraints: ConstraintSet
    trajectories: tuple[Trajectory, ...]

    @property
    def n_linear(self) -> int:
        return self.model.n_linear

    @property
    def n_nonlinear(self) -> int:
        return self.model.n_nonlinear

    @property
    def n_states(self) -> int:
        return self.model.n_states

    def effective_phi_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box bounds with delay entries floored at 0 and capped by the
        shortest data span (a delay longer than the record is meaningless)."""
        lo, hi = self.constraints.phi_bounds(self.n_nonlinear)
        if self.model.delays:
            span = min(t.times[-1] - t.times[0] for t in self.trajectories)
            for d in self.model.delays:
                lo[d] = max(lo[d], 0.0)
                hi[d] = min(hi[d], span)
        return lo, hi


def _probe_basis(model: ModelStructure, traj: Trajectory, constraints: ConstraintSet) -> None:
    """Evaluate every basis field on a data sample; non-finite output is
    a modelling error better caught here than mid-optimization."""
    lo, hi = constraints.phi_bounds(model.n_nonlinear)
    phi_probe = np.clip(np.ones(model.n_nonlinear), lo, hi)
    phi_probe = np.where(np.isfinite(phi_probe), phi_probe, 1.0)
    x = traj.states.T[: min(3, traj.n_times)]
    n_delays = len(model.delays)
    xdel = None
    xdel_dot = None
    if n_delays:
        base = traj.history if traj.history is not None else traj.states[:, 0]
        xdel = np.broadcast_to(base, (n_delays, x.shape[0], model.n_states)).copy()
        xdel_dot = np.zeros_like(xdel)
    ctx = EvalContext(x=x, phi=phi_probe, exogenous=traj.exogenous, xdel=xdel, xdel_dot=xdel_dot)
    for j, basis in enumerate(model.basis):
        try:
            val = basis.value(ctx)
        except KeyError as exc:
            raise ValidationError(f"basis field {j} needs exogenous constant {exc}") from exc
        if not np.all(np.isfinite(val)):
            raise ValidationError(f"basis field {j} produced non-finite values on data sample")


def validate_problem(
    model: ModelStructure,
    constraints: ConstraintSet | None,
    data: Sequence[Trajectory],
) -> Problem:
    """Check cross-object invariants and return an immutable handle.

    Raises ValidationError naming the first violated invariant: no data,
    dimension mismatches, rank-deficient equalities (checked when the
    ConstraintSet is built), or a declared delay without history values.
    """
    data = tuple(data)
    if not data:
        raise ValidationError("no data")
    if constraints is None:
        constraints = ConstraintSet(model.n_linear)
    if constraints.n_linear != model.n_linear:
        raise ValidationError("dimension mismatch: constraints sized for different n_linear")
    for i, traj in enumerate(data):
        if traj.n_states != model.n_states:
            raise ValidationError(
                f"dimension mismatch: trajectory {i} has {traj.n_states} states, model expects {model.n_states}"
            )
        if model.delays and traj.history is None:
            raise ValidationError("delay declared without history")
        if traj.n_times < 4:
            raise ValidationError(f"trajectory {i} has fewer than 4 samples")
        _probe_basis(model, traj, constraints)
    return Problem(model=model, constraints=constraints, trajectories=data)
