"""Candidate-library construction and sequential threshold regression.

The library puts every polynomial term up to degree 2 behind each
reaction rate of a known stoichiometric matrix, optionally with a
per-term Arrhenius temperature factor.  stlsq_discover alternates full
bi-level optimization with thresholding of the linear coefficients
until the support stops shrinking or empties.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .benchmarks import CARBOXYLIC_STOICH
from .fields import (
    GAS_CONSTANT,
    REFERENCE_TEMPERATURE,
    ArrheniusMonomialField,
    MonomialField,
)
from .interpolate import fit_interpolants
from .outer import HESSIAN_MODES, OuterOptions, optimize_outer
from .parallel import thread_map
from .problem import (
    ConstraintSet,
    ModelStructure,
    ParameterEstimate,
    Problem,
    Trajectory,
    ValidationError,
    validate_problem,
)

__all__ = [
    "term_index",
    "term_label",
    "LibrarySpec",
    "DiscoveryProblem",
    "DiscoveryState",
    "build_discovery_problem",
    "stlsq_discover",
]

logger = logging.getLogger(__name__)


def term_index(i: int, j: int | None = None, n_states: int = 11) -> int:
    """Library position of a polynomial term.

    Linear terms x_i sit at index i; the quadratic term x_i x_j (i <= j)
    sits at n_states + (2*n_states + 1 - i)*i/2 + (j - i).
    """
    if j is None:
        if not 0 <= i < n_states:
            raise ValueError(f"linear term index {i} out of range")
        return i
    if not 0 <= i <= j < n_states:
        raise ValueError(f"quadratic term ({i}, {j}) requires 0 <= i <= j < {n_states}")
    return n_states + ((2 * n_states + 1 - i) * i) // 2 + (j - i)


def _term_table(n_states: int) -> list[tuple[int, ...]]:
    """Index -> state tuple for every term, in library order."""
    table: list[tuple[int, ...]] = [(i,) for i in range(n_states)]
    for i in range(n_states):
        for j in range(i, n_states):
            assert term_index(i, j, n_states) == len(table)
            table.append((i, j))
    return table


def term_label(rate: int, term: int) -> str:
    """Human name like k3_17 for (rate index 2, library term 17)."""
    return f"{rate + 1}_{term}"


@dataclass(frozen=True)
class LibrarySpec:
    """Degree-2 polynomial library over a fixed stoichiometric matrix."""

    stoich: np.ndarray = field(default_factory=lambda: CARBOXYLIC_STOICH.copy())
    degree: int = 2
    arrhenius: bool = True
    ref_temperature: float = REFERENCE_TEMPERATURE
    gas_constant: float = GAS_CONSTANT

    def __post_init__(self):
        if self.degree != 2:
            raise ValueError("only degree-2 libraries are supported")
        object.__setattr__(self, "stoich", np.asarray(self.stoich, dtype=float))

    @property
    def n_states(self) -> int:
        return self.stoich.shape[0]

    @property
    def n_rates(self) -> int:
        return self.stoich.shape[1]

    @property
    def n_terms(self) -> int:
        n = self.n_states
        return n + n * (n + 1) // 2


@dataclass(frozen=True)
class DiscoveryProblem:
    """A validated library problem plus the (rate, term) map of its columns."""

    problem: Problem
    library: LibrarySpec
    pairs: tuple[tuple[int, int], ...]  # (rate, term) per linear coefficient

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.library.n_rates, self.library.n_terms), dtype=bool)
        for r, t in self.pairs:
            m[r, t] = True
        return m

    def restrict(self, mask: np.ndarray) -> "DiscoveryProblem":
        return build_discovery_problem(self.problem.trajectories, self.library, mask)


def build_discovery_problem(
    trajectories: Sequence[Trajectory],
    library: LibrarySpec | None = None,
    mask: np.ndarray | None = None,
) -> DiscoveryProblem:
    """Assemble the masked candidate model over the given experiments.

    With the Arrhenius option every retained term gets one linear rate
    constant and one activation energy; dropping a term removes both.
    """
    library = library or LibrarySpec()
    n_rates, n_terms = library.n_rates, library.n_terms
    if mask is None:
        mask = np.ones((n_rates, n_terms), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_rates, n_terms):
        raise ValidationError(f"mask must have shape ({n_rates}, {n_terms})")
    if not mask.any():
        raise ValidationError("empty model")
    if library.arrhenius:
        temps = []
        for i, traj in enumerate(trajectories):
            if "T" not in traj.exogenous:
                raise ValidationError(f"missing temperature on trajectory {i}")
            temps.append(float(traj.exogenous["T"]))
        if temps and all(t == library.ref_temperature for t in temps):
            warnings.warn(
                "all experiments share the reference temperature; "
                "activation energies are not identifiable",
                RuntimeWarning,
            )
    table = _term_table(library.n_states)
    n = library.n_states
    basis = []
    pairs = []
    p_names = []
    phi_names = []
    e_counter = 0
    for r in range(n_rates):
        col = library.stoich[:, r].copy()
        for t in range(n_terms):
            if not mask[r, t]:
                continue
            powers = np.zeros(n, dtype=int)
            for s in table[t]:
                powers[s] += 1
            if library.arrhenius:
                basis.append(
                    ArrheniusMonomialField(
                        col, powers, e_index=e_counter,
                        gas_constant=library.gas_constant,
                        ref_temperature=library.ref_temperature,
                    )
                )
                phi_names.append("E" + term_label(r, t))
                e_counter += 1
            else:
                basis.append(MonomialField(col, powers))
            pairs.append((r, t))
            p_names.append("k" + term_label(r, t))
    n_lin = len(basis)
    n_phi = e_counter
    model = ModelStructure(
        n_states=n,
        basis=tuple(basis),
        n_linear=n_lin,
        n_nonlinear=n_phi,
        stoich=library.stoich.copy(),
        p_names=tuple(p_names),
        phi_names=tuple(phi_names) if library.arrhenius else None,
    )
    constraints = ConstraintSet(n_lin, phi_lower=0.0, phi_upper=1e6)
    problem = validate_problem(model, constraints, trajectories)
    return DiscoveryProblem(problem=problem, library=library, pairs=tuple(pairs))


@dataclass
class DiscoveryState:
    """Thresholding configuration and loop status.

    criterion selects how the per-round optimizer budget tightens:
    `tolerance_schedule` reads the schedule as projected-gradient
    tolerances, `iteration_schedule` as iteration caps (0 meaning run
    until converged).  Past the schedule's end the last entry repeats.
    hessian_mode defaults to reduced_gn because library problems couple
    hundreds of rate constants to their activation energies, where the
    positive-semidefinite model takes hundreds of short steps.
    """

    epsilon: float = 0.05
    ridge: float = 1e-6
    criterion: str = "tolerance_schedule"
    schedule: tuple = (1e-3, 1e-5, 1e-7)
    hessian_mode: str = "reduced_gn"
    active_mask: np.ndarray | None = None
    round: int = 0
    status: str = "running"
    seed: int = 0
    rounds_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.criterion not in ("tolerance_schedule", "iteration_schedule"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not self.schedule:
            raise ValueError("schedule must be non-empty")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValueError(f"hessian_mode must be one of {HESSIAN_MODES}")

    def round_options(self, base: OuterOptions | None = None) -> OuterOptions:
        opts = base or OuterOptions()
        opts.ridge = self.ridge
        opts.hessian_mode = self.hessian_mode
        value = self.schedule[min(self.round - 1, len(self.schedule) - 1)]
        if self.criterion == "tolerance_schedule":
            opts.gradient_tolerance = float(value)
            opts.max_iterations = max(opts.max_iterations, 200)
        else:
            opts.max_iterations = int(value) if value else 500
            opts.gradient_tolerance = min(opts.gradient_tolerance, 1e-7)
        return opts


def stlsq_discover(
    dproblem: DiscoveryProblem,
    config: DiscoveryState | None = None,
    base_options: OuterOptions | None = None,
) -> tuple[ParameterEstimate | None, DiscoveryState]:
    """Optimize, threshold, shrink; repeat until the support stabilizes.

    Returns the estimate on the surviving support with status
    `converged`, or (None, state) with status `all_eliminated` when the
    threshold wipes out every coefficient (epsilon too large).
    """
    state = config or DiscoveryState()
    library = dproblem.library
    if state.active_mask is None:
        state.active_mask = dproblem.mask.copy()
    else:
        state.active_mask = np.asarray(state.active_mask, dtype=bool).copy()
    rng = np.random.default_rng(state.seed)
    current = dproblem if np.array_equal(state.active_mask, dproblem.mask) else dproblem.restrict(state.active_mask)
    interpolants = thread_map(fit_interpolants, list(dproblem.problem.trajectories))
    phi_start = None
    if library.arrhenius:
        phi_start = rng.uniform(1e4, 1e5, size=current.problem.n_nonlinear)
    estimate = None
    max_rounds = library.n_rates * library.n_terms
    while state.round < max_rounds:
        state.round += 1
        opts = state.round_options(base_options)
        if library.arrhenius and opts.phi_scale is None:
            # activation energies live at 1e4..1e5 J/mol; measure the trust
            # region and gradient test in units of 1e4 so they stay meaningful
            opts.phi_scale = 1e4
        phi0 = phi_start if phi_start is not None else np.zeros(0)
        logger.info(
            "round %d: optimizing %d terms", state.round, current.problem.n_linear
        )
        estimate = optimize_outer(current.problem, interpolants, phi0, opts)
        keep = np.abs(estimate.p) > state.epsilon
        dropped = [pair for pair, k in zip(current.pairs, keep) if not k]
        logger.info(
            "round %d: kept %d of %d, loss %.6e after %d iterations (%s)",
            state.round,
            int(np.count_nonzero(keep)),
            int(keep.size),
            float(estimate.loss),
            estimate.iterations,
            estimate.convergence_flag.value,
        )
        state.rounds_log.append(
            {
                "round": state.round,
                "n_active": int(keep.size),
                "n_kept": int(np.count_nonzero(keep)),
                "dropped": dropped,
                "loss": float(estimate.loss),
                "flag": estimate.convergence_flag.value,
            }
        )
        if not keep.any():
            state.active_mask[:] = False
            state.status = "all_eliminated"
            return None, state
        if keep.all():
            state.status = "converged"
            return estimate, state
        for r, t in dropped:
            state.active_mask[r, t] = False
        if library.arrhenius:
            phi_start = estimate.phi[keep]
        current = dproblem.restrict(state.active_mask)
    state.status = "converged"
    return estimate, state
