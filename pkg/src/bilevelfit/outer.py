"""Outer objective, gradient, Hessian over phi and the Newton loop.

The outer objective is the inner Lagrangian at its optimum, so its
gradient reduces to the explicit phi-dependence (the dp*/dphi term
cancels at inner stationarity): grad_j = r^T (dA_{e_j} p*).  Three
Hessian models are available.  `paper` adds the inner curvature
projected through dp*/dphi to a Gauss-Newton estimate of the explicit
term, giving a positive-semidefinite model that can strongly
overestimate curvature where p* and phi are correlated;
`reduced_gn` subtracts the same projected term, matching the sign
structure of the exact envelope second derivative up to
residual-weighted corrections; `exact_chain` differentiates the
analytic gradient by central finite differences.  The optimizer is a
box-projected trust-region Newton method.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import DesignBuilder
from .innersolve import InnerSolution, solve_inner
from .interpolate import InterpolantSet
from .kktgrad import kkt_jvp_batch
from .problem import ConvergenceFlag, ParameterEstimate, Problem

__all__ = ["OuterOptions", "OuterEvaluation", "outer_eval", "optimize_outer"]

HESSIAN_MODES = ("paper", "exact_chain", "reduced_gn")


@dataclass
class OuterOptions:
    """Solver settings for the outer iteration.

    phi_scale sets the natural magnitude of the phi components: the
    trust region, step norms, and the projected-gradient test are all
    measured in phi/phi_scale units.  Leave it None for unit scaling.
    """

    max_iterations: int = 100
    gradient_tolerance: float = 1e-6
    initial_radius: float = 1.0
    expand: float = 2.0
    contract: float = 0.25
    hessian_mode: str = "paper"
    ridge: float = 0.0
    fd_step: float = 1e-6
    min_radius: float = 1e-13
    quad_refinement: int = 1
    phi_scale: float | np.ndarray | None = None

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.initial_radius <= 0:
            raise ValueError("tolerances and radii must be positive")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValueError(f"hessian_mode must be one of {HESSIAN_MODES}")
        if self.quad_refinement < 1:
            raise ValueError("quad_refinement must be a positive integer")
        if self.phi_scale is not None and np.any(np.asarray(self.phi_scale) <= 0):
            raise ValueError("phi_scale entries must be positive")


@dataclass
class OuterEvaluation:
    objective: float
    gradient: np.ndarray
    hessian: np.ndarray
    inner: InnerSolution
    dp_dphi: np.ndarray


def _unit_jvps(builder: DesignBuilder, n_phi: int):
    eye = np.eye(n_phi)
    return [builder.jvp(eye[j]) for j in range(n_phi)]


def _gradient_parts(problem: Problem, interpolants, phi: np.ndarray, ridge: float, refinement: int = 1):
    """Design, inner solution, per-direction dA p* columns, and gradient."""
    builder = DesignBuilder(problem, interpolants, phi, refinement)
    design = builder.design()
    sol = solve_inner(design, problem.constraints, ridge)
    n_phi = problem.n_nonlinear
    d_designs = _unit_jvps(builder, n_phi)
    dap = np.zeros((design.n_rows, n_phi))
    for j, dd in enumerate(d_designs):
        dap[:, j] = dd.matvec(sol.p_star)
    grad = dap.T @ sol.residual
    return design, sol, d_designs, dap, grad


def outer_eval(
    problem: Problem,
    interpolants: Sequence[InterpolantSet],
    phi: np.ndarray,
    ridge: float = 0.0,
    mode: str = "paper",
    refinement: int = 1,
) -> OuterEvaluation:
    """Objective, envelope gradient, Hessian, and dp*/dphi at one phi."""
    if mode not in HESSIAN_MODES:
        raise ValueError(f"unknown hessian mode {mode!r}")
    phi = np.asarray(phi, dtype=float)
    design, sol, d_designs, dap, grad = _gradient_parts(problem, interpolants, phi, ridge, refinement)
    n_phi = problem.n_nonlinear
    if n_phi == 0:
        return OuterEvaluation(
            objective=sol.objective_value,
            gradient=np.zeros(0),
            hessian=np.zeros((0, 0)),
            inner=sol,
            dp_dphi=np.zeros((problem.n_linear, 0)),
        )
    w1, _, _, dap2 = kkt_jvp_batch(sol, design, d_designs)
    if mode == "exact_chain":
        hess = _fd_hessian(problem, interpolants, phi, ridge, refinement)
    else:
        aw = design.A @ w1
        explicit = dap2.T @ dap2
        projected = aw.T @ aw + ridge * (w1.T @ w1)
        hess = explicit + projected if mode == "paper" else explicit - projected
    hess = 0.5 * (hess + hess.T)
    return OuterEvaluation(
        objective=sol.objective_value,
        gradient=grad,
        hessian=hess,
        inner=sol,
        dp_dphi=w1,
    )


def _fd_hessian(problem: Problem, interpolants, phi: np.ndarray, ridge: float, refinement: int = 1) -> np.ndarray:
    """Central differences of the analytic gradient, clipped into bounds."""
    lo, hi = problem.effective_phi_bounds()
    n_phi = phi.size
    hess = np.zeros((n_phi, n_phi))
    for j in range(n_phi):
        h = 1e-6 * max(1.0, abs(phi[j]))
        up = phi.copy()
        dn = phi.copy()
        up[j] = min(phi[j] + h, hi[j])
        dn[j] = max(phi[j] - h, lo[j])
        spread = up[j] - dn[j]
        if spread <= 0:
            continue
        *_, g_up = _gradient_parts(problem, interpolants, up, ridge, refinement)
        *_, g_dn = _gradient_parts(problem, interpolants, dn, ridge, refinement)
        hess[:, j] = (g_up - g_dn) / spread
    return hess


def _trust_region_step(grad: np.ndarray, hess: np.ndarray, radius: float) -> np.ndarray:
    """Minimize g.s + s.H.s/2 over the 2-norm ball of the given radius."""
    evals, evecs = np.linalg.eigh(hess)
    gq = evecs.T @ grad
    lam_min = evals[0]
    if lam_min > 0:
        s = evecs @ (-gq / evals)
        if np.linalg.norm(s) <= radius:
            return s

    def step_norm(nu: float) -> float:
        return float(np.linalg.norm(gq / (evals + nu)))

    nu_lo = max(0.0, -lam_min) + 1e-14 * max(1.0, abs(lam_min))
    if step_norm(nu_lo) <= radius:
        # hard case: gradient (nearly) orthogonal to the most negative mode
        s = evecs @ (-gq / (evals + nu_lo))
        v = evecs[:, 0]
        c = radius**2 - float(s @ s)
        if c > 0:
            s = s + np.sqrt(c) * v
        return s
    nu_hi = nu_lo + np.linalg.norm(grad) / radius + 1.0
    while step_norm(nu_hi) > radius:
        nu_hi = 2.0 * nu_hi
    for _ in range(100):
        nu = 0.5 * (nu_lo + nu_hi)
        if step_norm(nu) > radius:
            nu_lo = nu
        else:
            nu_hi = nu
    return evecs @ (-gq / (evals + nu_hi))


def optimize_outer(
    problem: Problem,
    interpolants: Sequence[InterpolantSet],
    phi0: np.ndarray,
    options: OuterOptions | None = None,
) -> ParameterEstimate:
    """Trust-region Newton over phi inside the box bounds.

    Accepted steps strictly decrease the objective; the iteration stops
    on a small projected gradient, the iteration budget, or trust-radius
    underflow (best iterate returned, flagged).
    """
    options = options or OuterOptions()
    lo, hi = problem.effective_phi_bounds()
    phi = np.clip(np.asarray(phi0, dtype=float), lo, hi)
    ridge, mode = options.ridge, options.hessian_mode
    refinement = options.quad_refinement
    scale = np.broadcast_to(
        np.asarray(1.0 if options.phi_scale is None else options.phi_scale, dtype=float),
        phi.shape,
    )

    if problem.n_nonlinear == 0:
        ev = outer_eval(problem, interpolants, phi, ridge, mode, refinement)
        flag = (
            ConvergenceFlag.regularity_warning
            if ev.inner.active_set.any()
            else ConvergenceFlag.converged
        )
        return ParameterEstimate(
            p=ev.inner.p_star, phi=phi, loss=ev.objective, iterations=0,
            convergence_flag=flag, loss_trace=(ev.objective,),
        )

    ev = outer_eval(problem, interpolants, phi, ridge, mode, refinement)
    trace = [ev.objective]
    radius = options.initial_radius
    flag = ConvergenceFlag.max_iter
    iterations = 0
    for iterations in range(1, options.max_iterations + 1):
        grad = ev.gradient
        projected = (phi - np.clip(phi - scale**2 * grad, lo, hi)) / scale
        if np.max(np.abs(projected)) <= options.gradient_tolerance:
            flag = ConvergenceFlag.converged
            iterations -= 1
            break
        hess_z = ev.hessian * np.outer(scale, scale)
        step = scale * _trust_region_step(scale * grad, hess_z, radius)
        trial = np.clip(phi + step, lo, hi)
        s = trial - phi
        pred = -(grad @ s + 0.5 * s @ ev.hessian @ s)
        if pred <= 0:
            # clipped model step points uphill; scaled steepest descent
            gnorm = np.linalg.norm(scale * grad)
            trial = np.clip(phi - (radius / gnorm) * scale**2 * grad, lo, hi)
            s = trial - phi
            pred = -(grad @ s + 0.5 * s @ ev.hessian @ s)
        if np.max(np.abs(s)) == 0.0:
            radius *= options.contract
            if radius < options.min_radius * (1.0 + np.linalg.norm(phi / scale)):
                flag = ConvergenceFlag.line_search_failure
                break
            continue
        ev_trial = outer_eval(problem, interpolants, trial, ridge, mode, refinement)
        actual = ev.objective - ev_trial.objective
        rho = actual / pred if pred > 0 else (1.0 if actual > 0 else -1.0)
        if actual > 0 and rho > 1e-4:
            phi = trial
            ev = ev_trial
            trace.append(ev.objective)
            if rho > 0.75 and np.linalg.norm(s / scale) >= 0.8 * radius:
                radius *= options.expand
        else:
            radius *= options.contract
            if radius < options.min_radius * (1.0 + np.linalg.norm(phi / scale)):
                flag = ConvergenceFlag.line_search_failure
                break
    if flag is ConvergenceFlag.converged and ev.inner.active_set.any():
        flag = ConvergenceFlag.regularity_warning
    return ParameterEstimate(
        p=ev.inner.p_star,
        phi=phi,
        loss=ev.objective,
        iterations=iterations,
        convergence_flag=flag,
        loss_trace=tuple(trace),
    )
