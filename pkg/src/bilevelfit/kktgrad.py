"""Forward-mode derivatives of the inner optimum via the KKT system.

Differentiating the stationarity, feasibility, and complementarity
conditions at (p*, lambda*, mu*) gives a linear system for the tangents
(w1, w2, w3) = (dp*, dlambda*, dmu*) applied to a direction v in
phi-space.  Active inequalities are folded into the equality block
(strict complementarity pins their slack derivative), inactive ones
decouple with w3 = 0, and the factorizations cached by solve_inner are
reused, so each direction costs two triangular solves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import DesignDerivative, IntegratedDesign
from .innersolve import InnerSolution

__all__ = ["KktJvpResult", "kkt_jvp", "kkt_jvp_batch"]


@dataclass(frozen=True)
class KktJvpResult:
    """Directional derivatives of the KKT triple along one direction."""

    w1: np.ndarray  # dp* . v
    w2: np.ndarray  # dlambda* . v
    w3: np.ndarray  # dmu* . v


def _check_fresh(sol: InnerSolution, design: IntegratedDesign) -> None:
    if sol.phi_snapshot.shape != np.shape(design.phi_snapshot) or not np.array_equal(
        sol.phi_snapshot, design.phi_snapshot
    ):
        raise ValueError("stale factorization: solution and design were built at different phi")


def _stationarity_rhs(sol: InnerSolution, design: IntegratedDesign, d_design: DesignDerivative) -> np.ndarray:
    """-L_p_phi v  =  -(dA_v^T r + A^T dA_v p*), r the fit residual."""
    return -(d_design.rmatvec(sol.residual) + design.A.T @ d_design.matvec(sol.p_star))


def kkt_jvp(
    sol: InnerSolution,
    design: IntegratedDesign,
    d_design: DesignDerivative,
    g_phi_v: np.ndarray | None = None,
    h_phi_v: np.ndarray | None = None,
) -> KktJvpResult:
    """Tangent of (p*, lambda*, mu*) for one phi-direction.

    g_phi_v and h_phi_v are the constraint derivatives contracted with
    the direction; they default to zero, which is exact for affine
    constraints that do not involve phi.
    """
    _check_fresh(sol, design)
    m_eq = sol.m_eq
    m_ineq = sol.mu_star.size
    v1 = _stationarity_rhs(sol, design, d_design)
    v2 = np.zeros(m_eq) if g_phi_v is None else -np.asarray(g_phi_v, dtype=float)
    if h_phi_v is None:
        v3 = np.zeros(m_ineq)
    else:
        v3 = -sol.mu_star * np.asarray(h_phi_v, dtype=float)
    fold_idx = sol.fold_ineq_indices
    t = np.concatenate([v2, v3[fold_idx] / sol.mu_star[fold_idx]]) if (m_eq or fold_idx.size) else np.zeros(0)
    w1, w_fold = sol.solve_reduced(v1, t)
    w2 = w_fold[:m_eq]
    w3 = np.zeros(m_ineq)
    if fold_idx.size:
        w3[fold_idx] = w_fold[m_eq:]
    return KktJvpResult(w1=w1, w2=w2, w3=w3)


def kkt_jvp_batch(
    sol: InnerSolution,
    design: IntegratedDesign,
    d_designs: Sequence[DesignDerivative],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Tangents for many directions sharing one factorization.

    Returns (W1, W2, W3, dAp) with one column per direction; dAp stacks
    dA_v p* so callers can reuse it (outer-gradient inner products and
    the Gauss-Newton curvature term need exactly these vectors).
    phi-dependent constraint terms are not supported here; use kkt_jvp
    per direction for that.
    """
    _check_fresh(sol, design)
    n_dir = len(d_designs)
    n_rows, n_lin = design.A.shape
    m_eq = sol.m_eq
    m_ineq = sol.mu_star.size
    dap = np.zeros((n_rows, n_dir))
    rhs = np.zeros((n_lin, n_dir))
    for idx, dd in enumerate(d_designs):
        dap[:, idx] = dd.matvec(sol.p_star)
        rhs[:, idx] = dd.rmatvec(sol.residual)
    v1 = -(rhs + design.A.T @ dap)
    m_fold = sol.fold_matrix.shape[0]
    w1, w_fold = sol.solve_reduced(v1, np.zeros((m_fold, n_dir)))
    w2 = w_fold[:m_eq] if m_eq else np.zeros((0, n_dir))
    w3 = np.zeros((m_ineq, n_dir))
    fold_idx = sol.fold_ineq_indices
    if fold_idx.size:
        w3[fold_idx] = w_fold[m_eq:]
    return w1, w2, w3, dap
