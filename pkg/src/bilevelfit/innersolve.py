"""Exact solver for the inner convex problem.

min_p 0.5*||A p - b||^2 + 0.5*ridge*||p||^2
subject to G p = c and H p <= d.

Equality-only instances are one saddle-point solve; inequalities are
handled by a primal active-set iteration so the returned triple
(p*, lambda*, mu*) satisfies the KKT conditions exactly (up to linear
algebra roundoff) and the final factorizations can be reused by the
implicit-differentiation step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import linprog

from .design import IntegratedDesign
from .problem import ConstraintSet

__all__ = ["InnerSolution", "solve_inner"]

_MU_TOL = 1e-10  # multipliers below this count as zero


@dataclass
class InnerSolution:
    """KKT triple of the inner problem plus reusable factorizations.

    factor_Lpp factors A^T A + ridge*I; factor_schur factors
    Gt L^{-1} Gt^T where Gt stacks the equalities and the active
    inequalities (strict complementarity).  kkt_jvp consumes both.
    """

    p_star: np.ndarray
    lambda_star: np.ndarray
    mu_star: np.ndarray
    active_set: np.ndarray
    objective_value: float
    factor_Lpp: tuple
    factor_schur: tuple | None
    phi_snapshot: np.ndarray
    ridge: float
    residual: np.ndarray
    m_eq: int
    fold_matrix: np.ndarray  # Gt = [G; H_active], (m_eq + n_active, n_linear)
    fold_solve: np.ndarray   # L^{-1} Gt^T, cached back-substitutions
    fold_ineq_indices: np.ndarray  # inequality rows folded into Gt, in row order

    def solve_reduced(self, v1: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve [L Gt^T; Gt 0] [w1; w] = [v1; t] via the Schur path."""
        y = cho_solve(self.factor_Lpp, v1)
        if self.fold_matrix.shape[0] == 0:
            return y, np.zeros((0,) + v1.shape[1:])
        w = cho_solve(self.factor_schur, self.fold_matrix @ y - t)
        w1 = y - self.fold_solve @ w
        return w1, w

    def kkt_residual(self, design: IntegratedDesign, constraints: ConstraintSet) -> float:
        """Norm of the stationarity/feasibility/slackness residuals."""
        g = design.A.T @ self.residual + self.ridge * self.p_star
        if constraints.m_eq:
            g = g + constraints.eq_matrix.T @ self.lambda_star
        if constraints.m_ineq:
            g = g + constraints.ineq_matrix.T @ self.mu_star
        parts = [g]
        if constraints.m_eq:
            parts.append(constraints.eq_matrix @ self.p_star - constraints.eq_rhs)
        if constraints.m_ineq:
            slack = constraints.ineq_matrix @ self.p_star - constraints.ineq_rhs
            parts.append(np.maximum(slack, 0.0))
            parts.append(self.mu_star * slack)
        return float(np.linalg.norm(np.concatenate(parts)))


def _feasible_start(constraints: ConstraintSet) -> np.ndarray:
    n = constraints.n_linear
    gmat, c = constraints.eq_matrix, constraints.eq_rhs
    hmat, d = constraints.ineq_matrix, constraints.ineq_rhs
    if gmat.shape[0] == 0 and np.all(d >= 0):
        return np.zeros(n)
    res = linprog(
        c=np.zeros(n),
        A_ub=hmat if hmat.shape[0] else None,
        b_ub=d if hmat.shape[0] else None,
        A_eq=gmat if gmat.shape[0] else None,
        b_eq=c if gmat.shape[0] else None,
        bounds=[(None, None)] * n,
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"infeasible constraint set: {res.message}")
    return res.x


def _eqp_solve(factor_n, atb, gt, rhs):
    """Minimize the quadratic subject to gt p = rhs; returns (p, multipliers)."""
    y = cho_solve(factor_n, atb)
    if gt.shape[0] == 0:
        return y, np.zeros(0), None, None
    k = cho_solve(factor_n, gt.T)
    s = gt @ k
    try:
        factor_s = cho_factor(s)
        lam = cho_solve(factor_s, gt @ y - rhs)
    except LinAlgError:
        # working set momentarily dependent; least-squares multipliers
        factor_s = None
        lam = np.linalg.lstsq(s, gt @ y - rhs, rcond=None)[0]
    return y - k @ lam, lam, factor_s, k


def solve_inner(design: IntegratedDesign, constraints: ConstraintSet, ridge: float = 0.0) -> InnerSolution:
    """Solve the inner problem exactly and cache factors for derivatives.

    Raises on an infeasible constraint set or a numerically singular
    reduced system (rank-deficient A with zero ridge).
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    a_mat, b = design.A, design.b
    n = a_mat.shape[1]
    if constraints.n_linear != n:
        raise ValueError("constraints sized for a different n_linear")
    normal = a_mat.T @ a_mat
    if ridge:
        normal[np.diag_indices_from(normal)] += ridge
    atb = a_mat.T @ b
    try:
        factor_n = cho_factor(normal)
    except LinAlgError as exc:
        cond = np.linalg.cond(normal)
        raise RuntimeError(
            f"singular reduced system (condition estimate {cond:.2e}); "
            "increase ridge or remove dependent basis columns"
        ) from exc

    gmat, c = constraints.eq_matrix, constraints.eq_rhs
    hmat, d = constraints.ineq_matrix, constraints.ineq_rhs
    m_eq, m_ineq = gmat.shape[0], hmat.shape[0]

    if m_ineq == 0:
        p, lam, factor_s, k = _eqp_solve(factor_n, atb, gmat, c)
        if m_eq and factor_s is None:
            raise RuntimeError("singular Schur complement on equality block")
        active = np.zeros(0, dtype=bool)
        gt, gt_solve = gmat, (k if k is not None else np.zeros((n, 0)))
        lam_eq, mu_full = lam, np.zeros(0)
        strict = []
    else:
        p = _feasible_start(constraints)
        slack0 = d - hmat @ p
        work = list(np.flatnonzero(slack0 <= 1e-9 * (1.0 + np.abs(d))))
        lam = np.zeros(m_eq + len(work))
        factor_s = None
        k = None
        max_iter = 50 + 5 * m_ineq
        for _ in range(max_iter):
            gt = np.vstack([gmat, hmat[work]]) if (m_eq or work) else np.zeros((0, n))
            rhs = np.concatenate([c, d[work]])
            p_eq, lam, factor_s, k = _eqp_solve(factor_n, atb, gt, rhs)
            q = p_eq - p
            if np.max(np.abs(q), initial=0.0) <= 1e-12 * (1.0 + np.max(np.abs(p_eq), initial=0.0)):
                p = p_eq
                mu_work = lam[m_eq:]
                if mu_work.size == 0 or np.min(mu_work) >= -_MU_TOL:
                    break
                drop = int(np.argmin(mu_work))
                work.pop(drop)
            else:
                alpha = 1.0
                blocker = -1
                inactive = [i for i in range(m_ineq) if i not in work]
                for i in inactive:
                    hq = hmat[i] @ q
                    if hq > 1e-13:
                        ai = (d[i] - hmat[i] @ p) / hq
                        if ai < alpha:
                            alpha, blocker = ai, i
                p = p + max(alpha, 0.0) * q
                if blocker >= 0:
                    work.append(blocker)
        else:
            raise RuntimeError("active-set iteration limit reached")
        mu_full = np.zeros(m_ineq)
        if work:
            mu_full[work] = np.maximum(lam[m_eq:], 0.0)
        lam_eq = lam[:m_eq]
        slack = d - hmat @ p
        active = slack <= 1e-9 * (1.0 + np.abs(d))
        # refresh the fold to strict-complementarity active rows only
        strict = [i for i in work if mu_full[i] > _MU_TOL]
        dropped = [i for i in work if mu_full[i] <= _MU_TOL]
        if dropped:
            warnings.warn(
                "weakly active inequality constraints; derivative regularity is not guaranteed",
                RuntimeWarning,
            )
        gt = np.vstack([gmat, hmat[strict]]) if (m_eq or strict) else np.zeros((0, n))
        if gt.shape[0]:
            k = cho_solve(factor_n, gt.T)
            try:
                factor_s = cho_factor(gt @ k)
            except LinAlgError:
                # dependent active rows (duplicated or redundant constraints
                # meeting at the solution); fold a maximal independent subset
                fold, kept = gmat, []
                for i in strict:
                    cand = np.vstack([fold, hmat[[i]]])
                    if np.linalg.matrix_rank(cand) == cand.shape[0]:
                        fold, kept = cand, kept + [i]
                warnings.warn(
                    "dependent active inequality rows; derivatives use a "
                    "maximal independent subset",
                    RuntimeWarning,
                )
                strict, gt = kept, fold
                if gt.shape[0]:
                    k = cho_solve(factor_n, gt.T)
                    factor_s = cho_factor(gt @ k)
                else:
                    factor_s, k = None, np.zeros((n, 0))
        else:
            factor_s, k = None, np.zeros((n, 0))
        gt_solve = k

    r = a_mat @ p - b
    obj = 0.5 * float(r @ r) + 0.5 * ridge * float(p @ p)
    return InnerSolution(
        p_star=p,
        lambda_star=lam_eq if m_eq else np.zeros(0),
        mu_star=mu_full if m_ineq else np.zeros(0),
        active_set=active,
        objective_value=obj,
        factor_Lpp=factor_n,
        factor_schur=factor_s,
        phi_snapshot=np.asarray(design.phi_snapshot, dtype=float).copy(),
        ridge=float(ridge),
        residual=r,
        m_eq=m_eq,
        fold_matrix=gt if (m_eq or m_ineq) else np.zeros((0, n)),
        fold_solve=gt_solve if (m_eq or m_ineq) else np.zeros((n, 0)),
        fold_ineq_indices=np.asarray(strict, dtype=int),
    )
