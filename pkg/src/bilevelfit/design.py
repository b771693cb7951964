"""Integrated design matrices A(phi) and their phi-derivatives.

Column j of A stacks the running integrals of basis field j, evaluated
on the measurement interpolants, over all states, sample instants, and
experiments; b stacks the matching increments X(t_k) - X(t_0).  The
t = t_0 rows are identically zero and are dropped.

DesignBuilder keeps the per-experiment node evaluations and the shared
scalar-integral cache so that a design and a sweep of directional
derivatives at the same phi never re-integrate a basis feature twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fields import EvalContext, SeparableField
from .interpolate import InterpolantSet, QuadratureGrid, build_grid, cumulative_quadrature
from .problem import Problem

__all__ = ["IntegratedDesign", "DesignDerivative", "DesignBuilder", "assemble_design", "design_jvp"]


@dataclass(frozen=True)
class IntegratedDesign:
    """A, b of the inner least-squares problem and the phi they belong to."""

    A: np.ndarray
    b: np.ndarray
    phi_snapshot: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def n_linear(self) -> int:
        return self.A.shape[1]


class DesignDerivative:
    """Directional derivative dA_v, stored column-sparse.

    Only columns of basis fields that depend on the perturbed phi
    entries are present; all others are identically zero.  db_v is zero
    because b is data-only.
    """

    def __init__(self, shape: tuple[int, int], cols: dict[int, np.ndarray]):
        self.shape = shape
        self.cols = cols

    @property
    def db_v(self) -> np.ndarray:
        return np.zeros(self.shape[0])

    def matvec(self, p: np.ndarray) -> np.ndarray:
        """dA_v @ p without densifying."""
        out = np.zeros(self.shape[0])
        for j, col in self.cols.items():
            pj = p[j]
            if pj != 0.0:
                out += col * pj
        return out

    def rmatvec(self, r: np.ndarray) -> np.ndarray:
        """dA_v.T @ r without densifying."""
        out = np.zeros(self.shape[1])
        for j, col in self.cols.items():
            out[j] = col @ r
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for j, col in self.cols.items():
            out[:, j] = col
        return out


class _ExperimentWorkspace:
    """Node evaluations and integral cache for one experiment at fixed phi."""

    def __init__(
        self,
        problem: Problem,
        interp: InterpolantSet,
        phi: np.ndarray,
        exp_index: int,
        refinement: int = 1,
    ):
        traj = problem.trajectories[exp_index]
        model = problem.model
        self.exp_index = exp_index
        self.grid: QuadratureGrid = build_grid(traj.times, refinement)
        nodes = self.grid.nodes
        x = np.empty((nodes.size, model.n_states))
        for s in range(model.n_states):
            x[:, s] = interp.values(s, nodes, 0)
        xdel = None
        xdel_dot = None
        if model.delays:
            nd = len(model.delays)
            xdel = np.empty((nd, nodes.size, model.n_states))
            xdel_dot = np.empty_like(xdel)
            for slot, tau_index in enumerate(model.delays):
                shifted = nodes - phi[tau_index]
                for s in range(model.n_states):
                    xdel[slot, :, s] = interp.values(s, shifted, 0)
                    xdel_dot[slot, :, s] = interp.values(s, shifted, 1)
        self.ctx = EvalContext(x=x, phi=phi, exogenous=traj.exogenous, xdel=xdel, xdel_dot=xdel_dot)
        # b rows for this experiment: state increments, time-major
        self.b = (traj.states[:, 1:] - traj.states[:, [0]]).T.ravel()
        self.n_rows = self.b.size
        self._scalar_cache: dict = {}

    def scalar_integral(self, basis: SeparableField) -> np.ndarray:
        key = basis.scalar_key
        if key is not None and key in self._scalar_cache:
            return self._scalar_cache[key]
        cq = cumulative_quadrature(basis.scalar(self.ctx), self.grid)
        if key is not None:
            self._scalar_cache[key] = cq
        return cq


class DesignBuilder:
    """Assembles A(phi) and directional derivatives dA_v at one phi."""

    def __init__(
        self,
        problem: Problem,
        interpolants: Sequence[InterpolantSet],
        phi: np.ndarray,
        refinement: int = 1,
    ):
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (problem.n_nonlinear,):
            raise ValueError(
                f"phi has shape {phi.shape}, model expects ({problem.n_nonlinear},)"
            )
        if len(interpolants) != len(problem.trajectories):
            raise ValueError("one InterpolantSet per trajectory required")
        self.problem = problem
        self.phi = phi.copy()
        self.refinement = int(refinement)
        self.workspaces = [
            _ExperimentWorkspace(problem, interp, self.phi, e, self.refinement)
            for e, interp in enumerate(interpolants)
        ]
        self.row_offsets = np.concatenate(
            [[0], np.cumsum([w.n_rows for w in self.workspaces])]
        ).astype(int)
        self.n_rows = int(self.row_offsets[-1])

    def _column_block(self, ws: _ExperimentWorkspace, j: int) -> np.ndarray:
        basis = self.problem.model.basis[j]
        try:
            if isinstance(basis, SeparableField):
                cq = ws.scalar_integral(basis)
                w = basis.weights(self.phi, ws.ctx.exogenous)
                return (cq[1:, None] * w[None, :]).ravel()
            cq = cumulative_quadrature(basis.value(ws.ctx), ws.grid)
            return cq[1:].ravel()
        except ValueError as exc:
            raise ValueError(f"basis {j}, experiment {ws.exp_index}: {exc}") from exc

    def design(self) -> IntegratedDesign:
        n_linear = self.problem.n_linear
        A = np.empty((self.n_rows, n_linear))
        b = np.empty(self.n_rows)
        for ws, r0, r1 in zip(self.workspaces, self.row_offsets, self.row_offsets[1:]):
            b[r0:r1] = ws.b
            for j in range(n_linear):
                A[r0:r1, j] = self._column_block(ws, j)
        return IntegratedDesign(A=A, b=b, phi_snapshot=self.phi.copy())

    def jvp(self, v: np.ndarray) -> DesignDerivative:
        """Directional derivative of A along v in phi-space.

        Delay directions differentiate through the shifted interpolant
        arguments (the fields own that chain rule via ctx.xdel_dot);
        everything else flows through the fields' dphi_v.
        """
        v = np.asarray(v, dtype=float)
        if v.shape != self.phi.shape:
            raise ValueError("direction v must match phi shape")
        cols: dict[int, np.ndarray] = {}
        model = self.problem.model
        for j, basis in enumerate(model.basis):
            deps = basis.phi_deps
            if not deps or all(v[i] == 0.0 for i in deps):
                continue
            col = np.zeros(self.n_rows)
            nonzero = False
            for ws, r0, r1 in zip(self.workspaces, self.row_offsets, self.row_offsets[1:]):
                if isinstance(basis, SeparableField):
                    block = None
                    ds = basis.dscalar_v(ws.ctx, v)
                    if ds is not None:
                        cq = cumulative_quadrature(ds, ws.grid)
                        w = basis.weights(self.phi, ws.ctx.exogenous)
                        block = cq[1:, None] * w[None, :]
                    dw = basis.dweights_v(self.phi, ws.ctx.exogenous, v)
                    if dw is not None:
                        cq = ws.scalar_integral(basis)
                        term = cq[1:, None] * dw[None, :]
                        block = term if block is None else block + term
                else:
                    dv = basis.dphi_v(ws.ctx, v)
                    block = None if dv is None else cumulative_quadrature(dv, ws.grid)[1:]
                if block is not None:
                    col[r0:r1] = block.ravel()
                    nonzero = True
            if nonzero:
                cols[j] = col
        return DesignDerivative(shape=(self.n_rows, self.problem.n_linear), cols=cols)


def assemble_design(
    problem: Problem,
    interpolants: Sequence[InterpolantSet],
    phi: np.ndarray,
    refinement: int = 1,
) -> IntegratedDesign:
    """One-shot design assembly; use DesignBuilder when derivatives at the
    same phi follow."""
    return DesignBuilder(problem, interpolants, phi, refinement).design()


def design_jvp(
    problem: Problem,
    interpolants: Sequence[InterpolantSet],
    phi: np.ndarray,
    v: np.ndarray,
    refinement: int = 1,
) -> DesignDerivative:
    """One-shot directional design derivative at phi along v."""
    return DesignBuilder(problem, interpolants, phi, refinement).jvp(v)
