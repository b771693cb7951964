"""Per-state measurement interpolants and cumulative quadrature.

The estimation residual needs running integrals of basis features from
t_first to every sample instant.  We fit one cubic spline per state,
resample it on a midpoint-refined copy of the measurement grid, and do
composite Simpson with prefix sums so every target comes out of a
single pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .problem import Trajectory, ValidationError

__all__ = [
    "InterpolantSet",
    "fit_interpolants",
    "query",
    "QuadratureGrid",
    "build_grid",
    "cumulative_quadrature",
]


@dataclass(frozen=True)
class InterpolantSet:
    """Cubic splines, one per state, over [t_first, t_last].

    When history is present, queries at t < t_first return the constant
    history value (order 0) and zero (order 1).
    """

    splines: tuple[CubicSpline, ...]
    t_first: float
    t_last: float
    history: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return len(self.splines)

    def values(self, state_index: int, t: np.ndarray, order: int = 0) -> np.ndarray:
        """Vectorized query of one state at times t (may dip into history)."""
        if order not in (0, 1):
            raise ValueError(f"order must be 0 or 1, got {order}")
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t > self.t_last + 1e-12 * max(1.0, abs(self.t_last))):
            raise ValueError(f"query beyond t_last={self.t_last}")
        early = t < self.t_first
        if np.any(early) and self.history is None:
            raise ValueError(f"query below t_first={self.t_first} without history")
        out = self.splines[state_index](np.clip(t, self.t_first, self.t_last), nu=order)
        out = np.asarray(out, dtype=float)
        if np.any(early):
            out[early] = self.history[state_index] if order == 0 else 0.0
        return out


def fit_interpolants(traj: Trajectory) -> InterpolantSet:
    """Fit one not-a-knot cubic spline per state, node-exact by construction."""
    if traj.n_times < 4:
        raise ValidationError("too few samples: cubic interpolation needs at least 4")
    splines = tuple(
        CubicSpline(traj.times, traj.states[s], bc_type="not-a-knot")
        for s in range(traj.n_states)
    )
    return InterpolantSet(
        splines=splines,
        t_first=float(traj.times[0]),
        t_last=float(traj.times[-1]),
        history=None if traj.history is None else traj.history.copy(),
    )


def query(interp: InterpolantSet, state_index: int, t: float, order: int = 0) -> float:
    """Scalar evaluation of state `state_index` at time t.

    order 0 is the value, order 1 the time derivative; inside a declared
    history region the value is the history constant and the derivative 0.
    """
    return float(interp.values(state_index, np.array([t]), order)[0])


@dataclass(frozen=True)
class QuadratureGrid:
    """Simpson panels between consecutive measurement instants.

    With refinement 1, nodes interleaves the measurement times with
    panel midpoints, so nodes[2k] = times[k].  Larger refinement splits
    each measurement interval into that many Simpson sub-panels, which
    matters when the interpolant carries structure finer than the
    measurement spacing.  Cumulative integrals are always reported at
    the measurement instants, starting from 0 at times[0].
    """

    times: np.ndarray
    nodes: np.ndarray
    refinement: int = 1

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_nodes(self) -> int:
        return self.nodes.size


def build_grid(times: np.ndarray, refinement: int = 1) -> QuadratureGrid:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("need at least two measurement instants")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    r = int(refinement)
    if r < 1:
        raise ValueError("refinement must be a positive integer")
    n_int = times.size - 1
    # sub-panel edges at times[k] + h*i/r, Simpson midpoints halfway between
    frac = np.arange(1, r + 1) / r
    edges = times[:-1, None] + np.diff(times)[:, None] * frac[None, :]
    mids = edges - np.diff(times)[:, None] / (2 * r)
    nodes = np.empty(1 + 2 * r * n_int)
    nodes[0] = times[0]
    inter = np.stack([mids, edges], axis=2).reshape(n_int, 2 * r)
    nodes[1:] = inter.ravel()
    return QuadratureGrid(times=times, nodes=nodes, refinement=r)


def cumulative_quadrature(integrand, grid: QuadratureGrid) -> np.ndarray:
    """Running Simpson integral of `integrand` at every measurement instant.

    integrand is either a callable evaluated at grid.nodes or an array of
    precomputed node values with leading dimension grid.n_nodes.  The
    result has shape (n_times,) for scalar integrands, else
    (n_times, ...) matching the trailing dimensions; row 0 is zero.
    Exact for polynomials up to degree 3 on each panel.
    """
    if callable(integrand):
        vals = np.asarray(integrand(grid.nodes), dtype=float)
    else:
        vals = np.asarray(integrand, dtype=float)
    if vals.shape[0] != grid.n_nodes:
        raise ValueError(
            f"integrand values have leading dimension {vals.shape[0]}, expected {grid.n_nodes} nodes"
        )
    bad = ~np.isfinite(vals)
    if np.any(bad):
        node = int(np.argwhere(bad)[0][0])
        raise ValueError(f"non-finite integrand value at node {node} (t={grid.nodes[node]})")
    r = grid.refinement
    h = np.repeat(np.diff(grid.times), r) / r
    f0 = vals[0:-1:2]
    fm = vals[1::2]
    f1 = vals[2::2]
    shape = (h.size,) + (1,) * (vals.ndim - 1)
    panels = (h.reshape(shape) / 6.0) * (f0 + 4.0 * fm + f1)
    if r > 1:
        panels = panels.reshape((grid.n_times - 1, r) + vals.shape[1:]).sum(axis=1)
    out = np.zeros((grid.n_times,) + vals.shape[1:])
    np.cumsum(panels, axis=0, out=out[1:])
    return out
