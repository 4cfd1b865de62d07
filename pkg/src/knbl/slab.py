"""Truncated slab transport solver.

Solves v3 df/dx + (eps + p L) f = g on (0, d) with diffuse reflection at
x = 0 and specular reflection (or an explicit inflow override) at x = d, by
exact integrating-factor characteristic sweeps inside a source iteration on
the gain matrix.

The sweep treats the right-hand side as constant per x-cell, so it is exact
for constant-in-x transport solutions and unconditionally stable (no CFL
restriction).  Inside the source iteration the gain term is fed the iterate's
exact in-cell averages; at the fixed point this makes the five flux moments
exactly constant in x for compatible sources.  The inhomogeneous source g is
frozen at the upwind edge, which keeps the scheme first-order accurate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .collision import LinearizedOperator, SolverFailure
from .gaussian import MaxwellianContext, WeightSpec, weight
from .report import SolveReport


@dataclass(frozen=True)
class SlabGrid:
    x_nodes: np.ndarray

    def __post_init__(self):
        x = self.x_nodes
        if x[0] != 0.0 or np.any(np.diff(x) <= 0):
            raise ValueError("x_nodes must increase strictly from 0")

    @staticmethod
    def uniform(d: float, n_x: int) -> "SlabGrid":
        if not (d > 0) or n_x < 2:
            raise ValueError("need d > 0 and n_x >= 2")
        return SlabGrid(np.linspace(0.0, float(d), n_x + 1))

    @property
    def d(self) -> float:
        return float(self.x_nodes[-1])

    @property
    def n_x(self) -> int:
        return len(self.x_nodes) - 1

    @property
    def dx(self) -> np.ndarray:
        return np.diff(self.x_nodes)


@dataclass
class SlabField:
    """Distribution values on the space x velocity lattice.

    ``values`` lives on cell edges; ``cell_avgs`` carries the exact in-cell
    averages of the sweep profile when the field came out of a solve (used by
    the residual and by the conservative gain coupling).
    """

    values: np.ndarray                      # (n_x+1, N)
    cell_avgs: Optional[np.ndarray] = None  # (n_x, N)

    def copy(self) -> "SlabField":
        return SlabField(self.values.copy(),
                         None if self.cell_avgs is None else self.cell_avgs.copy())

    def wall_incoming(self, ctx: MaxwellianContext) -> np.ndarray:
        """Trace at x=0 on {v3 > 0}."""
        return self.values[0, ctx.incoming]

    def wall_outgoing(self, ctx: MaxwellianContext) -> np.ndarray:
        """Trace at x=0 on {v3 < 0}."""
        return self.values[0, ctx.outgoing]


@dataclass
class LinearSlabProblem:
    """Data of one linear slab boundary-value problem.

    ``r`` and ``extra_incoming`` are read on {v3 > 0} only;
    ``far_inflow_override``, when given, replaces the specular closure at
    x = d and is read on {v3 < 0}.
    """

    g: np.ndarray
    r: np.ndarray
    extra_incoming: Optional[np.ndarray] = None
    far_inflow_override: Optional[np.ndarray] = None
    epsilon: float = 0.0
    p_E0: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (self.p_E0 > 0):
            raise ValueError(f"p_E0 must be positive, got {self.p_E0}")


class _SweepWork:
    """Per-(slab, operator, problem-constants) factors reused across sweeps."""

    def __init__(self, ctx: MaxwellianContext, slab: SlabGrid,
                 op: LinearizedOperator, epsilon: float, p_E0: float):
        self.ctx = ctx
        self.slab = slab
        self.pos = ctx.incoming        # v3 > 0
        self.neg = ctx.outgoing        # v3 < 0
        v3 = ctx.grid.nodes[:, 2]
        self.a = epsilon + p_E0 * op.nu
        dx = slab.dx[:, None]
        for mask, name in ((self.pos, "p"), (self.neg, "n")):
            tau = self.a[mask] * dx / np.abs(v3[mask])
            E = np.exp(-tau)
            one_mE = -np.expm1(-tau)
            setattr(self, "tau_" + name, tau)
            setattr(self, "E_" + name, E)
            setattr(self, "one_mE_" + name, one_mE)
        self.spec_of_neg = ctx.grid.specular[self.neg]

    def run(self, q_pos: np.ndarray, q_neg: np.ndarray,
            inflow0: np.ndarray, inflow_d: Optional[np.ndarray]):
        """March characteristics; q_* are per-cell constants on each half-grid."""
        n_x = self.slab.n_x
        N = len(self.a)
        values = np.empty((n_x + 1, N))
        avgs = np.empty((n_x, N))
        pos, neg = self.pos, self.neg
        ap, an = self.a[pos], self.a[neg]
        # upward half: inflow at x = 0
        f = inflow0[pos]
        values[0, pos] = f
        for m in range(n_x):
            qa = q_pos[m] / ap
            fnew = self.E_p[m] * f + self.one_mE_p[m] * qa
            avgs[m, pos] = qa + (f - qa) * self.one_mE_p[m] / self.tau_p[m]
            values[m + 1, pos] = fnew
            f = fnew
        # downward half: specular image of the fresh upward trace, or override
        if inflow_d is None:
            f = values[n_x, self.spec_of_neg]
        else:
            f = inflow_d[neg]
        values[n_x, neg] = f
        for m in range(n_x - 1, -1, -1):
            qa = q_neg[m] / an
            fnew = self.E_n[m] * f + self.one_mE_n[m] * qa
            avgs[m, neg] = qa + (f - qa) * self.one_mE_n[m] / self.tau_n[m]
            values[m, neg] = fnew
            f = fnew
        return values, avgs


def sweep(ctx: MaxwellianContext, slab: SlabGrid, op: LinearizedOperator,
          problem: LinearSlabProblem, rhs: SlabField,
          inflow_at_0: np.ndarray,
          inflow_at_d: Optional[np.ndarray] = None) -> SlabField:
    """Single characteristic sweep with the whole rhs frozen at upwind edges."""
    work = _SweepWork(ctx, slab, op, problem.epsilon, problem.p_E0)
    q_pos = rhs.values[:-1, work.pos]
    q_neg = rhs.values[1:, work.neg]
    values, avgs = work.run(q_pos, q_neg, inflow_at_0, inflow_at_d)
    return SlabField(values, avgs)


def _defect(work: _SweepWork, field: SlabField, q_pos, q_neg):
    """Mismatch of the per-cell update relations; zero at a converged solve."""
    v = field.values
    pos, neg = work.pos, work.neg
    dpos = (work.a[pos] * (v[1:, pos] - work.E_p * v[:-1, pos]) / work.one_mE_p
            - q_pos)
    dneg = (work.a[neg] * (v[:-1, neg] - work.E_n * v[1:, neg]) / work.one_mE_n
            - q_neg)
    out = np.empty((work.slab.n_x, len(work.a)))
    out[:, pos] = dpos
    out[:, neg] = dneg
    return out


def _boundary_defects(ctx, problem, values, w_v):
    inc = ctx.incoming
    target = ctx.pgamma(values[0, ctx.outgoing]) + problem.r
    if problem.extra_incoming is not None:
        target = target + problem.extra_incoming
    bc = np.abs(values[0, inc] - target[inc]) * w_v[inc]
    if problem.far_inflow_override is None:
        spec = np.abs(values[-1, ctx.outgoing]
                      - values[-1, ctx.grid.specular[ctx.outgoing]])
        spec = (spec * w_v[ctx.outgoing]).max()
    else:
        spec = 0.0
    return float(bc.max()), float(spec)


def solve_linear_slab(ctx: MaxwellianContext, slab: SlabGrid,
                      op: LinearizedOperator, problem: LinearSlabProblem,
                      tol: float = 1e-9, max_iter: int = 500,
                      weight_spec: Optional[WeightSpec] = None,
                      initial: Optional[SlabField] = None,
                      stabilize: Optional[bool] = None,
                      accelerate: bool = True,
                      anderson_depth: int = 5):
    """Source iteration for the linear slab problem.

    Each pass sweeps the transport-plus-loss part exactly and lags the gain
    term and the diffuse re-emission one iteration behind.  Stops when the
    weighted sup norm of the plain-map iterate difference (the fixed-point
    residual) falls below ``tol``.

    At physical optical depths the plain iteration contracts slowly on the
    near-conserved hydrodynamic modes, so by default the update is Anderson-
    mixed over a short memory; the fixed point is unchanged and
    ``accelerate=False`` recovers the plain iteration.

    With the specular closure the discrete problem has an exact neutral mode
    proportional to sqrt(mu); unless ``stabilize=False`` it is removed every
    iteration by subtracting the wall-flux multiple of sqrt(2 pi mu), which
    leaves the gamma-mass-free solution (the quantity every downstream
    consumer uses) untouched.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if stabilize is None:
        stabilize = problem.far_inflow_override is None
    wspec = weight_spec or WeightSpec()
    w_v = weight(ctx.grid.nodes, wspec)
    work = _SweepWork(ctx, slab, op, problem.epsilon, problem.p_E0)
    pos, neg = work.pos, work.neg
    n_x, N = slab.n_x, ctx.grid.n_nodes
    g = problem.g
    extra = problem.extra_incoming
    if initial is not None:
        values = initial.values.copy()
        avgs = (initial.cell_avgs.copy() if initial.cell_avgs is not None
                else 0.5 * (values[:-1] + values[1:]))
    else:
        values = np.zeros((n_x + 1, N))
        avgs = np.zeros((n_x, N))

    def apply_map(vals, avg):
        gain = problem.p_E0 * (avg @ op.K.T)
        q_p = gain[:, pos] + g[:-1, pos]
        q_n = gain[:, neg] + g[1:, neg]
        inflow0 = ctx.pgamma(vals[0, ctx.outgoing]) + problem.r
        if extra is not None:
            inflow0 = inflow0 + extra
        nv, na = work.run(q_p, q_n, inflow0, problem.far_inflow_override)
        if stabilize:
            z = ctx.z_gamma(nv[0, ctx.outgoing])
            nv -= z * ctx.pgamma_shape
            na -= z * ctx.pgamma_shape
        return nv, na, q_p, q_n

    nvals = values.size
    history = []
    converged = False
    it = 0
    mem_x, mem_g = [], []
    prev_diff = np.inf
    grow_streak = 0
    for it in range(1, max_iter + 1):
        new_values, new_avgs, q_p, q_n = apply_map(values, avgs)
        # fixed-point residual of the incoming iterate (the plain difference)
        d = _defect(work, SlabField(values, avgs), q_p, q_n)
        history.append(float(np.abs(d * w_v).max()))
        diff = float(np.abs((new_values - values) * w_v).max())
        if np.isnan(diff):
            raise SolverFailure("source iteration produced NaN")
        if diff < tol:
            values, avgs = new_values, new_avgs
            converged = True
            break
        if accelerate:
            x = np.concatenate([values.ravel(), avgs.ravel()])
            gx = np.concatenate([new_values.ravel(), new_avgs.ravel()])
            mem_x.append(x)
            mem_g.append(gx)
            if len(mem_x) > anderson_depth + 1:
                mem_x.pop(0)
                mem_g.pop(0)
            grow_streak = grow_streak + 1 if diff > prev_diff else 0
            if grow_streak >= 2:
                mem_x, mem_g = [x], [gx]   # reset a stalled memory
                grow_streak = 0
            if len(mem_x) >= 2:
                F = np.stack([gg - xx for gg, xx in zip(mem_g, mem_x)], axis=1)
                dF = np.diff(F, axis=1)
                gamma, *_ = np.linalg.lstsq(dF, F[:, -1], rcond=None)
                G = np.stack(mem_g, axis=1)
                xn = G[:, -1] - np.diff(G, axis=1) @ gamma
                if np.all(np.isfinite(xn)):
                    values = xn[:nvals].reshape(values.shape)
                    avgs = xn[nvals:].reshape(avgs.shape)
                else:
                    values, avgs = new_values, new_avgs
            else:
                values, avgs = new_values, new_avgs
        else:
            values, avgs = new_values, new_avgs
        prev_diff = diff
    # closing residual against the final iterate's own rhs
    gain = problem.p_E0 * (avgs @ op.K.T)
    d = _defect(work, SlabField(values, avgs),
                gain[:, pos] + g[:-1, pos], gain[:, neg] + g[1:, neg])
    history.append(float(np.abs(d * w_v).max()))
    field = SlabField(values, avgs)
    bc_defect, spec_defect = _boundary_defects(ctx, problem, values, w_v)
    report = SolveReport(
        converged=converged,
        iterations=it,
        residual_history=np.asarray(history),
        extras={
            "bc_defect": bc_defect,
            "specular_defect": spec_defect,
            "min_abs_v3": ctx.grid.min_abs_v3,
            "stabilized": bool(stabilize),
        },
    )
    return field, report


def residual_norms(ctx: MaxwellianContext, slab: SlabGrid,
                   op: LinearizedOperator, problem: LinearSlabProblem,
                   field: SlabField,
                   weight_spec: Optional[WeightSpec] = None):
    """Discrete-equation defect of a field plus its per-x flux moments.

    Returns ``(sup_defect, weighted_sup_defect, flux_profile)`` where
    ``flux_profile[k]`` is the per-edge moment of v3 against the k-th raw
    invariant.
    """
    wspec = weight_spec or WeightSpec()
    w_v = weight(ctx.grid.nodes, wspec)
    work = _SweepWork(ctx, slab, op, problem.epsilon, problem.p_E0)
    avgs = (field.cell_avgs if field.cell_avgs is not None
            else 0.5 * (field.values[:-1] + field.values[1:]))
    gain = problem.p_E0 * (avgs @ op.K.T)
    d = _defect(work, field,
                gain[:, work.pos] + problem.g[:-1, work.pos],
                gain[:, work.neg] + problem.g[1:, work.neg])
    v3 = ctx.grid.nodes[:, 2]
    flux = (field.values * (ctx._w * v3)) @ ctx.raw_basis
    return float(np.abs(d).max()), float(np.abs(d * w_v).max()), flux
