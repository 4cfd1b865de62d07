"""Registered verification cases: manufactured solutions with known exact
fields, and generic compatible data for the far-field and nonlinear drivers."""

from __future__ import annotations

import numpy as np

from .collision import LinearizedOperator
from .gaussian import MaxwellianContext
from .slab import LinearSlabProblem, SlabField, SlabGrid, solve_linear_slab


class UnknownCaseError(KeyError):
    pass


def _smooth_micro_profile(ctx: MaxwellianContext, flavor: int = 0) -> np.ndarray:
    """A fixed smooth velocity profile with its hydrodynamic part removed."""
    V = ctx.grid.nodes
    env = np.exp(-ctx.v2 / 4.0)
    if flavor == 0:
        raw = (0.6 + 1.0 * V[:, 0] - 0.4 * V[:, 1] + 0.8 * V[:, 2]
               + 0.5 * V[:, 0] * V[:, 2]) * env
    else:
        raw = (0.3 - 0.7 * V[:, 1] + 0.2 * V[:, 2] ** 2
               + 0.4 * V[:, 1] * V[:, 2]) * env
    return raw - ctx.project(raw)


def flux_zeroed_incoming(ctx: MaxwellianContext, r0: np.ndarray) -> np.ndarray:
    """Remove the mass-flux component of incoming wall data (exactly)."""
    inc = ctx.incoming
    v3 = ctx.grid.nodes[:, 2]
    num = float(np.sum(ctx._w[inc] * v3[inc] * ctx.sqrt_mu[inc] * r0[inc]))
    den = float(np.sum(ctx._w[inc] * v3[inc] * ctx.mu[inc]))
    r = r0 - (num / den) * ctx.sqrt_mu
    return np.where(inc, r, 0.0)


def manufactured_exact_field(ctx: MaxwellianContext, slab: SlabGrid,
                             decay: float = 1.0, flavor: int = 0) -> SlabField:
    psi = _smooth_micro_profile(ctx, flavor)
    prof = np.exp(-decay * slab.x_nodes)
    return SlabField(prof[:, None] * psi)


def manufactured_case(name: str, ctx: MaxwellianContext, slab: SlabGrid,
                      op: LinearizedOperator, *, p_E0: float = 1.0,
                      epsilon: float = 0.0, decay: float = 1.0,
                      amplitude: float = 1.0, project_source: bool = False):
    """Build a registered linear slab case.

    Returns ``(problem, exact)`` where ``exact`` is the manufactured field (or
    the zero field).  The manufactured source is the discrete-operator residual
    of the exact field, with the x-derivative taken analytically, so the only
    solver error left is the x-discretization of the sweep.
    ``project_source=True`` additionally removes the per-slice invariant
    moments (for far-field pipelines, which require compatible sources; the
    exact field then no longer satisfies the equation identically).
    """
    N = ctx.grid.n_nodes
    if name == "zero_data":
        problem = LinearSlabProblem(g=np.zeros((slab.n_x + 1, N)),
                                    r=np.zeros(N), epsilon=epsilon, p_E0=p_E0)
        return problem, SlabField(np.zeros((slab.n_x + 1, N)))
    if name == "mms_linear":
        psi = amplitude * _smooth_micro_profile(ctx)
        prof = np.exp(-decay * slab.x_nodes)
        exact = SlabField(prof[:, None] * psi)
        v3 = ctx.grid.nodes[:, 2]
        Lpsi = op.apply_L(psi)
        g_profile = (epsilon * psi - decay * v3 * psi + p_E0 * Lpsi)
        g = prof[:, None] * g_profile
        if project_source:
            B = ctx.invariant_basis
            g = g - ((g * ctx._w) @ B) @ B.T
        r = psi - ctx.pgamma(psi[ctx.outgoing])
        r = np.where(ctx.incoming, r, 0.0)
        override = np.where(ctx.outgoing, np.exp(-decay * slab.d) * psi, 0.0)
        problem = LinearSlabProblem(g=g, r=r, far_inflow_override=override,
                                    epsilon=epsilon, p_E0=p_E0)
        return problem, exact
    raise UnknownCaseError(f"unknown manufactured case {name!r}; "
                           f"registered: zero_data, mms_linear")


def generic_farfield_data(ctx: MaxwellianContext, slab: SlabGrid, *,
                          amplitude: float = 1.0, decay: float = 1.0,
                          seed: int | None = None):
    """Compatible (g, r) for a generic far-field run.

    The source is a smooth microscopic profile decaying in x (per-slice
    invariant moments vanish identically); the wall data is a smooth incoming
    perturbation with its mass flux removed.
    """
    if seed is None:
        q = _smooth_micro_profile(ctx, 0)
        V = ctx.grid.nodes
        r0 = (0.4 + 0.8 * V[:, 0] - 0.3 * V[:, 1]
              + 0.2 * V[:, 2]) * np.exp(-ctx.v2 / 3.0)
    else:
        rng = np.random.default_rng(seed)
        V = ctx.grid.nodes
        env = np.exp(-ctx.v2 / 4.0)
        c = rng.standard_normal(5)
        q = (c[0] + c[1] * V[:, 0] + c[2] * V[:, 1] + c[3] * V[:, 2]
             + c[4] * V[:, 0] * V[:, 2]) * env
        q = q - ctx.project(q)
        c = rng.standard_normal(4)
        r0 = (c[0] + c[1] * V[:, 0] + c[2] * V[:, 1]
              + c[3] * V[:, 2]) * np.exp(-ctx.v2 / 3.0)
    prof = np.exp(-decay * slab.x_nodes)
    g = amplitude * prof[:, None] * q
    r = amplitude * flux_zeroed_incoming(ctx, r0)
    return g, r


def generic_nonlinear_data(ctx: MaxwellianContext, slab: SlabGrid, *,
                           scale: float = 1e-2, decay: float = 1.0,
                           seed: int | None = None):
    """Compatible (S, R) for the quadratic driver, scaled into the small-data
    regime by ``scale``."""
    g, r = generic_farfield_data(ctx, slab, amplitude=1.0, decay=decay,
                                 seed=seed)
    return scale * g, scale * r


def mms_convergence(ctx: MaxwellianContext, op: LinearizedOperator,
                    d: float, nx_list, *, p_E0: float = 1.0,
                    epsilon: float = 0.0, decay: float = 1.0,
                    tol: float = 1e-11, max_iter: int = 3000,
                    weight_spec=None):
    """Solve the manufactured case on a refinement ladder and fit the order.

    Returns a dict with per-resolution sup errors and the least-squares slope
    of log(error) against log(dx).
    """
    errs, dxs, reports = [], [], []
    for n_x in nx_list:
        slab = SlabGrid.uniform(d, int(n_x))
        problem, exact = manufactured_case("mms_linear", ctx, slab, op,
                                           p_E0=p_E0, epsilon=epsilon,
                                           decay=decay)
        fld, rep = solve_linear_slab(ctx, slab, op, problem, tol=tol,
                                     max_iter=max_iter,
                                     weight_spec=weight_spec)
        errs.append(float(np.abs(fld.values - exact.values).max()))
        dxs.append(d / n_x)
        reports.append(rep)
    ld, le = np.log(dxs), np.log(errs)
    A = np.stack([ld, np.ones_like(ld)], axis=1)
    coef, *_ = np.linalg.lstsq(A, le, rcond=None)
    return {
        "nx": [int(n) for n in nx_list],
        "dx": dxs,
        "error": errs,
        "order": float(coef[0]),
        "reports": reports,
    }
