"""Quantitative verification instruments: decay fits, conservation tables,
energy-balance ratios, coercivity.  Pure functions of their inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .collision import LinearizedOperator, _coercivity
from .gaussian import MaxwellianContext, WeightSpec, weight
from .slab import SlabField, SlabGrid


@dataclass
class DecayFit:
    sigma_fit: float
    window: tuple
    r_squared: float
    profile: np.ndarray
    monotone: bool
    identically_zero: bool = False


def fit_decay_rate(field: SlabField, weight_spec: WeightSpec,
                   slab: SlabGrid, window: Optional[tuple] = None,
                   node_weights: Optional[np.ndarray] = None,
                   ctx: Optional[MaxwellianContext] = None) -> DecayFit:
    """Least-squares decay exponent of the per-slice weighted sup norm.

    The per-node weight values come from ``ctx`` (or explicit
    ``node_weights``); the default window drops one unit at each end of the
    slab.  An exactly zero field yields the ``identically_zero`` marker
    instead of a fit.
    """
    x = slab.x_nodes
    if window is None:
        pad = min(1.0, 0.25 * slab.d)
        window = (pad, slab.d - pad)
    if not (0.0 <= window[0] < window[1] <= slab.d):
        raise ValueError(f"degenerate window {window}")
    if node_weights is not None:
        w_v = node_weights
    elif ctx is not None:
        w_v = weight(ctx.grid.nodes, weight_spec)
    else:
        w_v = np.ones(field.values.shape[1])
    profile = np.abs(field.values * w_v).max(axis=1)
    if profile.max() == 0.0:
        return DecayFit(np.nan, window, np.nan, profile, True, True)
    sel = (x >= window[0]) & (x <= window[1]) & (profile > 0)
    xs, ps = x[sel], np.log(profile[sel])
    if len(xs) < 2:
        return DecayFit(np.nan, window, np.nan, profile, False, True)
    A = np.stack([xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ps, rcond=None)
    fitted = A @ coef
    ss_res = float(np.sum((ps - fitted) ** 2))
    ss_tot = float(np.sum((ps - ps.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    monotone = bool(np.all(np.diff(profile[sel]) <= 1e-12 * profile.max()))
    return DecayFit(float(-coef[0]), window, r2, profile, monotone)


def conservation_report(ctx: MaxwellianContext, slab: SlabGrid,
                        field: SlabField):
    """Per-edge flux moments of the five invariants and their drift along x.

    Returns ``(profile, drift)`` where ``profile[m, k]`` is the moment of
    v3 times the k-th raw invariant at edge m, and ``drift`` is the largest
    span along x over the five columns.
    """
    v3 = ctx.grid.nodes[:, 2]
    profile = (field.values * (ctx._w * v3)) @ ctx.raw_basis
    drift = float((profile.max(axis=0) - profile.min(axis=0)).max())
    return profile, drift


def energy_dissipation_check(ctx: MaxwellianContext, slab: SlabGrid,
                             op: LinearizedOperator, barf: SlabField,
                             g: np.ndarray, r: np.ndarray, sigma1: float):
    """Wall-plus-dissipation functional against the data functional.

    The bounding constant is not quantified, so callers assert stability of
    the ratio under refinement rather than a hard threshold.  Returns
    ``(lhs, rhs, ratio)``; zero data gives (0, 0, nan).
    """
    x = slab.x_nodes
    trace0 = barf.values[0]
    micro_wall = trace0 - ctx.pgamma(barf.wall_outgoing(ctx))
    lhs_wall = ctx.boundary_norm2(micro_wall[ctx.outgoing], "outgoing")
    micro = barf.values - ctx.project(barf.values)
    nu_norm2 = (micro**2 * (ctx._w * op.nu)).sum(axis=1)
    e2s = np.exp(2.0 * sigma1 * x)
    lhs = lhs_wall + float(np.trapz(e2s * nu_norm2, x))
    rhs_wall = ctx.boundary_norm2(r[ctx.incoming], "incoming")
    g_norm2 = (g**2 * ctx._w).sum(axis=1)
    rhs = rhs_wall + float(np.trapz(e2s * g_norm2, x))
    ratio = lhs / rhs if rhs > 0 else float("nan")
    return lhs, rhs, ratio


def coercivity_estimate(op: LinearizedOperator, tol: float = 1e-6) -> float:
    """Minimum of <f, Lf> / |f|_nu^2 over the invariant complement."""
    return _coercivity(op, tol=tol)
