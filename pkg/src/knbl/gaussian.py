"""Maxwellian weight machinery: equilibrium, velocity weight, hydrodynamic
projection, diffuse-wall operator, and the stress/heat moment functionals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .grid import VelocityGrid


class WeightConfigError(ValueError):
    """Velocity-weight parameters outside the admissible range."""


def maxwellian(v: np.ndarray):
    """Normalized global equilibrium (2pi)^(-3/2) exp(-|v|^2/2)."""
    v = np.asarray(v, float)
    v2 = (v * v).sum(axis=-1)
    return (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * v2)


@dataclass(frozen=True)
class WeightSpec:
    """Polynomial-Gaussian velocity weight (1+|v|^2)^(beta/2) e^(varpi |v|^2)."""

    beta: float = 3.0
    varpi: float = 0.0

    def __post_init__(self):
        if not self.beta >= 3.0:
            raise WeightConfigError(f"beta must be >= 3, got {self.beta}")
        if not (0.0 <= self.varpi < 0.125):
            raise WeightConfigError(
                f"varpi must lie in [0, 1/8), got {self.varpi}")


def weight(v: np.ndarray, spec: WeightSpec):
    v = np.asarray(v, float)
    v2 = (v * v).sum(axis=-1)
    return (1.0 + v2) ** (0.5 * spec.beta) * np.exp(spec.varpi * v2)


class MaxwellianContext:
    """Per-grid equilibrium data and the discrete hydrodynamic projection.

    The five collision invariants are orthonormalized under the discrete inner
    product, so the projection ``P`` is exactly idempotent and self-adjoint on
    the lattice regardless of quadrature error.
    """

    def __init__(self, grid: VelocityGrid):
        self.grid = grid
        V = grid.nodes
        self.v2 = (V * V).sum(axis=1)
        self.mu = maxwellian(V)
        self.sqrt_mu = np.sqrt(self.mu)
        w = grid.weights
        self._w = w
        # raw invariant basis: sqrt(mu), v_i sqrt(mu), (|v|^2 - 3)/2 sqrt(mu)
        raw = np.stack(
            [self.sqrt_mu,
             V[:, 0] * self.sqrt_mu,
             V[:, 1] * self.sqrt_mu,
             V[:, 2] * self.sqrt_mu,
             0.5 * (self.v2 - 3.0) * self.sqrt_mu], axis=1)
        self.raw_basis = raw
        q, _ = np.linalg.qr(raw * np.sqrt(w)[:, None])
        self.invariant_basis = q / np.sqrt(w)[:, None]
        gram = raw.T @ (w[:, None] * raw)
        self._gram_cho = sla.cho_factor(gram)
        # diffuse-wall measure on the outgoing half-grid {v3 < 0} at x = 0,
        # renormalized so the discrete wall measure has total mass exactly 1
        self.outgoing = V[:, 2] < 0.0
        self.incoming = ~self.outgoing
        m = w[self.outgoing] * np.abs(V[self.outgoing, 2])
        self._zw = m * self.sqrt_mu[self.outgoing]
        self.dsigma_raw = float(np.sum(m * np.sqrt(2.0 * np.pi) * self.mu[self.outgoing]))
        self._zw /= self.dsigma_raw
        self.pgamma_shape = np.sqrt(2.0 * np.pi * self.mu)

    # -- inner products -------------------------------------------------
    def inner(self, f, g):
        """Discrete L^2 inner product; broadcasts over leading axes."""
        return np.asarray(f * g) @ self._w if np.ndim(f * g) == 1 else (f * g) @ self._w

    def norm(self, f):
        return float(np.sqrt(self.inner(f, f)))

    def boundary_norm2(self, trace, half: str):
        """|.|^2 in L^2(|v3| dv) over one half-grid ('outgoing' or 'incoming')."""
        mask = self.outgoing if half == "outgoing" else self.incoming
        V3 = self.grid.nodes[mask, 2]
        return float(np.sum(self._w[mask] * np.abs(V3) * np.asarray(trace) ** 2))

    # -- hydrodynamic projection ----------------------------------------
    def project(self, f):
        """Orthogonal projection onto the invariant span; stacks supported."""
        B = self.invariant_basis
        coef = (np.asarray(f) * self._w) @ B
        return coef @ B.T

    def hydro_project(self, f):
        """Projection plus coefficients (a, b1, b2, b3, c) in the raw basis."""
        Pf = self.project(f)
        mom = (np.asarray(f) * self._w) @ self.raw_basis
        coeffs = sla.cho_solve(self._gram_cho, np.atleast_1d(mom).T).T
        return Pf, coeffs

    # -- diffuse wall -----------------------------------------------------
    def z_gamma(self, outgoing_trace) -> float:
        """Renormalized wall-flux functional of an outgoing trace."""
        return float(np.dot(self._zw, np.asarray(outgoing_trace)))

    def pgamma(self, outgoing_trace):
        """Diffuse re-emission: sqrt(2 pi mu(v)) times the trace's wall flux."""
        return self.pgamma_shape * self.z_gamma(outgoing_trace)


def build_context(grid: VelocityGrid) -> MaxwellianContext:
    return MaxwellianContext(grid)


@dataclass(frozen=True)
class MomentFunctionals:
    """Stress tensor functionals A[i,j] and heat-flux functionals B[i]."""

    A: np.ndarray   # (3, 3, N): (v_i v_j - delta_ij |v|^2/3) sqrt(mu)
    B: np.ndarray   # (3, N):    v_i (|v|^2 - 5)/2 sqrt(mu)


def moment_functionals(ctx: MaxwellianContext) -> MomentFunctionals:
    V = ctx.grid.nodes
    N = ctx.grid.n_nodes
    A = np.empty((3, 3, N))
    for i in range(3):
        for j in range(3):
            A[i, j] = (V[:, i] * V[:, j] - (ctx.v2 / 3.0 if i == j else 0.0)) * ctx.sqrt_mu
    B = np.empty((3, N))
    for i in range(3):
        B[i] = 0.5 * V[:, i] * (ctx.v2 - 5.0) * ctx.sqrt_mu
    return MomentFunctionals(A, B)


# closed-form Gaussian moments used by the macroscopic estimates; the fifth
# integrand is oriented so its value is +5
_MOMENT_TABLE = (
    ("v3^2 (|v|^2-3)(|v|^2-5)", 10.0),
    ("v3^2 (|v|^2-5)", 0.0),
    ("v3^2 (v3^2-1)", 2.0),
    ("|v|^2 v1^2 v3^2", 7.0),
    ("v3^2 (10-|v|^2)", 5.0),
    ("(|v|^2-3) v3^2 (|v|^2-10)", 0.0),
)


def verify_gaussian_moments(ctx: MaxwellianContext):
    """Evaluate the six closed-form moment identities by lattice quadrature.

    Returns a list of rows (label, computed, expected, abs defect); thresholds
    are applied by the caller.
    """
    V = ctx.grid.nodes
    v2, v3 = ctx.v2, V[:, 2]
    integrands = (
        v3**2 * (v2 - 3.0) * (v2 - 5.0),
        v3**2 * (v2 - 5.0),
        v3**2 * (v3**2 - 1.0),
        v2 * V[:, 0] ** 2 * v3**2,
        v3**2 * (10.0 - v2),
        (v2 - 3.0) * v3**2 * (v2 - 10.0),
    )
    rows = []
    for (label, expected), q in zip(_MOMENT_TABLE, integrands):
        computed = float(np.sum(ctx._w * q * ctx.mu))
        rows.append((label, computed, expected, abs(computed - expected)))
    return rows
