"""Hard-sphere collision machinery.

Assembles the collision frequency, the dense gain matrix, and the linearized
operator L = diag(nu) - K with an exactly enforced five-dimensional null
space, plus the bilinear forms Q and Gamma evaluated by the same lattice x
sphere quadrature.

Quadrature layout
-----------------
For every pre-collision pair (v, u) the unit-sphere integral is taken in a
frame aligned with c = v - u, using Gauss-Legendre nodes in t = cos(angle)
on (0, 1] (doubled: the integrand is even under omega -> -omega) and a
uniform azimuthal rule.  The kernel factor |c . omega| is then exactly
|c| t, so the loss-side sphere integral is exact.

Fields are interpolated at the post-collision velocities through their ratio
to the Maxwellian, on tensor-quadratic (27-point) stencils; the exponential
factors recombine exactly via mu(u') mu(v') = mu(u) mu(v).  With this choice
the five collision invariants are null vectors of the raw assembled operator
up to the lattice-truncation tail.  Stencils that would leave the lattice are
dropped (documented truncation; the conservation fix-up repairs the operator).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from numba import njit, prange

from .grid import VelocityGrid
from .gaussian import MaxwellianContext, MomentFunctionals


class AssemblyError(RuntimeError):
    """Operator assembly refused or failed."""


class SolverFailure(RuntimeError):
    """A linear solve or eigenvalue iteration did not meet its tolerance."""


@dataclass(frozen=True)
class SphereRule:
    """Product rule on the unit sphere, folded onto the t > 0 hemisphere."""

    n_polar: int
    n_azimuth: int
    tcs: np.ndarray    # (M, 3): t, cos(phi), sin(phi)
    w: np.ndarray      # (M,) weights carrying the omega -> -omega doubling

    @property
    def node_count(self) -> int:
        """Effective full-sphere node count."""
        return 2 * self.n_polar * self.n_azimuth


def make_sphere_rule(n_polar: int = 3, n_azimuth: int = 6) -> SphereRule:
    if n_polar < 1 or n_azimuth < 2:
        raise AssemblyError("sphere rule needs n_polar >= 1, n_azimuth >= 2")
    x, gw = np.polynomial.legendre.leggauss(n_polar)
    t = 0.5 * (x + 1.0)
    gw = 0.5 * gw
    phi = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    T, P = np.meshgrid(t, phi, indexing="ij")
    tcs = np.stack([T.ravel(), np.cos(P).ravel(), np.sin(P).ravel()], axis=1)
    w = np.repeat(2.0 * (2.0 * np.pi / n_azimuth) * gw, n_azimuth)
    return SphereRule(n_polar, n_azimuth, tcs, w)


# ---------------------------------------------------------------------------
# numba kernels (row-parallel; deterministic accumulation order)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _frame(ix, iy, iz):
    # orthonormal pair completing the unit vector (ix, iy, iz)
    if abs(iz) < 0.9:
        hx, hy, hz = 0.0, 0.0, 1.0
    else:
        hx, hy, hz = 1.0, 0.0, 0.0
    d = hx * ix + hy * iy + hz * iz
    e1x = hx - d * ix
    e1y = hy - d * iy
    e1z = hz - d * iz
    en = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    e1x /= en
    e1y /= en
    e1z /= en
    e2x = iy * e1z - iz * e1y
    e2y = iz * e1x - ix * e1z
    e2z = ix * e1y - iy * e1x
    return e1x, e1y, e1z, e2x, e2y, e2z


@njit(cache=True, parallel=True)
def _assemble_kernel(V, mu, ax0, h, n, tcs, wom, wcell, Z, K1, Mnu, nu):
    N = V.shape[0]
    M = tcs.shape[0]
    for i in prange(N):
        vi0, vi1, vi2 = V[i, 0], V[i, 1], V[i, 2]
        mui = mu[i]
        for j in range(N):
            cx = vi0 - V[j, 0]
            cy = vi1 - V[j, 1]
            cz = vi2 - V[j, 2]
            s2 = cx * cx + cy * cy + cz * cz
            if s2 < 1e-28:
                continue
            s = np.sqrt(s2)
            ix, iy, iz = cx / s, cy / s, cz / s
            e1x, e1y, e1z, e2x, e2y, e2z = _frame(ix, iy, iz)
            ampb = wcell * mu[j] * mui
            swsum = 0.0
            for m in range(M):
                t = tcs[m, 0]
                cph = tcs[m, 1]
                sph = tcs[m, 2]
                wm = wom[m]
                st = np.sqrt(1.0 - t * t)
                ox = t * ix + st * (cph * e1x + sph * e2x)
                oy = t * iy + st * (cph * e1y + sph * e2y)
                oz = t * iz + st * (cph * e1z + sph * e2z)
                dot = s * t
                swsum += wm * dot
                Dx, Dy, Dz = dot * ox, dot * oy, dot * oz
                amp = ampb * wm * dot
                # deposit u' = u + D
                g0 = (V[j, 0] + Dx - ax0) / h
                g1 = (V[j, 1] + Dy - ax0) / h
                g2 = (V[j, 2] + Dz - ax0) / h
                r0, r1, r2 = int(round(g0)), int(round(g1)), int(round(g2))
                if 1 <= r0 <= n - 2 and 1 <= r1 <= n - 2 and 1 <= r2 <= n - 2:
                    f0, f1, f2 = g0 - r0, g1 - r1, g2 - r2
                    a0, b0, c0 = 0.5 * f0 * (f0 - 1.0), 1.0 - f0 * f0, 0.5 * f0 * (f0 + 1.0)
                    a1, b1, c1 = 0.5 * f1 * (f1 - 1.0), 1.0 - f1 * f1, 0.5 * f1 * (f1 + 1.0)
                    a2, b2, c2 = 0.5 * f2 * (f2 - 1.0), 1.0 - f2 * f2, 0.5 * f2 * (f2 + 1.0)
                    base = (r0 * n + r1) * n + r2
                    for d0 in range(-1, 2):
                        w0 = a0 if d0 < 0 else (b0 if d0 == 0 else c0)
                        for d1 in range(-1, 2):
                            w01 = w0 * (a1 if d1 < 0 else (b1 if d1 == 0 else c1))
                            off = base + (d0 * n + d1) * n
                            for d2 in range(-1, 2):
                                w012 = w01 * (a2 if d2 < 0 else (b2 if d2 == 0 else c2))
                                Z[i, off + d2] += amp * w012
                # deposit v' = v - D
                g0 = (vi0 - Dx - ax0) / h
                g1 = (vi1 - Dy - ax0) / h
                g2 = (vi2 - Dz - ax0) / h
                r0, r1, r2 = int(round(g0)), int(round(g1)), int(round(g2))
                if 1 <= r0 <= n - 2 and 1 <= r1 <= n - 2 and 1 <= r2 <= n - 2:
                    f0, f1, f2 = g0 - r0, g1 - r1, g2 - r2
                    a0, b0, c0 = 0.5 * f0 * (f0 - 1.0), 1.0 - f0 * f0, 0.5 * f0 * (f0 + 1.0)
                    a1, b1, c1 = 0.5 * f1 * (f1 - 1.0), 1.0 - f1 * f1, 0.5 * f1 * (f1 + 1.0)
                    a2, b2, c2 = 0.5 * f2 * (f2 - 1.0), 1.0 - f2 * f2, 0.5 * f2 * (f2 + 1.0)
                    base = (r0 * n + r1) * n + r2
                    for d0 in range(-1, 2):
                        w0 = a0 if d0 < 0 else (b0 if d0 == 0 else c0)
                        for d1 in range(-1, 2):
                            w01 = w0 * (a1 if d1 < 0 else (b1 if d1 == 0 else c1))
                            off = base + (d0 * n + d1) * n
                            for d2 in range(-1, 2):
                                w012 = w01 * (a2 if d2 < 0 else (b2 if d2 == 0 else c2))
                                Z[i, off + d2] += amp * w012
            K1[i, j] = wcell * np.sqrt(mui * mu[j]) * swsum
            Mnu[i, j] = wcell * swsum
            nu[i] += wcell * mu[j] * swsum


@njit(cache=True, parallel=True)
def _gain_kernel(V, mu, ax0, h, n, tcs, wom, wcell, R1, R2, out):
    """Collocation gain: out[s,i] = sum_{j,omega} amp * IR1(u') * IR2(v')."""
    N = V.shape[0]
    M = tcs.shape[0]
    S = R1.shape[0]
    for i in prange(N):
        vi0, vi1, vi2 = V[i, 0], V[i, 1], V[i, 2]
        mui = mu[i]
        iu = np.empty(27, np.int64)
        wu = np.empty(27)
        iv = np.empty(27, np.int64)
        wv = np.empty(27)
        for j in range(N):
            cx = vi0 - V[j, 0]
            cy = vi1 - V[j, 1]
            cz = vi2 - V[j, 2]
            s2 = cx * cx + cy * cy + cz * cz
            if s2 < 1e-28:
                continue
            s = np.sqrt(s2)
            ix, iy, iz = cx / s, cy / s, cz / s
            e1x, e1y, e1z, e2x, e2y, e2z = _frame(ix, iy, iz)
            ampb = wcell * mu[j] * mui
            for m in range(M):
                t = tcs[m, 0]
                cph = tcs[m, 1]
                sph = tcs[m, 2]
                st = np.sqrt(1.0 - t * t)
                ox = t * ix + st * (cph * e1x + sph * e2x)
                oy = t * iy + st * (cph * e1y + sph * e2y)
                oz = t * iz + st * (cph * e1z + sph * e2z)
                dot = s * t
                Dx, Dy, Dz = dot * ox, dot * oy, dot * oz
                g0 = (V[j, 0] + Dx - ax0) / h
                g1 = (V[j, 1] + Dy - ax0) / h
                g2 = (V[j, 2] + Dz - ax0) / h
                r0, r1, r2 = int(round(g0)), int(round(g1)), int(round(g2))
                if not (1 <= r0 <= n - 2 and 1 <= r1 <= n - 2 and 1 <= r2 <= n - 2):
                    continue
                q0 = (vi0 - Dx - ax0) / h
                q1 = (vi1 - Dy - ax0) / h
                q2 = (vi2 - Dz - ax0) / h
                p0, p1, p2 = int(round(q0)), int(round(q1)), int(round(q2))
                if not (1 <= p0 <= n - 2 and 1 <= p1 <= n - 2 and 1 <= p2 <= n - 2):
                    continue
                f0, f1, f2 = g0 - r0, g1 - r1, g2 - r2
                e0, e1, e2 = q0 - p0, q1 - p1, q2 - p2
                ua0, ub0, uc0 = 0.5 * f0 * (f0 - 1.0), 1.0 - f0 * f0, 0.5 * f0 * (f0 + 1.0)
                ua1, ub1, uc1 = 0.5 * f1 * (f1 - 1.0), 1.0 - f1 * f1, 0.5 * f1 * (f1 + 1.0)
                ua2, ub2, uc2 = 0.5 * f2 * (f2 - 1.0), 1.0 - f2 * f2, 0.5 * f2 * (f2 + 1.0)
                va0, vb0, vc0 = 0.5 * e0 * (e0 - 1.0), 1.0 - e0 * e0, 0.5 * e0 * (e0 + 1.0)
                va1, vb1, vc1 = 0.5 * e1 * (e1 - 1.0), 1.0 - e1 * e1, 0.5 * e1 * (e1 + 1.0)
                va2, vb2, vc2 = 0.5 * e2 * (e2 - 1.0), 1.0 - e2 * e2, 0.5 * e2 * (e2 + 1.0)
                ubase = (r0 * n + r1) * n + r2
                vbase = (p0 * n + p1) * n + p2
                k = 0
                for d0 in range(-1, 2):
                    wu0 = ua0 if d0 < 0 else (ub0 if d0 == 0 else uc0)
                    wv0 = va0 if d0 < 0 else (vb0 if d0 == 0 else vc0)
                    for d1 in range(-1, 2):
                        wu01 = wu0 * (ua1 if d1 < 0 else (ub1 if d1 == 0 else uc1))
                        wv01 = wv0 * (va1 if d1 < 0 else (vb1 if d1 == 0 else vc1))
                        off = (d0 * n + d1) * n
                        for d2 in range(-1, 2):
                            iu[k] = ubase + off + d2
                            wu[k] = wu01 * (ua2 if d2 < 0 else (ub2 if d2 == 0 else uc2))
                            iv[k] = vbase + off + d2
                            wv[k] = wv01 * (va2 if d2 < 0 else (vb2 if d2 == 0 else vc2))
                            k += 1
                amp = ampb * wom[m] * dot
                for sidx in range(S):
                    acc1 = 0.0
                    acc2 = 0.0
                    for kk in range(27):
                        acc1 += wu[kk] * R1[sidx, iu[kk]]
                        acc2 += wv[kk] * R2[sidx, iv[kk]]
                    out[sidx, i] += amp * acc1 * acc2


_N_STRIPES = 64


@njit(cache=True, parallel=True)
def _gamma_scatter_kernel(V, ax0, h, n, tcs, wom, wcell, F, G, buf):
    """Pair-conservative bilinear collision sum.

    Each retained item (i, j, omega) deposits the pre-collision product at the
    post-collision velocities and removes it at the pre-collision nodes; the
    quadratic stencils reproduce 1, v, |v|^2 exactly, so every invariant
    moment vanishes identically item by item.  Items whose deposit stencil
    leaves the lattice are dropped whole.  buf has shape (stripes, S, N); the
    stripe decomposition keeps the accumulation deterministic.
    """
    N = V.shape[0]
    M = tcs.shape[0]
    S = F.shape[0]
    for stripe in prange(_N_STRIPES):
        for i in range(stripe, N, _N_STRIPES):
            vi0, vi1, vi2 = V[i, 0], V[i, 1], V[i, 2]
            iu = np.empty(27, np.int64)
            wu = np.empty(27)
            iv = np.empty(27, np.int64)
            wv = np.empty(27)
            for j in range(N):
                cx = vi0 - V[j, 0]
                cy = vi1 - V[j, 1]
                cz = vi2 - V[j, 2]
                s2 = cx * cx + cy * cy + cz * cz
                if s2 < 1e-28:
                    continue
                s = np.sqrt(s2)
                ix, iy, iz = cx / s, cy / s, cz / s
                e1x, e1y, e1z, e2x, e2y, e2z = _frame(ix, iy, iz)
                for m in range(M):
                    t = tcs[m, 0]
                    cph = tcs[m, 1]
                    sph = tcs[m, 2]
                    st = np.sqrt(1.0 - t * t)
                    ox = t * ix + st * (cph * e1x + sph * e2x)
                    oy = t * iy + st * (cph * e1y + sph * e2y)
                    oz = t * iz + st * (cph * e1z + sph * e2z)
                    dot = s * t
                    Dx, Dy, Dz = dot * ox, dot * oy, dot * oz
                    g0 = (V[j, 0] + Dx - ax0) / h
                    g1 = (V[j, 1] + Dy - ax0) / h
                    g2 = (V[j, 2] + Dz - ax0) / h
                    r0, r1, r2 = int(round(g0)), int(round(g1)), int(round(g2))
                    if not (1 <= r0 <= n - 2 and 1 <= r1 <= n - 2 and 1 <= r2 <= n - 2):
                        continue
                    q0 = (vi0 - Dx - ax0) / h
                    q1 = (vi1 - Dy - ax0) / h
                    q2 = (vi2 - Dz - ax0) / h
                    p0, p1, p2 = int(round(q0)), int(round(q1)), int(round(q2))
                    if not (1 <= p0 <= n - 2 and 1 <= p1 <= n - 2 and 1 <= p2 <= n - 2):
                        continue
                    f0, f1, f2 = g0 - r0, g1 - r1, g2 - r2
                    e0, e1, e2 = q0 - p0, q1 - p1, q2 - p2
                    ua0, ub0, uc0 = 0.5 * f0 * (f0 - 1.0), 1.0 - f0 * f0, 0.5 * f0 * (f0 + 1.0)
                    ua1, ub1, uc1 = 0.5 * f1 * (f1 - 1.0), 1.0 - f1 * f1, 0.5 * f1 * (f1 + 1.0)
                    ua2, ub2, uc2 = 0.5 * f2 * (f2 - 1.0), 1.0 - f2 * f2, 0.5 * f2 * (f2 + 1.0)
                    va0, vb0, vc0 = 0.5 * e0 * (e0 - 1.0), 1.0 - e0 * e0, 0.5 * e0 * (e0 + 1.0)
                    va1, vb1, vc1 = 0.5 * e1 * (e1 - 1.0), 1.0 - e1 * e1, 0.5 * e1 * (e1 + 1.0)
                    va2, vb2, vc2 = 0.5 * e2 * (e2 - 1.0), 1.0 - e2 * e2, 0.5 * e2 * (e2 + 1.0)
                    ubase = (r0 * n + r1) * n + r2
                    vbase = (p0 * n + p1) * n + p2
                    k = 0
                    for d0 in range(-1, 2):
                        wu0 = ua0 if d0 < 0 else (ub0 if d0 == 0 else uc0)
                        wv0 = va0 if d0 < 0 else (vb0 if d0 == 0 else vc0)
                        for d1 in range(-1, 2):
                            wu01 = wu0 * (ua1 if d1 < 0 else (ub1 if d1 == 0 else uc1))
                            wv01 = wv0 * (va1 if d1 < 0 else (vb1 if d1 == 0 else vc1))
                            off = (d0 * n + d1) * n
                            for d2 in range(-1, 2):
                                iu[k] = ubase + off + d2
                                wu[k] = wu01 * (ua2 if d2 < 0 else (ub2 if d2 == 0 else uc2))
                                iv[k] = vbase + off + d2
                                wv[k] = wv01 * (va2 if d2 < 0 else (vb2 if d2 == 0 else vc2))
                                k += 1
                    ampi = 0.5 * wcell * wom[m] * dot
                    for sidx in range(S):
                        a = ampi * F[sidx, j] * G[sidx, i]
                        for kk in range(27):
                            buf[stripe, sidx, iu[kk]] += a * wu[kk]
                            buf[stripe, sidx, iv[kk]] += a * wv[kk]
                        buf[stripe, sidx, j] -= a
                        buf[stripe, sidx, i] -= a


# ---------------------------------------------------------------------------
# quadrature wrapper and operator
# ---------------------------------------------------------------------------

class CollisionQuadrature:
    """Shared lattice x sphere quadrature for the bilinear collision sums."""

    def __init__(self, ctx: MaxwellianContext, rule: SphereRule | None = None):
        self.ctx = ctx
        self.grid = ctx.grid
        self.rule = rule if rule is not None else make_sphere_rule()
        self._loss_matrix = None

    @property
    def loss_matrix(self) -> np.ndarray:
        """Dense loss kernel: (M f)(v_i) = sum_j w_j (int B domega) f(u_j)."""
        if self._loss_matrix is None:
            g = self.grid
            sw = float(self.rule.w @ self.rule.tcs[:, 0])  # sphere sum of |t|
            diff = g.nodes[:, None, :] - g.nodes[None, :, :]
            dist = np.sqrt((diff * diff).sum(-1))
            self._loss_matrix = g.cell_weight * sw * dist
        return self._loss_matrix

    def q_bilinear(self, F1, F2):
        """Collocation (gather) form of the hard-sphere bilinear form."""
        F1 = np.asarray(F1, float)
        F2 = np.asarray(F2, float)
        shape = np.broadcast_shapes(F1.shape, F2.shape)
        F1 = np.broadcast_to(F1, shape)
        F2 = np.broadcast_to(F2, shape)
        g, mu = self.grid, self.ctx.mu
        R1 = np.ascontiguousarray((F1 / mu).reshape(-1, g.n_nodes))
        R2 = np.ascontiguousarray((F2 / mu).reshape(-1, g.n_nodes))
        out = np.zeros_like(R1)
        _gain_kernel(g.nodes, mu, g.axis[0], g.h, g.n_per_axis,
                     self.rule.tcs, self.rule.w, g.cell_weight, R1, R2, out)
        loss = (self.loss_matrix @ F1.reshape(-1, g.n_nodes).T).T \
            * F2.reshape(-1, g.n_nodes)
        return (out - loss).reshape(shape)

    def gamma(self, f, g_in):
        """Maxwellian-normalized bilinear form, pair-conservative quadrature.

        All five invariant moments of the result vanish to rounding for any
        inputs.  The diagonal agrees with q_bilinear up to stencil-level
        quadrature error.
        """
        f = np.asarray(f, float)
        g_in = np.asarray(g_in, float)
        shape = np.broadcast_shapes(f.shape, g_in.shape)
        f = np.broadcast_to(f, shape)
        g_in = np.broadcast_to(g_in, shape)
        g, smu = self.grid, self.ctx.sqrt_mu
        F = np.ascontiguousarray((f * smu).reshape(-1, g.n_nodes))
        G = np.ascontiguousarray((g_in * smu).reshape(-1, g.n_nodes))
        buf = np.zeros((_N_STRIPES, F.shape[0], g.n_nodes))
        _gamma_scatter_kernel(g.nodes, g.axis[0], g.h, g.n_per_axis,
                              self.rule.tcs, self.rule.w, g.cell_weight,
                              F, G, buf)
        return (buf.sum(axis=0) / smu).reshape(shape)


def collision_frequency(grid: VelocityGrid, rule: SphereRule | None = None,
                        points: np.ndarray | None = None) -> np.ndarray:
    """Hard-sphere collision frequency by lattice x sphere quadrature.

    With ``points=None`` evaluates at the grid nodes (the values the operator
    uses); otherwise at the given velocities.
    """
    rule = rule if rule is not None else make_sphere_rule()
    sw = float(rule.w @ rule.tcs[:, 0])
    from .gaussian import maxwellian
    mu = maxwellian(grid.nodes)
    pts = grid.nodes if points is None else np.atleast_2d(np.asarray(points, float))
    out = np.empty(len(pts))
    for k0 in range(0, len(pts), 1024):
        blk = pts[k0:k0 + 1024]
        d = np.sqrt(((blk[:, None, :] - grid.nodes[None, :, :]) ** 2).sum(-1))
        out[k0:k0 + 1024] = grid.cell_weight * sw * (d @ mu)
    return out


class LinearizedOperator:
    """Dense linearized hard-sphere operator L = diag(nu) - K.

    After the conservation fix-up, L is symmetric under the discrete inner
    product and annihilates the five invariants exactly; all applications are
    pure and the instance is immutable in practice (caches excepted).
    """

    def __init__(self, ctx: MaxwellianContext, rule: SphereRule,
                 nu: np.ndarray, K: np.ndarray,
                 raw_null_defects: np.ndarray, quad: CollisionQuadrature):
        self.ctx = ctx
        self.grid = ctx.grid
        self.rule = rule
        self.nu = nu
        self.K = K
        self.raw_null_defects = raw_null_defects
        self.quad = quad
        self._lu = None
        self._c0 = None
        self._kappas = None
        self._linv_cache: dict[str, np.ndarray] = {}

    # -- diagnostics ------------------------------------------------------
    @property
    def nu_bounds(self):
        """Fitted constants (c1, C1) with c1 (1+|v|) <= nu <= C1 (1+|v|)."""
        speed = 1.0 + np.sqrt(self.ctx.v2)
        r = self.nu / speed
        return float(r.min()), float(r.max())

    def null_defects(self) -> np.ndarray:
        B = self.ctx.invariant_basis
        return np.abs(self.apply_L(B.T)).max(axis=1)

    @property
    def c0_estimate(self) -> float:
        if self._c0 is None:
            self._c0 = _coercivity(self)
        return self._c0

    # -- actions ----------------------------------------------------------
    def apply_L(self, f):
        f = np.asarray(f, float)
        return self.nu * f - f @ self.K.T

    def _factor(self):
        if self._lu is None:
            N = self.grid.n_nodes
            X = self.ctx.invariant_basis
            A = np.zeros((N + 5, N + 5))
            A[:N, :N] = np.diag(self.nu) - self.K
            A[:N, N:] = X
            A[N:, :N] = self.grid.cell_weight * X.T
            self._lu = sla.lu_factor(A)
            del A
        return self._lu

    def solve_Linv(self, y: np.ndarray) -> np.ndarray:
        """Solve L x = y with x orthogonal to the invariants.

        The right-hand side must already be orthogonal to the invariant span
        (callers project first); the augmented saddle system pins x in the
        orthogonal complement.
        """
        y = np.asarray(y, float)
        ny = self.ctx.norm(y)
        if ny == 0.0:
            return np.zeros_like(y)
        py = self.ctx.norm(self.ctx.project(y))
        if py > 1e-8 * ny:
            raise ValueError(
                f"solve_Linv needs y orthogonal to the invariants; "
                f"|Py|/|y| = {py / ny:.3e}")
        lu = self._factor()
        b = np.concatenate([y, np.zeros(5)])
        x = sla.lu_solve(lu, b)[:len(y)]
        res = self.ctx.norm(self.apply_L(x) - y)
        if res > 1e-10 * ny:
            raise SolverFailure(f"augmented solve residual {res / ny:.3e}")
        return x

    def linv_cached(self, name: str, y: np.ndarray) -> np.ndarray:
        if name not in self._linv_cache:
            self._linv_cache[name] = self.solve_Linv(y)
        return self._linv_cache[name]


def assemble_K(grid: VelocityGrid, ctx: MaxwellianContext,
               rule: SphereRule | None = None,
               node_cap: int = 20) -> LinearizedOperator:
    """Assemble the linearized operator by direct quadrature of the gain and
    loss integrals, then enforce the discrete conservation laws.

    Fix-up: the gain matrix is symmetrized in the Gaussian-damped
    representation (entrywise commensurate, so no tail inflation), and the
    result is projected so that L and its adjoint annihilate the invariant
    span exactly.
    """
    if grid.n_per_axis > node_cap:
        raise AssemblyError(
            f"refusing to assemble a dense {grid.n_nodes}x{grid.n_nodes} "
            f"operator (n_per_axis {grid.n_per_axis} > cap {node_cap}); "
            f"raise node_cap if the ~{8 * grid.n_nodes**2 / 1e9:.1f} GB per "
            f"matrix is acceptable")
    rule = rule if rule is not None else make_sphere_rule()
    N = grid.n_nodes
    Z = np.zeros((N, N))
    K1 = np.zeros((N, N))
    Mnu = np.zeros((N, N))
    nu = np.zeros(N)
    _assemble_kernel(grid.nodes, ctx.mu, grid.axis[0], grid.h, grid.n_per_axis,
                     rule.tcs, rule.w, grid.cell_weight, Z, K1, Mnu, nu)
    smu = ctx.sqrt_mu
    Kraw = Z / (smu[:, None] * smu[None, :]) - K1
    # raw (pre-fix-up) null defects, a reported convergence diagnostic
    B = ctx.invariant_basis
    raw_defects = np.abs(nu * B.T - B.T @ Kraw.T).max(axis=1)
    # fix-up step 1: symmetrize the gain in the damped representation
    Z += Z.T
    Z *= 0.5
    K = Z / (smu[:, None] * smu[None, :])
    del Z
    K -= K1
    del K1
    # fix-up step 2: rank-5 projection so L annihilates the invariants exactly
    L = np.diag(nu) - K
    wc = grid.cell_weight
    LB = L @ B
    L -= wc * LB @ B.T
    BtL = B.T @ L
    L -= wc * B @ BtL
    K = np.diag(nu) - L
    del L
    quad = CollisionQuadrature(ctx, rule)
    quad._loss_matrix = Mnu
    return LinearizedOperator(ctx, rule, nu, K, raw_defects, quad)


def apply_L(op: LinearizedOperator, f):
    return op.apply_L(f)


def solve_Linv(op: LinearizedOperator, y):
    return op.solve_Linv(y)


def kappas(op: LinearizedOperator, fun: MomentFunctionals):
    """Transport coefficients <A31, L^-1 A31> and <B3, L^-1 B3>.

    The heat functional is projected onto the orthogonal complement first (its
    discrete moment against v3 sqrt(mu) is quadrature-small but nonzero); the
    shear functionals are exactly orthogonal by lattice parity.
    """
    if op._kappas is None:
        ctx = op.ctx
        A31, A32, B3 = fun.A[2, 0], fun.A[2, 1], fun.B[2]
        B3p = B3 - ctx.project(B3)
        x1 = op.linv_cached("LinvA31", A31)
        x2 = op.linv_cached("LinvA32", A32)
        x3 = op.linv_cached("LinvB3", B3p)
        k1 = float(ctx.inner(A31, x1))
        k1b = float(ctx.inner(A32, x2))
        k2 = float(ctx.inner(B3p, x3))
        if k1 <= 0 or k1b <= 0 or k2 <= 0:
            raise SolverFailure(
                f"non-positive transport coefficient (kappa1={k1:.3e}, "
                f"kappa2={k2:.3e}); the assembled operator is unusable")
        op._kappas = (k1, k2)
    return op._kappas


def apply_Q(quad: CollisionQuadrature, F1, F2):
    """Hard-sphere bilinear collision term (gain minus loss), gather form."""
    return quad.q_bilinear(F1, F2)


def gamma_bilinear(quad: CollisionQuadrature, f, g):
    """Maxwellian-normalized collision form; conservative quadrature."""
    return quad.gamma(f, g)


def _coercivity(op: LinearizedOperator, tol: float = 1e-6,
                max_iter: int = 500) -> float:
    """Smallest Rayleigh quotient <f, Lf> / |f|_nu^2 over the orthogonal
    complement of the invariants, by inverse-power iteration."""
    ctx = op.ctx
    rng = np.random.default_rng(421)
    x = rng.standard_normal(op.grid.n_nodes)
    x -= ctx.project(x)
    lam_old = np.inf
    lam = np.inf
    for _ in range(max_iter):
        nx2 = ctx.inner(x, op.nu * x)
        lam = float(ctx.inner(x, op.apply_L(x)) / nx2)
        if abs(lam - lam_old) <= tol * abs(lam):
            break
        lam_old = lam
        y = op.nu * x
        y -= ctx.project(y)
        y = op.solve_Linv(y)
        y -= ctx.project(y)
        x = y / ctx.norm(y)
    if not lam > 0:
        raise SolverFailure(f"coercivity estimate {lam:.3e} is not positive")
    return lam
