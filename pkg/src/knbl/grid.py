"""Truncated 3D velocity lattice: nodes, quadrature weights, specular map, interpolation.

The lattice is a uniform tensor grid with midpoint (equal-volume) weights.  By
default every axis is staggered by half a cell so that no node has a zero
coordinate; in particular the incoming/outgoing half-grids ``v3 > 0`` and
``v3 < 0`` partition the node set and the mirror map ``v -> (v1, v2, -v3)``
permutes nodes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridConfigError(ValueError):
    """Lattice parameters out of range."""


@dataclass(frozen=True)
class VelocityGrid:
    n_per_axis: int
    v_max: float
    stagger_offset: float       # shift of the node pattern, in velocity units
    axis: np.ndarray            # (n,) shared 1D node coordinates
    nodes: np.ndarray           # (n^3, 3), axis-2 is the wall-normal component v3
    weights: np.ndarray         # (n^3,) cell volumes (uniform)
    specular: np.ndarray        # (n^3,) index map of v -> (v1, v2, -v3)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        """Lattice spacing."""
        return float(self.axis[1] - self.axis[0])

    @property
    def cell_weight(self) -> float:
        return float(self.weights[0])

    @property
    def min_abs_v3(self) -> float:
        """Smallest |v3| on the lattice; bounds the sweep factor dx/|v3|."""
        return float(np.abs(self.nodes[:, 2]).min())

    def signature(self) -> str:
        return (f"n{self.n_per_axis}_vmax{self.v_max:g}"
                f"_off{self.stagger_offset:g}")


def build_grid(n_per_axis: int, v_max: float, stagger: bool = True) -> VelocityGrid:
    """Construct the truncated velocity lattice.

    ``stagger=True`` places nodes at ``-v_max + (k + 1/2) h``; ``stagger=False``
    uses the endpoint lattice ``linspace(-v_max, v_max, n)`` and is rejected for
    odd ``n`` (it would contain zero coordinates, putting nodes on the grazing
    set).
    """
    if int(n_per_axis) != n_per_axis or n_per_axis < 4:
        raise GridConfigError(f"n_per_axis must be an integer >= 4, got {n_per_axis}")
    n = int(n_per_axis)
    if not (v_max > 0):
        raise GridConfigError(f"v_max must be positive, got {v_max}")
    if stagger:
        h = 2.0 * v_max / n
        axis = -v_max + (np.arange(n) + 0.5) * h
        offset = 0.5 * h
    else:
        if n % 2 == 1:
            raise GridConfigError("unstaggered lattice with odd n has v3 = 0 nodes")
        axis = np.linspace(-v_max, v_max, n)
        h = axis[1] - axis[0]
        offset = 0.0
    nodes = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    nodes = nodes.reshape(-1, 3)
    weights = np.full(n**3, h**3)
    # flat index is (i1*n + i2)*n + i3; mirroring v3 maps i3 -> n-1-i3
    i = np.arange(n**3)
    i3 = i % n
    specular = i - i3 + (n - 1 - i3)
    return VelocityGrid(n, float(v_max), float(offset), axis, nodes, weights, specular)


def specular_map(grid: VelocityGrid, node_index):
    """Index of the mirror node (v1, v2, -v3); involution on the node set."""
    return grid.specular[node_index]


def interpolate(grid: VelocityGrid, values: np.ndarray, v_point: np.ndarray):
    """Trilinear interpolation of a per-node array at off-grid velocities.

    Exact on functions that are affine in each coordinate.  Points outside the
    hull of the nodes contribute zero (truncation convention).  ``v_point`` may
    be a single 3-vector or an array of shape (..., 3).
    """
    values = np.asarray(values, float)
    pts = np.asarray(v_point, float)
    single = pts.ndim == 1
    p = np.atleast_2d(pts)
    n = grid.n_per_axis
    ax0, h = grid.axis[0], grid.h
    g = (p - ax0) / h
    i0 = np.floor(g).astype(np.int64)
    frac = g - i0
    inside = np.all((g >= 0.0) & (g <= n - 1.0), axis=-1)
    # clamp so the upper corner stays a valid index when g hits the last node
    i0 = np.clip(i0, 0, n - 2)
    frac = g - i0
    out = np.zeros(p.shape[0])
    w0 = 1.0 - frac
    for d1 in (0, 1):
        for d2 in (0, 1):
            for d3 in (0, 1):
                w = (np.where(d1, frac[:, 0], w0[:, 0])
                     * np.where(d2, frac[:, 1], w0[:, 1])
                     * np.where(d3, frac[:, 2], w0[:, 2]))
                idx = ((i0[:, 0] + d1) * n + (i0[:, 1] + d2)) * n + (i0[:, 2] + d3)
                out += w * values[idx]
    out = np.where(inside, out, 0.0)
    return float(out[0]) if single else out.reshape(pts.shape[:-1])
