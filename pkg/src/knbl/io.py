"""Deterministic CSV and manifest writers.

Numbers are rendered with 17 significant digits; row order is fixed (x-major,
node-index-minor), so identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np


def _g17(x) -> str:
    return format(float(x), ".17g")


def output_root(configured: str) -> Path:
    """Resolve the output directory, honoring the KNBL_OUT root env var."""
    root = os.environ.get("KNBL_OUT")
    p = Path(configured)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _write_rows(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return path


def write_field_csv(path, slab, grid, values, w_values):
    """Field snapshot: one row per (x edge, velocity node)."""
    V = grid.nodes

    def rows():
        for m, x in enumerate(slab.x_nodes):
            xs = _g17(x)
            fv = values[m]
            wv = w_values[m]
            for j in range(grid.n_nodes):
                yield (xs, _g17(V[j, 0]), _g17(V[j, 1]), _g17(V[j, 2]),
                       _g17(fv[j]), _g17(wv[j]))

    return _write_rows(Path(path), ("x", "v1", "v2", "v3", "f", "wf"), rows())


def write_moments_csv(path, slab, profile):
    """Flux-moment profile: (x, mass_flux, mom1, mom2, mom3, energy_flux)."""
    def rows():
        for m, x in enumerate(slab.x_nodes):
            yield (_g17(x),) + tuple(_g17(profile[m, k]) for k in range(5))

    header = ("x", "mass_flux", "mom1", "mom2", "mom3", "energy_flux")
    return _write_rows(Path(path), header, rows())


def write_farfield_csv(path, entries):
    """Far-field rows keyed by slab length."""
    header = ("d", "phi0", "phi1", "phi2", "phi3", "b1_inf", "b2_inf", "c_inf")

    def rows():
        for d, st in entries:
            yield ((_g17(d),) + tuple(_g17(p) for p in st.phi)
                   + (_g17(st.b_inf[0]), _g17(st.b_inf[1]), _g17(st.c_inf)))

    return _write_rows(Path(path), header, rows())


def write_identities_csv(path, rows_in):
    def rows():
        for label, computed, expected, defect in rows_in:
            yield (label, _g17(computed), _g17(expected), _g17(defect))

    return _write_rows(Path(path), ("identity", "computed", "expected", "defect"),
                       rows())


def write_history_csv(path, table):
    """Nonlinear iteration history: (iter, diff, b1_inf, b2_inf, c_inf)."""
    def rows():
        for it, diff, b1, b2, c in table:
            yield (str(int(it)), _g17(diff), _g17(b1), _g17(b2), _g17(c))

    return _write_rows(Path(path), ("iter", "diff", "b1_inf", "b2_inf", "c_inf"),
                       rows())


def write_mms_csv(path, study):
    def rows():
        for n_x, dx, err in zip(study["nx"], study["dx"], study["error"]):
            yield (str(int(n_x)), _g17(dx), _g17(err))

    return _write_rows(Path(path), ("n_x", "dx", "sup_error"), rows())


def write_manifest(path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
