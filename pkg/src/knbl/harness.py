"""Batch orchestration: build the discrete stack from a configuration, run a
registered case, export deterministic output trees."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io as kio
from .cases import (generic_farfield_data, generic_nonlinear_data,
                    manufactured_case, mms_convergence)
from .collision import assemble_K, kappas, make_sphere_rule
from .config import RunConfig
from .diagnostics import conservation_report, fit_decay_rate
from .farfield import d_convergence_study, far_field_G
from .gaussian import (MaxwellianContext, WeightSpec, build_context,
                       moment_functionals, verify_gaussian_moments, weight)
from .grid import build_grid
from .nonlinear import NonlinearProblem, solve_nonlinear
from .slab import SlabGrid, solve_linear_slab


class Stack:
    """Discrete machinery for one configuration."""

    def __init__(self, cfg: RunConfig, need_operator: bool = True):
        self.cfg = cfg
        self.grid = build_grid(cfg.n_per_axis, cfg.v_max, cfg.stagger)
        self.ctx = build_context(self.grid)
        self.rule = make_sphere_rule(cfg.sphere_polar, cfg.sphere_azimuth)
        self.weight_spec = WeightSpec(cfg.beta, cfg.varpi)
        self.fun = moment_functionals(self.ctx)
        self.op = None
        if need_operator:
            self.op = assemble_K(self.grid, self.ctx, self.rule,
                                 node_cap=cfg.node_cap)

    def slab(self) -> SlabGrid:
        return SlabGrid.uniform(self.cfg.d, self.cfg.n_x)

    def base_manifest(self) -> dict:
        m = {
            "config": self.cfg.echo(),
            "grid_signature": self.grid.signature(),
            "sphere_nodes": self.rule.node_count,
            "min_abs_v3": self.grid.min_abs_v3,
            "version": "0.1.0",
        }
        if self.op is not None:
            k1, k2 = kappas(self.op, self.fun)
            c1, C1 = self.op.nu_bounds
            m.update({
                "kappa1": k1,
                "kappa2": k2,
                "c0_estimate": self.op.c0_estimate,
                "nu_lower_fit": c1,
                "nu_upper_fit": C1,
                "null_defect_max": float(self.op.null_defects().max()),
                "raw_null_defect_max": float(self.op.raw_null_defects.max()),
            })
        return m


def _outdir(cfg: RunConfig) -> Path:
    return kio.output_root(cfg.output_dir)


def run_check_operator(cfg: RunConfig) -> int:
    st = Stack(cfg, need_operator=True)
    rows = verify_gaussian_moments(st.ctx)
    out = _outdir(cfg)
    kio.write_identities_csv(out / "identities.csv", rows)
    manifest = st.base_manifest()
    passed = True
    for label, computed, expected, defect in rows:
        tol = max(1e-3, 1e-3 * abs(expected))
        passed &= defect <= tol
    manifest["moment_identities_pass"] = bool(passed)
    nd = float(st.op.null_defects().max())
    sym = float(np.abs(st.op.K - st.op.K.T).max() / np.abs(st.op.K).max())
    manifest["K_symmetry_defect"] = sym
    passed &= nd <= 1e-12 and sym <= 1e-8
    passed &= manifest["kappa1"] > 0 and manifest["kappa2"] > 0
    passed &= manifest["c0_estimate"] > 0
    manifest["passed"] = bool(passed)
    kio.write_manifest(out / "manifest.json", manifest)
    return 0 if passed else 1


def _export_field(cfg, st: Stack, slab, field, stem: str):
    out = _outdir(cfg)
    w_v = weight(st.grid.nodes, st.weight_spec)
    kio.write_field_csv(out / f"{stem}.csv", slab, st.grid, field.values,
                        field.values * w_v)
    profile, drift = conservation_report(st.ctx, slab, field)
    kio.write_moments_csv(out / f"{stem}_moments.csv", slab, profile)
    return drift


def run_solve_linear(cfg: RunConfig) -> int:
    st = Stack(cfg)
    slab = st.slab()
    problem, exact = manufactured_case(
        cfg.case if cfg.case in ("zero_data", "mms_linear") else "zero_data",
        st.ctx, slab, st.op, p_E0=cfg.p_E0, epsilon=cfg.epsilon,
        decay=cfg.case_decay, amplitude=cfg.case_amplitude)
    field, report = solve_linear_slab(st.ctx, slab, st.op, problem,
                                      tol=cfg.tol, max_iter=cfg.max_iter,
                                      weight_spec=st.weight_spec)
    drift = _export_field(cfg, st, slab, field, "field")
    report.conservation_drift = drift
    manifest = st.base_manifest()
    manifest["report"] = report.manifest_dict()
    if exact is not None:
        manifest["sup_error_vs_exact"] = float(
            np.abs(field.values - exact.values).max())
    kio.write_manifest(_outdir(cfg) / "manifest.json", manifest)
    return 0 if report.converged else 1


def run_solve_farfield(cfg: RunConfig) -> int:
    st = Stack(cfg)
    slab = st.slab()
    g, r = generic_farfield_data(st.ctx, slab, amplitude=cfg.case_amplitude,
                                 decay=cfg.case_decay,
                                 seed=cfg.seed if cfg.seed else None)
    tilde, state, report = far_field_G(st.ctx, slab, st.op, st.fun, g, r,
                                       p_E0=cfg.p_E0, epsilon=cfg.epsilon,
                                       tol=cfg.tol, max_iter=cfg.max_iter,
                                       weight_spec=st.weight_spec)
    drift = _export_field(cfg, st, slab, tilde, "tilde_field")
    report.conservation_drift = drift
    kio.write_farfield_csv(_outdir(cfg) / "farfield.csv", [(slab.d, state)])
    manifest = st.base_manifest()
    manifest["report"] = report.manifest_dict()
    kio.write_manifest(_outdir(cfg) / "manifest.json", manifest)
    ok = report.converged and report.decay_fit is not None \
        and not report.decay_fit.identically_zero \
        and report.decay_fit.sigma_fit > 0
    return 0 if ok else 1


def run_solve_nonlinear(cfg: RunConfig) -> int:
    st = Stack(cfg)
    slab = st.slab()
    S, R = generic_nonlinear_data(st.ctx, slab, scale=cfg.case_scale,
                                  decay=cfg.case_decay,
                                  seed=cfg.seed if cfg.seed else None)
    problem = NonlinearProblem(S=S, R=R, p_E0=cfg.p_E0, epsilon=cfg.epsilon,
                               sigma0=cfg.sigma0, weight_spec=st.weight_spec)
    field, state, report = solve_nonlinear(st.ctx, slab, st.op, st.fun,
                                           problem, tol=cfg.tol,
                                           inner_max_iter=cfg.max_iter * 8)
    drift = _export_field(cfg, st, slab, field, "nonlinear_field")
    report.conservation_drift = drift
    kio.write_history_csv(_outdir(cfg) / "history.csv",
                          report.extras["picard_table"])
    kio.write_farfield_csv(_outdir(cfg) / "farfield.csv", [(slab.d, state)])
    manifest = st.base_manifest()
    manifest["report"] = report.manifest_dict()
    kio.write_manifest(_outdir(cfg) / "manifest.json", manifest)
    return 0 if report.converged else 1


def run_d_study(cfg: RunConfig) -> int:
    st = Stack(cfg)

    def g_of_x(x_nodes):
        slab = SlabGrid(x_nodes)
        g, _ = generic_farfield_data(st.ctx, slab, amplitude=cfg.case_amplitude,
                                     decay=cfg.case_decay,
                                     seed=cfg.seed if cfg.seed else None)
        return g

    ref = SlabGrid.uniform(cfg.d_list[0], 8)
    _, r = generic_farfield_data(st.ctx, ref, amplitude=cfg.case_amplitude,
                                 decay=cfg.case_decay,
                                 seed=cfg.seed if cfg.seed else None)
    study = d_convergence_study(st.ctx, st.op, st.fun, g_of_x, r, cfg.d_list,
                                nx_per_unit=cfg.nx_per_unit, p_E0=cfg.p_E0,
                                epsilon=cfg.epsilon, tol=cfg.tol,
                                max_iter=cfg.max_iter,
                                weight_spec=st.weight_spec)
    kio.write_farfield_csv(_outdir(cfg) / "dstudy.csv",
                           list(zip(study["d"], study["states"])))
    manifest = st.base_manifest()
    manifest["gaps"] = [float(g) for g in study["gaps"]]
    manifest["fitted_ratio"] = study["fitted_ratio"]
    kio.write_manifest(_outdir(cfg) / "manifest.json", manifest)
    gaps = study["gaps"]
    ok = all(b < a for a, b in zip(gaps, gaps[1:])) and study["fitted_ratio"] < 1
    return 0 if ok else 1


def run_mms(cfg: RunConfig) -> int:
    st = Stack(cfg)
    study = mms_convergence(st.ctx, st.op, cfg.mms_d, cfg.mms_nx_list,
                            p_E0=cfg.p_E0, epsilon=cfg.epsilon,
                            decay=cfg.case_decay, weight_spec=st.weight_spec)
    kio.write_mms_csv(_outdir(cfg) / "mms.csv", study)
    manifest = st.base_manifest()
    manifest["fitted_order"] = study["order"]
    kio.write_manifest(_outdir(cfg) / "manifest.json", manifest)
    return 0 if 0.8 <= study["order"] <= 1.2 else 1


_RUNNERS = {
    "zero_data": run_solve_linear,
    "mms_linear": run_solve_linear,
    "farfield_generic": run_solve_farfield,
    "nonlinear_generic": run_solve_nonlinear,
}


def run_case(cfg: RunConfig) -> int:
    """Dispatch the configured case to its pipeline; returns the exit code."""
    return _RUNNERS[cfg.case](cfg)
