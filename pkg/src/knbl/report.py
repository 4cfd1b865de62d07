"""Structured run reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

VERSION = "0.1.0"


@dataclass
class SolveReport:
    """Outcome of an iterative solve.

    ``timing`` stays in memory only; serialized outputs must be byte-identical
    across reruns of the same configuration, so wall-clock values are excluded
    from :meth:`manifest_dict`.
    """

    converged: bool
    iterations: int
    residual_history: np.ndarray
    decay_fit: Optional[Any] = None
    conservation_drift: Optional[float] = None
    farfield: Optional[Any] = None
    timing: Optional[float] = None
    config_echo: dict = field(default_factory=dict)
    version: str = VERSION
    extras: dict = field(default_factory=dict)

    def manifest_dict(self) -> dict:
        out = {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "residual_first": float(self.residual_history[0]) if len(self.residual_history) else 0.0,
            "residual_last": float(self.residual_history[-1]) if len(self.residual_history) else 0.0,
            "version": self.version,
        }
        if self.conservation_drift is not None:
            out["conservation_drift"] = float(self.conservation_drift)
        if self.decay_fit is not None:
            df = self.decay_fit
            out["decay_fit"] = {
                "sigma_fit": None if df.identically_zero else float(df.sigma_fit),
                "r_squared": None if df.identically_zero else float(df.r_squared),
                "identically_zero": bool(df.identically_zero),
            }
        if self.farfield is not None:
            out["farfield"] = self.farfield.as_dict()
        for k, v in self.extras.items():
            if isinstance(v, (bool, int, str)):
                out[k] = v
            elif isinstance(v, float):
                out[k] = float(v)
        out["config"] = dict(self.config_echo)
        return out
