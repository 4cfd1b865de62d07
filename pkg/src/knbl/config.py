"""Flat key-value run configuration with strict validation and exact
round-tripping (the echoed text reproduces the effective configuration)."""

from __future__ import annotations

from dataclasses import dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:            # Python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = 1

_KNOWN_CASES = ("zero_data", "mms_linear", "farfield_generic",
                "nonlinear_generic")


class ConfigError(ValueError):
    """Aggregated configuration violations."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - "
                         + "\n  - ".join(self.problems))


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    # velocity grid
    n_per_axis: int = 12
    v_max: float = 6.0
    stagger: bool = True
    sphere_polar: int = 3
    sphere_azimuth: int = 6
    node_cap: int = 20
    # slab
    d: float = 8.0
    n_x: int = 160
    # physics
    p_E0: float = 1.0
    epsilon: float = 0.0
    beta: float = 3.0
    varpi: float = 0.0
    sigma0: float = 0.5
    # solver
    tol: float = 1e-9
    max_iter: int = 500
    # case selection
    case: str = "zero_data"
    case_amplitude: float = 1.0
    case_decay: float = 1.0
    case_scale: float = 1e-2
    # studies
    d_list: tuple = (4.0, 6.0, 8.0, 10.0)
    nx_per_unit: int = 12
    mms_d: float = 2.0
    mms_nx_list: tuple = (10, 20, 40, 80)
    # output
    output_dir: str = "out"
    seed: int = 0

    def echo(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.echo().items():
            if isinstance(v, bool):
                lines.append(f"{k} = {'true' if v else 'false'}")
            elif isinstance(v, str):
                lines.append(f'{k} = "{v}"')
            elif isinstance(v, list):
                lines.append(f"{k} = [{', '.join(repr(x) for x in v)}]")
            else:
                lines.append(f"{k} = {v!r}")
        return "\n".join(lines) + "\n"


def _validate(cfg: RunConfig):
    p = []
    if cfg.schema_version != SCHEMA_VERSION:
        p.append(f"schema_version must be {SCHEMA_VERSION}, got {cfg.schema_version}")
    if not (isinstance(cfg.n_per_axis, int) and cfg.n_per_axis >= 4):
        p.append(f"n_per_axis must be an integer >= 4, got {cfg.n_per_axis}")
    if not cfg.v_max > 0:
        p.append(f"v_max must be positive, got {cfg.v_max}")
    if cfg.sphere_polar < 1 or cfg.sphere_azimuth < 2:
        p.append("sphere rule needs sphere_polar >= 1 and sphere_azimuth >= 2")
    if not cfg.d > 0:
        p.append(f"d must be positive, got {cfg.d}")
    if cfg.n_x < 2:
        p.append(f"n_x must be >= 2, got {cfg.n_x}")
    if not cfg.p_E0 > 0:
        p.append(f"p_E0 must be positive, got {cfg.p_E0}")
    if cfg.epsilon < 0:
        p.append(f"epsilon must be >= 0, got {cfg.epsilon}")
    if not cfg.beta >= 3:
        p.append(f"beta must be >= 3, got {cfg.beta}")
    if not (0 <= cfg.varpi < 0.125):
        p.append(f"varpi must lie in [0, 1/8), got {cfg.varpi}")
    if not (0 < cfg.sigma0 < 1):
        p.append(f"sigma0 must lie in (0, 1), got {cfg.sigma0}")
    if not cfg.tol > 0:
        p.append(f"tol must be positive, got {cfg.tol}")
    if cfg.max_iter < 1:
        p.append(f"max_iter must be >= 1, got {cfg.max_iter}")
    if cfg.case not in _KNOWN_CASES:
        p.append(f"unknown case {cfg.case!r}; registered: {', '.join(_KNOWN_CASES)}")
    if len(cfg.d_list) < 2 or any(b <= a for a, b in zip(cfg.d_list, cfg.d_list[1:])):
        p.append(f"d_list must increase strictly, got {list(cfg.d_list)}")
    if cfg.nx_per_unit < 1:
        p.append(f"nx_per_unit must be >= 1, got {cfg.nx_per_unit}")
    if len(cfg.mms_nx_list) < 2 or any(int(n) < 2 for n in cfg.mms_nx_list):
        p.append(f"mms_nx_list needs >= 2 entries, each >= 2, got {list(cfg.mms_nx_list)}")
    if not isinstance(cfg.seed, int):
        p.append(f"seed must be an integer, got {cfg.seed!r}")
    if p:
        raise ConfigError(p)


def parse_config(text: str) -> RunConfig:
    """Parse flat ``key = value`` text; unknown keys and all constraint
    violations are reported together."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"syntax: {e}"]) from None
    known = {f.name for f in fields(RunConfig)}
    problems = [f"unknown key {k!r}" for k in data if k not in known]
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig()
    for k, v in data.items():
        if isinstance(getattr(cfg, k), tuple):
            v = tuple(v)
        if k in ("n_per_axis", "n_x", "max_iter", "seed", "node_cap",
                 "sphere_polar", "sphere_azimuth", "nx_per_unit",
                 "schema_version") and isinstance(v, float):
            problems.append(f"{k} must be an integer, got {v!r}")
            continue
        if isinstance(getattr(cfg, k), float) and isinstance(v, int):
            v = float(v)
        setattr(cfg, k, v)
    if problems:
        raise ConfigError(problems)
    _validate(cfg)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (or start from defaults) and apply ``key=value``
    override strings."""
    text = ""
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError([f"override {ov!r} is not of the form key=value"])
        text += "\n" + ov
    return parse_config(text)
