"""Run configuration: a flat ``section.key = value`` text format.

The format is deliberately line-oriented (no nesting, no quoting rules) so
configs stay human-diffable and trivially versionable.  ``#`` starts a
comment, blank lines are ignored, and every key must belong to the known
schema -- unknown keys are rejected with the offending line number so typos
cannot silently fall back to defaults.

Multi-valued entries (initial state, quantiles, bound overrides) use
space-separated tokens, e.g. ``space.N = 100 10000 log``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .estimator import ETA_MODES, default_space
from .models import OdeSystem, decay_system, hiv_system, scenario
from .optimize import OptimizerConfig, SearchSpace
from .splines import SplineConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config_text",
    "read_config",
    "make_system",
    "make_spline",
    "make_optimizer",
    "make_space",
]

_SCENARIOS = ("i", "ii", "iii", "iv", "complex")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Validated settings for one CLI invocation.

    Defaults reproduce the desk-scale setup; every field can be overridden
    from the config file and a few (seed, output dir, replicates, threads)
    additionally from command-line flags.
    """

    # model
    system: str = "hiv"
    rho: float = 0.108
    delta: float = 0.5
    x0: Optional[tuple] = None          # None -> system default
    t0: Optional[float] = None
    t_end: Optional[float] = None

    # scenario (data generation)
    scenario_id: Optional[str] = None
    noise: Optional[float] = None       # None -> scenario default
    data_seed: int = 0
    truth_h: float = 0.005

    # solver used inside the objective
    method: str = "rk4"
    h: float = 0.05

    # fitted eta model
    eta_mode: str = "constant"

    # sieve for spline eta modes
    spline_order: int = 4
    spline_knots: int = 1               # interior knots
    spline_scale: str = "linear"
    coef_bound: float = 1e-3

    # search-box overrides: name -> (lower, upper, scale)
    space: dict = field(default_factory=dict)

    # optimizer
    population: int = 0                 # 0 -> 15 * dimension
    generations: int = 300
    de_weight: float = 0.8
    crossover: float = 0.9
    stall_generations: int = 30
    stall_tolerance: float = 1e-8
    refine: bool = True
    refine_tol: float = 1e-9
    seed: int = 0
    init_radius: float = 0.1

    # inference
    bootstrap_b: int = 200
    quantiles: tuple = (0.025, 0.975)
    information: bool = True

    # spline selection sweep
    select_orders: tuple = (3, 4)
    select_counts: tuple = (3, 10)      # basis-count range, inclusive

    # Monte-Carlo study
    replicates: int = 50
    study_seed: int = 0
    study_grid: str = "both"            # small | large | both
    threads: int = 0                    # 0 -> available parallelism

    out_dir: str = "out"

    def validate(self) -> None:
        if self.system not in ("hiv", "decay"):
            raise ConfigError(f"model.system must be 'hiv' or 'decay', got {self.system!r}")
        if self.scenario_id is not None and self.scenario_id not in _SCENARIOS:
            raise ConfigError(
                f"scenario.id must be one of {_SCENARIOS}, got {self.scenario_id!r}"
            )
        if self.noise is not None and not (0.0 <= self.noise < 1.0):
            raise ConfigError(f"scenario.noise must lie in [0, 1), got {self.noise}")
        if self.truth_h <= 0:
            raise ConfigError("scenario.truth_h must be positive")
        if self.method not in ("rk4", "euler"):
            raise ConfigError(f"solver.method must be 'rk4' or 'euler', got {self.method!r}")
        if self.h <= 0:
            raise ConfigError(f"solver.h must be positive, got {self.h}")
        if self.eta_mode not in ETA_MODES:
            raise ConfigError(f"fit.eta_mode must be one of {ETA_MODES}, got {self.eta_mode!r}")
        if self.spline_order < 2:
            raise ConfigError("spline.order must be at least 2")
        if self.spline_knots < 0:
            raise ConfigError("spline.knots must be non-negative")
        if self.spline_scale not in ("linear", "log_shifted"):
            raise ConfigError(
                f"spline.scale must be 'linear' or 'log_shifted', got {self.spline_scale!r}"
            )
        if self.coef_bound <= 0:
            raise ConfigError("spline.coef_bound must be positive")
        for name, (lo, hi, sc) in self.space.items():
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"space.{name}: need finite lower < upper, got {lo} {hi}")
            if sc == "log" and lo <= 0:
                raise ConfigError(f"space.{name}: log scale needs a positive lower bound")
        if self.population < 0:
            raise ConfigError("optimizer.population must be >= 0 (0 means automatic)")
        if self.generations < 1:
            raise ConfigError("optimizer.generations must be >= 1")
        if self.bootstrap_b < 1:
            raise ConfigError("inference.bootstrap must be >= 1")
        qlo, qhi = self.quantiles
        if not (0.0 < qlo < qhi < 1.0):
            raise ConfigError(f"inference.quantiles must satisfy 0 < lo < hi < 1, got {qlo} {qhi}")
        if any(o < 2 for o in self.select_orders):
            raise ConfigError("select.orders entries must be >= 2")
        clo, chi = self.select_counts
        if not (1 <= clo <= chi):
            raise ConfigError(f"select.counts must be an increasing range, got {clo} {chi}")
        if self.replicates < 10:
            raise ConfigError("study.replicates must be at least 10")
        if self.study_grid not in ("small", "large", "both"):
            raise ConfigError(
                f"study.grid must be 'small', 'large' or 'both', got {self.study_grid!r}"
            )
        if self.threads < 0:
            raise ConfigError("study.threads must be >= 0 (0 means available parallelism)")
        for s in (self.seed, self.data_seed, self.study_seed):
            if s < 0:
                raise ConfigError("seeds must be non-negative")
        if self.x0 is not None and len(self.x0) == 0:
            raise ConfigError("model.x0 must list at least one component")
        if (self.t0 is None) != (self.t_end is None):
            raise ConfigError("model.t0 and model.t_end must be given together")
        if self.t0 is not None and not (self.t0 < self.t_end):
            raise ConfigError("model.t0 must be below model.t_end")


def _to_bool(tok: str) -> bool:
    low = tok.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {tok!r}")


def _to_floats(tok: str, n: Optional[int] = None) -> tuple:
    parts = tok.split()
    if n is not None and len(parts) != n:
        raise ValueError(f"expected {n} numbers, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _to_ints(tok: str, n: Optional[int] = None) -> tuple:
    parts = tok.split()
    if n is not None and len(parts) != n:
        raise ValueError(f"expected {n} integers, got {len(parts)}")
    return tuple(int(p) for p in parts)


# section.key -> (RunConfig attribute, converter)
_SCHEMA = {
    "model.system": ("system", str),
    "model.rho": ("rho", float),
    "model.delta": ("delta", float),
    "model.x0": ("x0", _to_floats),
    "model.t0": ("t0", float),
    "model.t_end": ("t_end", float),
    "scenario.id": ("scenario_id", str),
    "scenario.noise": ("noise", float),
    "scenario.seed": ("data_seed", int),
    "scenario.truth_h": ("truth_h", float),
    "solver.method": ("method", str),
    "solver.h": ("h", float),
    "fit.eta_mode": ("eta_mode", str),
    "spline.order": ("spline_order", int),
    "spline.knots": ("spline_knots", int),
    "spline.scale": ("spline_scale", str),
    "spline.coef_bound": ("coef_bound", float),
    "optimizer.population": ("population", int),
    "optimizer.generations": ("generations", int),
    "optimizer.de_weight": ("de_weight", float),
    "optimizer.crossover": ("crossover", float),
    "optimizer.stall_generations": ("stall_generations", int),
    "optimizer.stall_tolerance": ("stall_tolerance", float),
    "optimizer.refine": ("refine", _to_bool),
    "optimizer.refine_tol": ("refine_tol", float),
    "optimizer.seed": ("seed", int),
    "optimizer.init_radius": ("init_radius", float),
    "inference.bootstrap": ("bootstrap_b", int),
    "inference.quantiles": ("quantiles", lambda s: _to_floats(s, 2)),
    "inference.information": ("information", _to_bool),
    "select.orders": ("select_orders", _to_ints),
    "select.counts": ("select_counts", lambda s: _to_ints(s, 2)),
    "study.replicates": ("replicates", int),
    "study.seed": ("study_seed", int),
    "study.grid": ("study_grid", str),
    "study.threads": ("threads", int),
    "output.dir": ("out_dir", str),
}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse and fully validate config text; raises :class:`ConfigError`."""
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not value:
            raise ConfigError(f"{source}:{lineno}: missing value for {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        if key.startswith("space."):
            name = key[len("space."):]
            if not name:
                raise ConfigError(f"{source}:{lineno}: empty parameter name in {key!r}")
            parts = value.split()
            if len(parts) not in (2, 3):
                raise ConfigError(
                    f"{source}:{lineno}: space bounds need 'lower upper [linear|log]'"
                )
            try:
                lo, hi = float(parts[0]), float(parts[1])
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: non-numeric bound in {value!r}") from None
            sc = parts[2] if len(parts) == 3 else "linear"
            if sc not in ("linear", "log"):
                raise ConfigError(f"{source}:{lineno}: bound scale must be 'linear' or 'log'")
            cfg.space[name] = (lo, hi, sc)
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        attr, conv = _SCHEMA[key]
        try:
            setattr(cfg, attr, conv(value))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg.validate()
    return cfg


def read_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, source=path)


def make_system(cfg: RunConfig) -> OdeSystem:
    """Instantiate the configured dynamic system."""
    if cfg.system == "hiv":
        kwargs = {"rho": cfg.rho, "delta": cfg.delta}
        if cfg.x0 is not None:
            if len(cfg.x0) != 3:
                raise ConfigError("model.x0 for the hiv system needs 3 components")
            kwargs["initial_state"] = cfg.x0
        if cfg.t0 is not None:
            kwargs["t_span"] = (cfg.t0, cfg.t_end)
        return hiv_system(**kwargs)
    kwargs = {}
    if cfg.x0 is not None:
        if len(cfg.x0) != 1:
            raise ConfigError("model.x0 for the decay system needs 1 component")
        kwargs["x0"] = cfg.x0[0]
    if cfg.t0 is not None:
        kwargs["t_span"] = (cfg.t0, cfg.t_end)
    return decay_system(**kwargs)


def make_spline(cfg: RunConfig, system: OdeSystem) -> Optional[SplineConfig]:
    """Sieve configuration over the system interval; None for non-spline modes."""
    if cfg.eta_mode not in ("spline", "centered_spline"):
        return None
    return SplineConfig(
        t0=system.t0,
        t_end=system.t_end,
        interior_knots=cfg.spline_knots,
        order=cfg.spline_order,
        knot_scale=cfg.spline_scale,
        coef_bound=cfg.coef_bound,
    )


def make_optimizer(cfg: RunConfig, seed: Optional[int] = None) -> OptimizerConfig:
    return OptimizerConfig(
        population=cfg.population or None,
        de_weight=cfg.de_weight,
        crossover=cfg.crossover,
        max_generations=cfg.generations,
        stall_generations=cfg.stall_generations,
        stall_tolerance=cfg.stall_tolerance,
        refine=cfg.refine,
        refine_tol=cfg.refine_tol,
        seed=cfg.seed if seed is None else seed,
        init_radius=cfg.init_radius,
    )


def make_space(
    cfg: RunConfig,
    system: OdeSystem,
    eta_mode: Optional[str] = None,
    spline: Optional[SplineConfig] = None,
) -> SearchSpace:
    """Default search box for the fit, with config overrides applied.

    ``space.alpha`` overrides every spline-coefficient coordinate at once;
    any other name must match one free parameter of the system exactly.
    """
    mode = cfg.eta_mode if eta_mode is None else eta_mode
    base = default_space(system, mode, spline)
    lower = base.lower.copy()
    upper = base.upper.copy()
    scale = list(base.scale)
    names = base.names
    for name, (lo, hi, sc) in cfg.space.items():
        if name == "alpha":
            idx = [i for i, nm in enumerate(names) if nm.startswith("alpha")]
        else:
            idx = [i for i, nm in enumerate(names) if nm == name]
        if not idx:
            known = sorted({nm.rstrip("0123456789") for nm in names})
            raise ConfigError(
                f"space.{name} does not match a free parameter (have {known})"
            )
        for i in idx:
            lower[i], upper[i], scale[i] = lo, hi, sc
    return SearchSpace(lower=lower, upper=upper, scale=tuple(scale), names=names)


def config_summary(cfg: RunConfig) -> str:
    """Canonical one-line-per-field rendering used by run logs."""
    rows = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name == "space":
            for nm in sorted(val):
                lo, hi, sc = val[nm]
                rows.append(f"space.{nm} = {float(lo)!r} {float(hi)!r} {sc}")
            continue
        rows.append(f"{f.name} = {val!r}")
    return "\n".join(rows) + "\n"
