"""Hybrid global minimization over box-constrained spaces.

The driver is DE/rand/1/bin differential evolution run in normalized
coordinates (each box coordinate mapped to [0, 1], through log space where
flagged), followed by a derivative-free Nelder-Mead polish of the best
member.  Non-finite objective values are treated as +infinity penalties so a
single pathological candidate can never poison the population, and the whole
procedure is deterministic given the config seed.

Objectives may optionally supply a batch form evaluating a (P, d) stack of
candidates in one call; with an ODE-solver objective this turns a generation
into one vectorized integration, which is the difference between minutes and
hours for the Monte-Carlo harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from .rng import substream

__all__ = ["SearchSpace", "OptimizerConfig", "MinimizeResult", "minimize", "refine_local"]


@dataclass(frozen=True)
class SearchSpace:
    """Componentwise box with linear or log coordinate mapping."""

    lower: np.ndarray
    upper: np.ndarray
    scale: tuple  # 'linear' | 'log' per coordinate
    names: tuple = ()

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValueError("lower/upper must be 1-D arrays of equal length")
        if len(self.scale) != lo.size:
            raise ValueError("need one scale flag per coordinate")
        for s in self.scale:
            if s not in ("linear", "log"):
                raise ValueError(f"unknown scale {s!r}; expected 'linear' or 'log'")
        if np.any(hi <= lo):
            raise ValueError("need upper > lower componentwise")
        log_mask = np.asarray([s == "log" for s in self.scale])
        if np.any(log_mask & (lo <= 0.0)):
            raise ValueError("log-scaled coordinates require lower > 0")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "scale", tuple(self.scale))
        names = tuple(self.names) if self.names else tuple(f"x{i}" for i in range(lo.size))
        if len(names) != lo.size:
            raise ValueError("need one name per coordinate")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_log_mask", log_mask)
        # np.where still evaluates log() on linear coordinates, whose bounds
        # may legally be zero or negative; silence those lanes.
        with np.errstate(divide="ignore", invalid="ignore"):
            glo = np.where(log_mask, np.log(lo), lo)
            ghi = np.where(log_mask, np.log(hi), hi)
        object.__setattr__(self, "_glo", glo)
        object.__setattr__(self, "_gspan", ghi - glo)

    @property
    def dim(self) -> int:
        return int(self.lower.size)

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        """Map box points (..., d) onto the unit cube."""
        x = np.asarray(x, dtype=float)
        g = np.where(self._log_mask, np.log(np.maximum(x, 1e-300)), x)
        return (g - self._glo) / self._gspan

    def from_unit(self, z: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_unit`; clips to the cube first."""
        z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
        g = self._glo + z * self._gspan
        return np.where(self._log_mask, np.exp(g), g)

    def contains(self, x: np.ndarray, rtol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        slack = rtol * (self.upper - self.lower)
        return bool(np.all(x >= self.lower - slack) and np.all(x <= self.upper + slack))


@dataclass(frozen=True)
class OptimizerConfig:
    """DE + refinement settings; ``population=None`` means 15 * dimension.

    ``init_center``/``init_radius`` warm-start the population inside a cube
    neighborhood (unit coordinates) of a previous solution; the center itself
    is always a member, so a warm restart can only improve on it.
    """

    population: Optional[int] = None
    de_weight: float = 0.8
    crossover: float = 0.9
    max_generations: int = 300
    stall_generations: int = 30
    stall_tolerance: float = 1e-8
    refine: bool = True
    refine_tol: float = 1e-9
    seed: int = 0
    init_center: Optional[np.ndarray] = None
    init_radius: float = 0.1

    def __post_init__(self):
        if self.population is not None and self.population < 4:
            raise ValueError("DE/rand/1 mutation needs a population of at least 4")
        if not (0.0 < self.de_weight < 2.0):
            raise ValueError("de_weight must lie in (0, 2)")
        if not (0.0 <= self.crossover <= 1.0):
            raise ValueError("crossover must lie in [0, 1]")
        if self.max_generations < 1:
            raise ValueError("max_generations must be >= 1")
        if self.stall_generations < 1:
            raise ValueError("stall_generations must be >= 1")
        if self.stall_tolerance < 0:
            raise ValueError("stall_tolerance must be >= 0")
        if not (0.0 < self.init_radius <= 1.0):
            raise ValueError("init_radius must lie in (0, 1]")
        if self.init_center is not None:
            object.__setattr__(
                self, "init_center", np.asarray(self.init_center, dtype=float)
            )

    def population_for(self, dim: int) -> int:
        return self.population if self.population is not None else 15 * dim


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    trace: np.ndarray  # best objective after each generation (index 0 = initial pop)
    n_evaluations: int
    n_generations: int
    stalled: bool
    refined: bool
    diagnostics: dict = field(default_factory=dict)


def _sanitize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.where(np.isfinite(values), values, np.inf)


def minimize(
    objective: Callable[[np.ndarray], float],
    space: SearchSpace,
    config: OptimizerConfig = OptimizerConfig(),
    batch_objective: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> MinimizeResult:
    """DE/rand/1/bin over the mapped box, then local simplex refinement.

    ``batch_objective(X)`` with X of shape (P, d) must agree with
    ``objective`` row by row; when provided it is used for all population
    evaluations.  Identical seeds give identical traces and minimizers.
    """
    d = space.dim
    pop_size = config.population_for(d)
    if pop_size < 4:
        raise ValueError("population must be at least 4")
    rng = substream(config.seed)
    evals = 0

    def evaluate(Z: np.ndarray) -> np.ndarray:
        nonlocal evals
        X = space.from_unit(Z)
        if batch_objective is not None:
            vals = _sanitize(batch_objective(X))
        else:
            vals = _sanitize([objective(x) for x in X])
        evals += Z.shape[0]
        return vals

    if config.init_center is not None:
        center = np.clip(space.to_unit(config.init_center), 0.0, 1.0)
        spread = config.init_radius * (2.0 * rng.random((pop_size, d)) - 1.0)
        Z = np.clip(center[None, :] + spread, 0.0, 1.0)
        Z[0] = center
    else:
        Z = rng.random((pop_size, d))
    fitness = evaluate(Z)

    best_idx = int(np.argmin(fitness))
    trace = [float(fitness[best_idx])]
    stalled = False
    F = config.de_weight
    CR = config.crossover
    generations = 0

    for gen in range(config.max_generations):
        generations = gen + 1
        # Index pools r1 != r2 != r3 != i, drawn per member.
        trial = np.empty_like(Z)
        for i in range(pop_size):
            choices = rng.choice(pop_size - 1, size=3, replace=False)
            choices = np.where(choices >= i, choices + 1, choices)
            r1, r2, r3 = choices
            mutant = np.clip(Z[r1] + F * (Z[r2] - Z[r3]), 0.0, 1.0)
            cross = rng.random(d) < CR
            cross[rng.integers(d)] = True
            trial[i] = np.where(cross, mutant, Z[i])
        trial_fit = evaluate(trial)
        better = trial_fit <= fitness
        Z[better] = trial[better]
        fitness[better] = trial_fit[better]
        best_idx = int(np.argmin(fitness))
        trace.append(float(fitness[best_idx]))

        w = config.stall_generations
        if len(trace) > w:
            old, new = trace[-1 - w], trace[-1]
            if not math.isinf(old) and old - new <= config.stall_tolerance * (1.0 + abs(old)):
                stalled = True
                break

    best_x = space.from_unit(Z[best_idx])
    best_val = float(fitness[best_idx])

    refined = False
    if config.refine:
        rx, rv, rn = _refine_unit(objective, Z[best_idx], space, config.refine_tol, None)
        evals += rn
        if rv <= best_val:
            best_x, best_val = rx, rv
            refined = True

    return MinimizeResult(
        x=best_x,
        value=best_val,
        trace=np.asarray(trace),
        n_evaluations=evals,
        n_generations=generations,
        stalled=stalled,
        refined=refined,
        diagnostics={"population": pop_size},
    )


def _refine_unit(
    objective: Callable[[np.ndarray], float],
    z0: np.ndarray,
    space: SearchSpace,
    tol: float,
    max_evals: Optional[int],
) -> tuple[np.ndarray, float, int]:
    d = space.dim

    def f(z: np.ndarray) -> float:
        val = objective(space.from_unit(z))
        return float(val) if np.isfinite(val) else 1e300

    res = scipy_minimize(
        f,
        np.clip(z0, 0.0, 1.0),
        method="Nelder-Mead",
        bounds=[(0.0, 1.0)] * d,
        options={
            "xatol": tol,
            "fatol": 1e30,  # terminate on simplex diameter, not value spread
            "maxfev": max_evals if max_evals is not None else 500 * d,
            "disp": False,
        },
    )
    return space.from_unit(res.x), float(res.fun), int(res.nfev)


def refine_local(
    objective: Callable[[np.ndarray], float],
    start: np.ndarray,
    space: SearchSpace,
    tol: float = 1e-9,
    max_evals: Optional[int] = None,
) -> tuple[np.ndarray, float]:
    """Nelder-Mead from ``start``, confined to the box; never worse than start.

    Stops when the simplex diameter (normalized coordinates) drops below
    ``tol`` or after ``max_evals`` (default 500 * d) objective calls.
    """
    start = np.asarray(start, dtype=float)
    if not space.contains(start):
        raise ValueError("start point lies outside the search box")
    z0 = np.clip(space.to_unit(start), 0.0, 1.0)
    x, val, _ = _refine_unit(objective, z0, space, tol, max_evals)
    f0 = objective(start)
    f0 = float(f0) if np.isfinite(f0) else np.inf
    if val > f0:
        return start, f0
    return x, val
