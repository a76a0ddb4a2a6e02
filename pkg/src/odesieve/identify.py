"""Numeric identifiability checks for the HIV model.

The infection rate eta(t) can be written in closed form from either
observable channel of the HIV system (y1 = T_U + T_I, y2 = V):

    from y1:  eta = [y1'' + (rho + delta) y1' + delta rho y1 - delta lambda]
                    / [-y2 (y1' + delta y1 - lambda)]

    from y2:  eta = [y2'' + (delta + c) y2' + delta c y2]
                    / [y2 (N delta y1 - y2' - c y2)]

On a noiseless trajectory with the true constants both expressions must
reproduce the true eta(t) and therefore agree with each other; with any one
constant perturbed they disagree.  That agreement check is the computational
face of the model's at-a-point identifiability.

Output derivatives are built symbolically from the model equations
(substitution and chain rule), never by numerical differencing:

    y1'  = lambda - rho x1 - delta x2
    y1'' = -rho (lambda - rho x1 - eta x1 x3) - delta (eta x1 x3 - delta x2)
    y2'  = N delta x2 - c x3
    y2'' = N delta (eta x1 x3 - delta x2) - c (N delta x2 - c x3)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import NumericalSolution, interpolate

__all__ = [
    "HivParams",
    "OutputDerivatives",
    "output_derivatives",
    "eta_from_cell_channel",
    "eta_from_virus_channel",
]


@dataclass(frozen=True)
class HivParams:
    """The five HIV constants (free and fixed alike)."""

    lam: float
    rho: float
    N: float
    delta: float
    c: float

    def perturbed(self, name: str, factor: float) -> "HivParams":
        if not hasattr(self, name):
            raise ValueError(f"unknown parameter {name!r}")
        values = {k: getattr(self, k) for k in ("lam", "rho", "N", "delta", "c")}
        values[name] = values[name] * factor
        return HivParams(**values)


@dataclass(frozen=True)
class OutputDerivatives:
    """y1, y2 and their first two time derivatives along a trajectory."""

    times: np.ndarray
    y1: np.ndarray
    y1d: np.ndarray
    y1dd: np.ndarray
    y2: np.ndarray
    y2d: np.ndarray
    y2dd: np.ndarray


def output_derivatives(
    system, params: HivParams, solution: NumericalSolution, eta, times=None
) -> OutputDerivatives:
    """Symbolic output derivatives of the HIV system along ``solution``.

    ``eta`` is the infection rate used to produce the trajectory (callable or
    scalar); it enters the second derivatives.  ``times`` defaults to 201
    points spanning the solution grid.
    """
    if getattr(system, "name", None) != "hiv" or system.dimension != 3:
        raise ValueError("output derivatives are defined for the HIV system only")
    pts = solution.grid.points
    if times is None:
        times = np.linspace(pts[0], pts[-1], 201)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    states = interpolate(solution, times)
    x1, x2, x3 = states[:, 0], states[:, 1], states[:, 2]
    eta_vals = np.asarray([float(eta(t)) for t in times]) if callable(eta) else np.full(times.shape, float(eta))

    lam, rho, nn, delta, c = params.lam, params.rho, params.N, params.delta, params.c
    infection = eta_vals * x1 * x3
    x1d = lam - rho * x1 - infection
    x2d = infection - delta * x2
    x3d = nn * delta * x2 - c * x3

    y1 = x1 + x2
    y1d = lam - rho * x1 - delta * x2
    y1dd = -rho * x1d - delta * x2d
    y2 = x3
    y2d = nn * delta * x2 - c * x3
    y2dd = nn * delta * x2d - c * x3d
    return OutputDerivatives(times=times, y1=y1, y1d=y1d, y1dd=y1dd, y2=y2, y2d=y2d, y2dd=y2dd)


def _guarded_ratio(num: np.ndarray, den: np.ndarray, guard: float) -> tuple:
    scale = float(np.max(np.abs(num)))
    ok = np.abs(den) > guard * max(scale, 1e-300)
    values = np.full(num.shape, np.nan)
    np.divide(num, den, out=values, where=ok)
    return values, ok


def eta_from_cell_channel(od: OutputDerivatives, params: HivParams, guard: float = 1e-6) -> tuple:
    """Reconstruct eta(t) from the y1 channel.

    Returns ``(values, ok)``: NaN and ``ok=False`` wherever the denominator
    is within ``guard`` times the numerator scale of zero (ill-conditioned
    points are excluded rather than extrapolated).
    """
    lam, rho, delta = params.lam, params.rho, params.delta
    num = od.y1dd + (rho + delta) * od.y1d + delta * rho * od.y1 - delta * lam
    den = -od.y2 * (od.y1d + delta * od.y1 - lam)
    return _guarded_ratio(num, den, guard)


def eta_from_virus_channel(od: OutputDerivatives, params: HivParams, guard: float = 1e-6) -> tuple:
    """Reconstruct eta(t) from the y2 channel; same contract as the cell-channel version."""
    nn, delta, c = params.N, params.delta, params.c
    num = od.y2dd + (delta + c) * od.y2d + delta * c * od.y2
    den = od.y2 * (nn * delta * od.y1 - od.y2d - c * od.y2)
    return _guarded_ratio(num, den, guard)
