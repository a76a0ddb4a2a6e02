"""Normalized B-spline bases for time-varying coefficients.

Bases are built on clamped (fully repeated end) knot vectors with equally
spaced interior knots, evaluated through the de Boor-Cox recurrence with the
0/0 := 0 convention.  A basis of a given ``order`` (= degree + 1) with ``q``
interior knots has N = q + order member functions that form a partition of
unity on the interval.

Knots may be placed on the raw time axis (``linear``) or on a log(1 + t - t0)
axis (``log_shifted``), which concentrates resolution near t0 for long-tailed
designs.

A :class:`SplineModel` bundles a basis with a coefficient vector; the
centered variant subtracts each basis function's mean over a reference time
sample so the represented curve averages to zero there (used when a
time-varying effect must be separated from a constant baseline).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "SplineConfig",
    "SplineModel",
    "basis_eval",
    "eval_eta",
    "project_function",
    "centering_offsets",
]


@dataclass(frozen=True)
class SplineConfig:
    """Geometry of one clamped B-spline basis on [t0, t_end]."""

    t0: float
    t_end: float
    interior_knots: int
    order: int
    knot_scale: str = "linear"
    coef_bound: float = 1e6  # box half-width for coefficients during fitting

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.t_end)):
            raise ValueError("interval bounds must be finite")
        if self.t_end <= self.t0:
            raise ValueError(f"need t_end > t0, got [{self.t0}, {self.t_end}]")
        if self.order < 2:
            raise ValueError(f"order must be >= 2, got {self.order}")
        if self.interior_knots < 0:
            raise ValueError(f"interior knot count must be >= 0, got {self.interior_knots}")
        if self.knot_scale not in ("linear", "log_shifted"):
            raise ValueError(f"unknown knot scale {self.knot_scale!r}")
        if not (self.coef_bound > 0):
            raise ValueError("coefficient bound must be positive")

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def n_basis(self) -> int:
        return self.interior_knots + self.order

    def _transform(self, t: np.ndarray) -> np.ndarray:
        if self.knot_scale == "linear":
            return t
        return np.log1p(t - self.t0)

    def knots(self) -> np.ndarray:
        """Clamped knot vector on the (possibly transformed) axis."""
        z0 = float(self._transform(np.asarray(self.t0, dtype=float)))
        z1 = float(self._transform(np.asarray(self.t_end, dtype=float)))
        interior = np.linspace(z0, z1, self.interior_knots + 2)[1:-1]
        return np.concatenate(
            [np.full(self.order, z0), interior, np.full(self.order, z1)]
        )


def _cox_de_boor_matrix(knots: np.ndarray, order: int, z: np.ndarray) -> np.ndarray:
    """All order-``order`` basis functions at points ``z``; shape (len(z), N)."""
    n_segments = knots.size - 1
    B = (
        (z[:, None] >= knots[None, :-1]) & (z[:, None] < knots[None, 1:])
    ).astype(float)
    # The right end point belongs to the last segment of positive width.
    positive = np.nonzero(np.diff(knots) > 0)[0]
    last = int(positive[-1])
    at_end = z >= knots[-1]
    if np.any(at_end):
        B[at_end, :] = 0.0
        B[at_end, last] = 1.0
    for k in range(2, order + 1):
        nj = n_segments - (k - 1)
        left_den = knots[k - 1 : k - 1 + nj] - knots[:nj]
        right_den = knots[k : k + nj] - knots[1 : 1 + nj]
        left = np.where(
            left_den > 0.0,
            (z[:, None] - knots[None, :nj]) / np.where(left_den > 0.0, left_den, 1.0),
            0.0,
        )
        right = np.where(
            right_den > 0.0,
            (knots[None, k : k + nj] - z[:, None]) / np.where(right_den > 0.0, right_den, 1.0),
            0.0,
        )
        B = left * B[:, :nj] + right * B[:, 1 : nj + 1]
    return B


def basis_eval(config: SplineConfig, t) -> np.ndarray:
    """Evaluate all basis functions at ``t``.

    Returns shape (n_basis,) for scalar input, (len(t), n_basis) for arrays.
    Times must lie in [t0, t_end] (a 1e-9 relative overhang is tolerated and
    clamped).
    """
    scalar = np.isscalar(t) or np.asarray(t).ndim == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    tol = 1e-9 * (config.t_end - config.t0)
    if np.any(t_arr < config.t0 - tol) or np.any(t_arr > config.t_end + tol):
        raise ValueError("evaluation time outside the spline interval")
    t_arr = np.clip(t_arr, config.t0, config.t_end)
    z = config._transform(t_arr)
    knots = config.knots()
    B = _cox_de_boor_matrix(knots, config.order, z)
    return B[0] if scalar else B


@dataclass(frozen=True)
class SplineModel:
    """A basis plus coefficients; optionally centered on a reference sample."""

    config: SplineConfig
    coefficients: np.ndarray
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        if coef.shape != (self.config.n_basis,):
            raise ValueError(
                f"expected {self.config.n_basis} coefficients, got shape {coef.shape}"
            )
        object.__setattr__(self, "coefficients", coef)
        if self.offsets is not None:
            off = np.asarray(self.offsets, dtype=float)
            if off.shape != coef.shape:
                raise ValueError("offsets must match the coefficient shape")
            object.__setattr__(self, "offsets", off)

    @property
    def centered(self) -> bool:
        return self.offsets is not None

    @classmethod
    def plain(cls, config: SplineConfig, coefficients) -> "SplineModel":
        return cls(config=config, coefficients=np.asarray(coefficients, dtype=float))

    @classmethod
    def centered_on(
        cls, config: SplineConfig, coefficients, reference_times
    ) -> "SplineModel":
        """Center so the curve's mean over ``reference_times`` is exactly zero."""
        ref = np.asarray(reference_times, dtype=float)
        if ref.size == 0:
            raise ValueError("need at least one reference time for centering")
        offsets = basis_eval(config, ref).mean(axis=0)
        return cls(
            config=config,
            coefficients=np.asarray(coefficients, dtype=float),
            offsets=offsets,
        )


def centering_offsets(config: SplineConfig, reference_times) -> np.ndarray:
    """Per-basis means over a reference sample (the centered-model offsets)."""
    ref = np.asarray(reference_times, dtype=float)
    if ref.size == 0:
        raise ValueError("need at least one reference time for centering")
    return basis_eval(config, ref).mean(axis=0)


def eval_eta(model: SplineModel, t):
    """Evaluate the spline curve at ``t`` (scalar -> float, array -> array)."""
    scalar = np.isscalar(t) or np.asarray(t).ndim == 0
    B = basis_eval(model.config, np.atleast_1d(np.asarray(t, dtype=float)))
    vals = B @ model.coefficients
    if model.offsets is not None:
        vals = vals - float(model.offsets @ model.coefficients)
    return float(vals[0]) if scalar else vals


def project_function(
    config: SplineConfig, f: Callable[[np.ndarray], np.ndarray], sample_times
) -> np.ndarray:
    """Least-squares projection of ``f`` onto the basis over ``sample_times``.

    Raises if the design matrix is rank deficient (too few or badly placed
    sample points for the requested basis).
    """
    ts = np.asarray(sample_times, dtype=float)
    if ts.ndim != 1 or ts.size == 0:
        raise ValueError("sample_times must be a non-empty 1-D array")
    try:
        values = np.asarray(f(ts), dtype=float)
        if values.shape != ts.shape:
            raise TypeError
    except TypeError:
        values = np.asarray([float(f(t)) for t in ts], dtype=float)
    A = basis_eval(config, ts)
    coef, _, rank, _ = np.linalg.lstsq(A, values, rcond=None)
    if rank < config.n_basis:
        raise ValueError(
            f"rank-deficient projection: design rank {rank} < {config.n_basis} basis functions"
        )
    return coef
