"""Uncertainty quantification and model selection for NLS fits.

Variance: the observed pseudo-information is the central-finite-difference
Hessian of the per-observation objective Xi/n at the estimate.  Writing
H for that Hessian and sigma2_hat = rss/(n K_obs - k) for the noise variance
on the fitting scale, the covariance estimate is

    Cov(theta_hat) = 2 sigma2_hat H^{-1} / n

(the Gauss-Newton identity: the sum-objective Hessian is about 2/sigma2 times
the inverse covariance; normalizing by n and inverting gives the 1/n rate).
Eigenvalues are floored at 1e-10 times the largest before inversion so
near-singular sieve fits still produce a usable (flagged) matrix.

Intervals: the weighted bootstrap refits the model B times under i.i.d.
Exponential(1) per-time-point weights (mean one, variance one), warm-starting
each replicate's optimizer around the base estimate at a quarter of the cold
budget, and reads confidence intervals and pointwise eta(t) bands off the
replicate quantiles.

Model selection: small-sample corrected AIC,
AICc = n ln(rss/n) + 2 n k / (n - k - 1), scanned over spline order and basis
size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .estimator import FitReport, FitSpec, _Prepared, _as_free, eta_values_from_free, fit
from .optimize import SearchSpace
from .rng import substream

__all__ = [
    "PseudoInformation",
    "BootstrapResult",
    "SelectionRow",
    "finite_diff_hessian",
    "pseudo_information",
    "draw_weights",
    "weighted_bootstrap",
    "aicc",
    "select_spline",
    "are",
]


def _hessian_points(x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """All central-difference sample points for one Hessian, center first."""
    d = x.size
    pts = [x]
    for i in range(d):
        for sign in (+1.0, -1.0):
            p = x.copy()
            p[i] += sign * steps[i]
            pts.append(p)
    for i in range(d):
        for j in range(i + 1, d):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                p = x.copy()
                p[i] += si * steps[i]
                p[j] += sj * steps[j]
                pts.append(p)
    return np.asarray(pts)


def _assemble_hessian(values: np.ndarray, d: int, steps: np.ndarray) -> tuple:
    f0 = values[0]
    H = np.empty((d, d))
    grad = np.empty(d)
    for i in range(d):
        fp, fm = values[1 + 2 * i], values[2 + 2 * i]
        H[i, i] = (fp - 2.0 * f0 + fm) / steps[i] ** 2
        grad[i] = (fp - fm) / (2.0 * steps[i])
    idx = 1 + 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            fpp, fpm, fmp, fmm = values[idx : idx + 4]
            idx += 4
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * steps[i] * steps[j])
    return H, grad, f0


def finite_diff_hessian(
    f: Callable[[np.ndarray], float], x, rel_step: float = 1e-4
) -> np.ndarray:
    """Central-difference Hessian of a scalar function.

    Steps are per-coordinate: rel_step * max(|x_i|, 1e-8).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    steps = rel_step * np.maximum(np.abs(x), 1e-8)
    pts = _hessian_points(x, steps)
    values = np.asarray([float(f(p)) for p in pts])
    H, _, _ = _assemble_hessian(values, x.size, steps)
    return H


@dataclass(frozen=True)
class PseudoInformation:
    """Finite-difference curvature at the estimate plus derived covariance."""

    hessian: np.ndarray  # raw symmetric Hessian of the mean objective
    covariance: np.ndarray  # 2 sigma2 H^{-1} / n, eigen-floored, PSD
    condition_estimate: float  # eig ratio in magnitude-scaled coordinates (inf if <= 0)
    floored: bool
    indefinite: bool  # negative curvature beyond the flooring tolerance
    sigma2_hat: float
    gradient_norm: float  # sanity signal: should be ~0 at an interior minimum

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))


def pseudo_information(spec: FitSpec, theta_hat) -> PseudoInformation:
    """Observed pseudo-information of a fit at ``theta_hat``.

    Differences the mean (per-time-point, unweighted) objective with
    per-coordinate steps 1e-4 * max(|theta_i|, 1e-8).  For sieve fits the
    Hessian spans the full (beta, alpha) block; marginal beta variances come
    from inverting the whole matrix and reading the beta block of the result.
    """
    free = _as_free(spec, theta_hat)
    d = free.size
    n = spec.dataset.n_times
    prepared = _Prepared(spec)
    steps = 1e-4 * np.maximum(np.abs(free), 1e-8)
    pts = _hessian_points(free, steps)
    values = prepared.objective_batch(pts, weighted=False) / n
    H, grad, f0 = _assemble_hessian(values, d, steps)
    H = 0.5 * (H + H.T)

    rss = f0 * n
    dof = spec.dataset.n_scalars - d
    if dof <= 0:
        raise ValueError("no residual degrees of freedom for the noise variance")
    sigma2 = rss / dof

    # Raw-coordinate curvature spans ~|theta_max/theta_min|^2 (15+ orders of
    # magnitude here), so flooring/inverting it directly destroys every
    # honest small eigenvalue.  Work in per-magnitude coordinates u = theta/s
    # instead: H_u = s s^T * H is well conditioned, and the covariance maps
    # back as Cov_theta = s s^T * Cov_u.
    s = np.maximum(np.abs(free), 1e-8)
    H_u = H * np.outer(s, s)
    w, V = np.linalg.eigh(H_u)
    w_max = float(w.max())
    scale = w_max if w_max > 0 else float(np.max(np.abs(w))) or 1.0
    floor = 1e-10 * scale
    floored = bool(np.any(w < floor))
    indefinite = bool(np.any(w < -floor))
    w_min = float(w.min())
    condition = float(np.inf) if w_min <= 0 else float(w_max / w_min)
    w_inv = 1.0 / np.maximum(w, floor)
    inv_u = (V * w_inv[None, :]) @ V.T
    cov = (2.0 * sigma2 / n) * inv_u * np.outer(s, s)
    cov = 0.5 * (cov + cov.T)
    return PseudoInformation(
        hessian=H,
        covariance=cov,
        condition_estimate=condition,
        floored=floored,
        indefinite=indefinite,
        sigma2_hat=float(sigma2),
        gradient_norm=float(np.linalg.norm(grad)),
    )


# ---------------------------------------------------------------------------
# Weighted bootstrap


def draw_weights(seed: int, replicate: int, n: int) -> np.ndarray:
    """The Exponential(1) weight vector of one bootstrap replicate."""
    return substream(seed, replicate, 0).standard_exponential(n)


def _derived_int_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence((seed, replicate, 1)).generate_state(1)[0])


@dataclass(frozen=True)
class BootstrapResult:
    """Replicate estimates plus quantile intervals/bands."""

    replicates: np.ndarray  # (B_ok, k)
    free_names: tuple
    intervals: np.ndarray  # (k, 2): default 2.5% / 97.5% quantiles
    eta_band: Optional[tuple]  # (times, lo, hi) or None
    B: int  # requested replicates
    n_failed: int
    base: FitReport
    levels: tuple = (0.025, 0.975)

    def intervals_at(self, level: float) -> np.ndarray:
        """Equal-tailed intervals at confidence ``level`` (e.g. 0.9, 0.95)."""
        if not (0.0 < level < 1.0):
            raise ValueError("level must lie in (0, 1)")
        tail = (1.0 - level) / 2.0
        return np.quantile(self.replicates, [tail, 1.0 - tail], axis=0).T

    def contains_base_fraction(self) -> float:
        """Share of parameters whose interval covers the base estimate."""
        base = self.base.free_values
        lo, hi = self.intervals[:, 0], self.intervals[:, 1]
        return float(np.mean((base >= lo) & (base <= hi)))


def weighted_bootstrap(
    spec: FitSpec,
    B: int,
    seed: int,
    base_report: Optional[FitReport] = None,
    force_unit_weights: bool = False,
    levels: tuple = (0.025, 0.975),
) -> BootstrapResult:
    """B weighted refits -> quantile intervals and pointwise eta bands.

    Each replicate minimizes sum_i W_i sum_j r_ij^2 with W_i ~ Exp(1) drawn
    from ``substream(seed, b, 0)``, warm-started at the base estimate with a
    quarter of the cold optimizer budget.  Failed replicates are dropped and
    counted; more than 20% failures raises.  ``force_unit_weights`` is a test
    hook that pins every weight to one.
    """
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    if spec.dataset.weights is not None:
        raise ValueError("dataset already carries weights; bootstrap would overwrite them")
    if len(levels) != 2 or not (0.0 < levels[0] < levels[1] < 1.0):
        raise ValueError("levels must be an increasing pair inside (0, 1)")
    base = base_report if base_report is not None else fit(spec)
    if not base.diagnostics.get("converged", True):
        raise RuntimeError("base fit did not converge; bootstrap would be meaningless")

    warm_generations = max(1, math.ceil(0.25 * spec.optimizer.max_generations))
    n = spec.dataset.n_times
    rows = []
    failed = 0
    for b in range(B):
        weights = np.ones(n) if force_unit_weights else draw_weights(seed, b, n)
        optimizer_b = replace(
            spec.optimizer,
            max_generations=warm_generations,
            init_center=base.free_values,
            init_radius=0.05,
            seed=_derived_int_seed(seed, b),
        )
        spec_b = replace(
            spec, dataset=spec.dataset.with_weights(weights), optimizer=optimizer_b
        )
        try:
            rep = fit(spec_b)
            if not rep.diagnostics.get("converged", False):
                raise RuntimeError("replicate fit penalized")
            rows.append(rep.free_values)
        except Exception:
            failed += 1
    if failed > 0.2 * B:
        raise RuntimeError(f"{failed}/{B} bootstrap replicates failed")

    replicates = np.asarray(rows)
    intervals = np.quantile(replicates, list(levels), axis=0).T

    eta_band = None
    if spec.eta_mode != "none":
        dense = np.linspace(spec.system.t0, spec.system.t_end, 201)
        curves = np.asarray([eta_values_from_free(spec, r, dense) for r in replicates])
        lo, hi = np.quantile(curves, list(levels), axis=0)
        eta_band = (dense, lo, hi)

    return BootstrapResult(
        replicates=replicates,
        free_names=spec.free_names,
        intervals=intervals,
        eta_band=eta_band,
        B=B,
        n_failed=failed,
        base=base,
        levels=tuple(levels),
    )


# ---------------------------------------------------------------------------
# Model selection and error metrics


def aicc(rss: float, n: int, k: int) -> float:
    """Small-sample corrected AIC: n ln(rss/n) + 2nk/(n - k - 1)."""
    if rss <= 0.0:
        raise ValueError("rss must be positive")
    if n <= k + 1:
        raise ValueError(f"AICc undefined: need n > k + 1, got n={n}, k={k}")
    return float(n * math.log(rss / n) + 2.0 * n * k / (n - k - 1))


@dataclass(frozen=True)
class SelectionRow:
    """One (order, basis-size) cell of a spline model scan."""

    order: int
    n_basis: int
    interior_knots: int
    k: int
    rss: Optional[float]
    aicc: Optional[float]
    note: str = ""
    report: Optional[FitReport] = field(default=None, repr=False, compare=False)


def select_spline(spec: FitSpec, orders=(3, 4), basis_counts=range(3, 11)) -> list:
    """Fit every (order, basis count) spline model; rank by AICc ascending.

    ``spec`` must be a spline-mode template; its alpha box is tiled to each
    candidate's basis size.  Infeasible combinations (basis count below the
    order, which would need a negative interior-knot count) and failed fits
    produce rows with a blank AICc, ranked last.  k counts the free constants
    plus the spline coefficients; n is the total scalar observation count.
    """
    if spec.eta_mode not in ("spline", "centered_spline"):
        raise ValueError("select_spline needs a spline-mode fit template")
    n_sys = spec.n_system_params
    base_space = spec.space
    alpha_lo = float(base_space.lower[n_sys])
    alpha_hi = float(base_space.upper[n_sys])
    alpha_scale = base_space.scale[n_sys]

    rows = []
    for order in orders:
        for n_basis in basis_counts:
            interior = n_basis - order
            k = n_sys + n_basis
            if interior < 0:
                rows.append(
                    SelectionRow(order, n_basis, interior, k, None, None, note="infeasible")
                )
                continue
            cfg = replace(spec.spline, order=order, interior_knots=interior)
            space = SearchSpace(
                lower=np.concatenate([base_space.lower[:n_sys], np.full(n_basis, alpha_lo)]),
                upper=np.concatenate([base_space.upper[:n_sys], np.full(n_basis, alpha_hi)]),
                scale=base_space.scale[:n_sys] + (alpha_scale,) * n_basis,
            )
            try:
                report = fit(replace(spec, spline=cfg, space=space))
                if not report.diagnostics.get("converged", False):
                    raise RuntimeError("fit penalized")
                value = aicc(report.rss, report.n_scalars, report.k)
                rows.append(
                    SelectionRow(order, n_basis, interior, report.k, report.rss, value, report=report)
                )
            except Exception:
                rows.append(SelectionRow(order, n_basis, interior, k, None, None, note="failed"))
    rows.sort(key=lambda r: (r.aicc is None, r.aicc if r.aicc is not None else 0.0))
    return rows


def are(estimates, truth) -> np.ndarray:
    """Average relative estimation error, in percent, per parameter.

    are_j = 100/M * sum_m |estimates[m, j] - truth[j]| / |truth[j]|
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tru = np.atleast_1d(np.asarray(truth, dtype=float))
    if est.shape[1] != tru.size:
        raise ValueError("estimate columns must match the truth length")
    if est.shape[0] < 1:
        raise ValueError("need at least one estimate row")
    if np.any(tru == 0.0):
        raise ValueError("truth components must be nonzero")
    return 100.0 * np.mean(np.abs(est - tru[None, :]) / np.abs(tru[None, :]), axis=0)
