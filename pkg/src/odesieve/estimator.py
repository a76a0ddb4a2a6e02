"""Numerical-solution-based nonlinear least squares for ODE parameters.

A candidate parameter vector is scored by integrating the system on a fixed
grid, Hermite-interpolating the observable outputs onto the observation
times, and summing squared residuals on the fitting scale (log where the
dataset is flagged):

    objective(theta) = sum_i w_i sum_j [Y_j(t_i) - model_j(t_i, theta)]^2

The free vector packs the system's constant parameters first, then the
time-varying coefficient: nothing for ``eta_mode='none'``, one constant eta
appended to the free constants, or a B-spline coefficient block alpha for the
sieve modes (``spline`` / ``centered_spline``).  Everything is minimized
jointly by the DE + simplex hybrid; candidates whose trajectories diverge or
whose predictions cannot be log-transformed receive a structured finite
penalty (1e12, plus the unfinished grid fraction for divergence so the
optimizer is pulled toward feasibility).

Weights ``w_i`` default to one and exist for the weighted bootstrap.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .models import Dataset, OdeSystem
from .optimize import OptimizerConfig, SearchSpace, minimize
from .solver import integrate_batch, interpolate_batch, make_uniform_grid, stage_times
from .splines import SplineConfig, SplineModel, basis_eval, centering_offsets, eval_eta

__all__ = [
    "ETA_MODES",
    "PENALTY_BASE",
    "ParameterVector",
    "FitSpec",
    "FitReport",
    "default_space",
    "free_parameter_names",
    "nls_objective",
    "fit",
    "evaluate_fit",
    "eta_values_from_free",
    "bias_vs_step_study",
]

ETA_MODES = ("none", "constant", "spline", "centered_spline")
PENALTY_BASE = 1e12


@dataclass(frozen=True)
class ParameterVector:
    """Free constants (beta) plus spline coefficients (alpha, often empty).

    For constant-eta fits the estimated eta is the last entry of ``beta``;
    it is a free constant like any other.  ``fixed`` records the known
    constants that were held at their true values (e.g. rho, delta).
    """

    beta: np.ndarray
    alpha: np.ndarray = field(default_factory=lambda: np.empty(0))
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float)) if np.size(self.alpha) else np.empty(0)
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(alpha))):
            raise ValueError("parameter entries must be finite")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)

    @property
    def free(self) -> np.ndarray:
        return np.concatenate([self.beta, self.alpha])


def free_parameter_names(system: OdeSystem, eta_mode: str, spline: Optional[SplineConfig]) -> tuple:
    names = tuple(system.param_names)
    if eta_mode == "constant":
        names += ("eta",)
    elif eta_mode in ("spline", "centered_spline"):
        names += tuple(f"alpha{j + 1}" for j in range(spline.n_basis))
    return names


def default_space(
    system: OdeSystem, eta_mode: str, spline: Optional[SplineConfig] = None
) -> SearchSpace:
    """Stock search boxes for the built-in systems.

    HIV: lambda in [1, 200], N in [100, 1e4], c in [0.1, 20] (log scale);
    constant eta in [1e-7, 1e-3] (log); spline coefficients in [0, 1e-3]
    (linear, clipped by the config's coefficient bound).  Decay: rate in
    [0.05, 10] (log).
    """
    if system.name == "hiv":
        lo = [1.0, 100.0, 0.1]
        hi = [200.0, 1e4, 20.0]
        scale = ["log", "log", "log"]
    elif system.name == "decay":
        lo, hi, scale = [0.05], [10.0], ["log"]
    else:
        raise ValueError(f"no default search space for system {system.name!r}")
    if eta_mode == "constant":
        lo.append(1e-7)
        hi.append(1e-3)
        scale.append("log")
    elif eta_mode in ("spline", "centered_spline"):
        if spline is None:
            raise ValueError("spline config required for sieve search spaces")
        for _ in range(spline.n_basis):
            lo.append(0.0)
            hi.append(min(1e-3, spline.coef_bound))
            scale.append("linear")
    return SearchSpace(
        lower=np.asarray(lo),
        upper=np.asarray(hi),
        scale=tuple(scale),
        names=free_parameter_names(system, eta_mode, spline),
    )


@dataclass(frozen=True)
class FitSpec:
    """Everything needed to score and fit one model on one dataset."""

    system: OdeSystem
    dataset: Dataset
    eta_mode: str = "constant"
    spline: Optional[SplineConfig] = None
    step: float = 0.05
    method: str = "rk4"
    space: Optional[SearchSpace] = None
    optimizer: OptimizerConfig = OptimizerConfig()

    def __post_init__(self):
        if self.eta_mode not in ETA_MODES:
            raise ValueError(f"unknown eta_mode {self.eta_mode!r}; expected one of {ETA_MODES}")
        if self.system.uses_eta and self.eta_mode == "none":
            raise ValueError("this system needs an eta model; eta_mode='none' is inconsistent")
        if not self.system.uses_eta and self.eta_mode != "none":
            raise ValueError("system has no eta slot; use eta_mode='none'")
        spline_mode = self.eta_mode in ("spline", "centered_spline")
        if spline_mode and self.spline is None:
            raise ValueError("spline eta modes need a SplineConfig")
        if not spline_mode and self.spline is not None:
            raise ValueError("spline config given but eta_mode is not a spline mode")
        if spline_mode:
            if self.spline.t0 > self.system.t0 or self.spline.t_end < self.system.t_end:
                raise ValueError("spline interval must cover the integration interval")
        span = self.system.t_end - self.system.t0
        if not (0.0 < self.step <= span / 4.0):
            raise ValueError(f"need 0 < step <= (T - t0)/4 = {span / 4.0}")
        if len(self.dataset.log_scale) != self.system.obs_dim:
            raise ValueError("dataset observable count does not match the system")
        if np.any(self.dataset.times < self.system.t0) or np.any(
            self.dataset.times > self.system.t_end
        ):
            raise ValueError("dataset times fall outside the system interval")
        if self.space is None:
            object.__setattr__(self, "space", default_space(self.system, self.eta_mode, self.spline))
        expect = self.n_free
        if self.space.dim != expect:
            raise ValueError(f"search space has {self.space.dim} coordinates, fit needs {expect}")
        if expect >= self.dataset.n_scalars:
            raise ValueError("more free parameters than scalar observations")

    @property
    def n_system_params(self) -> int:
        return len(self.system.param_names)

    @property
    def n_beta(self) -> int:
        """Free constants, including a constant eta when applicable."""
        return self.n_system_params + (1 if self.eta_mode == "constant" else 0)

    @property
    def n_alpha(self) -> int:
        return self.spline.n_basis if self.spline is not None else 0

    @property
    def n_free(self) -> int:
        return self.n_beta + self.n_alpha

    @property
    def free_names(self) -> tuple:
        return free_parameter_names(self.system, self.eta_mode, self.spline)


class _Prepared:
    """Per-spec caches: grid, stage-time basis table, centering offsets."""

    def __init__(self, spec: FitSpec):
        self.spec = spec
        self.grid = make_uniform_grid(spec.system.t0, spec.system.t_end, spec.step)
        self.n_stage = stage_times(self.grid, spec.method).size
        self.obs_times = spec.dataset.times
        self.y = spec.dataset.observations
        self.log_mask = np.asarray(spec.dataset.log_scale, dtype=bool)
        self.weights = spec.dataset.weights
        self.n_sys = spec.n_system_params
        self.basis_stage = None
        self.offsets = None
        if spec.eta_mode in ("spline", "centered_spline"):
            st = stage_times(self.grid, spec.method)
            self.basis_stage = basis_eval(spec.spline, st)  # (S, N)
            if spec.eta_mode == "centered_spline":
                self.offsets = centering_offsets(spec.spline, spec.dataset.times)

    def eta_stage_for(self, X: np.ndarray) -> Optional[np.ndarray]:
        mode = self.spec.eta_mode
        if mode == "none":
            return None
        if mode == "constant":
            return np.broadcast_to(X[:, self.n_sys : self.n_sys + 1], (X.shape[0], self.n_stage))
        alpha = X[:, self.n_sys :]
        table = alpha @ self.basis_stage.T  # (P, S)
        if self.offsets is not None:
            table = table - (alpha @ self.offsets)[:, None]
        return table

    def objective_batch(self, X: np.ndarray, weighted: bool = True) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        betas = X[:, : self.n_sys]
        batch = integrate_batch(
            self.spec.system, betas, self.grid, method=self.spec.method,
            eta_stage=self.eta_stage_for(X),
        )
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            model = self.spec.system.observe(interpolate_batch(batch, self.obs_times))
            model = np.where(self.log_mask[None, None, :], np.log(model), model)
            resid = model - self.y[None, :, :]
            point_sq = np.sum(resid * resid, axis=2)  # (P, n)
            if weighted and self.weights is not None:
                point_sq = point_sq * self.weights[None, :]
            vals = point_sq.sum(axis=1)
        # Undefined residuals (log of a non-positive prediction) get a flat
        # penalty; diverged trajectories get penalty plus unfinished fraction.
        vals = np.where(np.isfinite(vals), vals, PENALTY_BASE)
        vals = np.where(batch.ok, vals, PENALTY_BASE + (1.0 - batch.fraction_completed))
        return vals

    def objective(self, x: np.ndarray) -> float:
        return float(self.objective_batch(np.asarray(x, dtype=float)[None, :])[0])


def _as_free(spec: FitSpec, candidate) -> np.ndarray:
    if isinstance(candidate, ParameterVector):
        free = candidate.free
    else:
        free = np.atleast_1d(np.asarray(candidate, dtype=float))
    if free.shape != (spec.n_free,):
        raise ValueError(f"candidate has {free.size} entries, fit needs {spec.n_free}")
    return free


def nls_objective(spec: FitSpec, candidate) -> float:
    """Residual sum of squares for one candidate (ParameterVector or flat array).

    Always the plain unweighted objective; :func:`fit` applies dataset
    weights internally when present.
    """
    return float(_Prepared(spec).objective_batch(_as_free(spec, candidate)[None, :], weighted=False)[0])


def eta_values_from_free(spec: FitSpec, free: np.ndarray, times) -> np.ndarray:
    """Evaluate the fitted eta(t) encoded in a free vector at ``times``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if spec.eta_mode == "none":
        raise ValueError("fit has no eta component")
    if spec.eta_mode == "constant":
        return np.full(times.shape, float(free[spec.n_system_params]))
    model = _spline_model_from_free(spec, free)
    return np.atleast_1d(eval_eta(model, times))


def _spline_model_from_free(spec: FitSpec, free: np.ndarray) -> SplineModel:
    alpha = np.asarray(free[spec.n_system_params :], dtype=float)
    if spec.eta_mode == "centered_spline":
        return SplineModel.centered_on(spec.spline, alpha, spec.dataset.times)
    return SplineModel.plain(spec.spline, alpha)


@dataclass(frozen=True)
class FitReport:
    """Result of one fit: estimate, objective bookkeeping, diagnostics."""

    spec: FitSpec
    theta_hat: ParameterVector
    free_names: tuple
    rss: float  # unweighted residual sum of squares on the fitting scale
    objective_value: float  # minimized (possibly weighted) objective
    objective_trace: np.ndarray
    n: int  # observation times
    n_scalars: int  # total scalar observations (n * K_obs)
    k: int  # free scalars
    sigma2_hat: float  # rss / (n_scalars - k)
    eta_curve: Optional[tuple] = None  # (times, eta_hat) on a dense grid
    spline_model: Optional[SplineModel] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def free_values(self) -> np.ndarray:
        return self.theta_hat.free

    def report_text(self) -> str:
        d = self.diagnostics
        lines = [
            "fit report",
            "----------",
            f"system = {self.spec.system.name}",
            f"eta_mode = {self.spec.eta_mode}",
            f"method = {self.spec.method}",
            f"step = {self.spec.step!r}",
            f"n_times = {self.n}",
            f"n_scalars = {self.n_scalars}",
            f"k_free = {self.k}",
            f"rss = {self.rss!r}",
            f"sigma2_hat = {self.sigma2_hat!r}",
            f"converged = {d.get('converged')}",
            f"generations = {d.get('n_generations')}",
            f"evaluations = {d.get('n_evaluations')}",
            "",
            "param,estimate",
        ]
        for name, value in zip(self.free_names, self.free_values):
            lines.append(f"{name},{float(value)!r}")
        for name, value in sorted(self.theta_hat.fixed.items()):
            lines.append(f"{name} (fixed),{float(value)!r}")
        return "\n".join(lines) + "\n"


def _assemble_report(spec: FitSpec, prepared: "_Prepared", free: np.ndarray, result=None) -> FitReport:
    beta = free[: spec.n_beta]
    alpha = free[spec.n_beta :]
    theta = ParameterVector(beta=beta, alpha=alpha, fixed=dict(spec.system.fixed))

    rss = float(prepared.objective_batch(free[None, :], weighted=False)[0])
    k = spec.n_free
    n_scalars = spec.dataset.n_scalars
    sigma2 = rss / (n_scalars - k)

    eta_curve = None
    spline_model = None
    if spec.eta_mode != "none":
        dense = np.linspace(spec.system.t0, spec.system.t_end, 201)
        eta_curve = (dense, eta_values_from_free(spec, free, dense))
        if spec.eta_mode in ("spline", "centered_spline"):
            spline_model = _spline_model_from_free(spec, free)

    diagnostics = {"converged": bool(rss < PENALTY_BASE)}
    if result is not None:
        diagnostics.update(
            stalled=result.stalled,
            refined=result.refined,
            n_generations=result.n_generations,
            n_evaluations=result.n_evaluations,
        )
        objective_value = float(result.value)
        trace = result.trace
    else:
        objective_value = float(prepared.objective(free))
        trace = np.asarray([objective_value])
    return FitReport(
        spec=spec,
        theta_hat=theta,
        free_names=spec.free_names,
        rss=rss,
        objective_value=objective_value,
        objective_trace=trace,
        n=spec.dataset.n_times,
        n_scalars=n_scalars,
        k=k,
        sigma2_hat=sigma2,
        eta_curve=eta_curve,
        spline_model=spline_model,
        diagnostics=diagnostics,
    )


def fit(spec: FitSpec) -> FitReport:
    """Minimize the NLS objective over ``spec``'s free parameters.

    Deterministic given the optimizer seed.  Optimizer trouble (a fully
    penalized landscape, stall at the iteration cap) is reported through
    ``diagnostics``, never raised.
    """
    prepared = _Prepared(spec)
    result = minimize(
        prepared.objective,
        spec.space,
        spec.optimizer,
        batch_objective=prepared.objective_batch,
    )
    return _assemble_report(spec, prepared, np.asarray(result.x, dtype=float), result)


def evaluate_fit(spec: FitSpec, free) -> FitReport:
    """Assemble a full report at a given free vector, without optimizing.

    Used to rehydrate a persisted estimate (e.g. as a warm start for the
    bootstrap) and to score reference parameter values.
    """
    free = np.asarray(free, dtype=float)
    if free.shape != (spec.n_free,):
        raise ValueError(f"free vector must have shape ({spec.n_free},), got {free.shape}")
    return _assemble_report(spec, _Prepared(spec), free)


def bias_vs_step_study(spec: FitSpec, steps, beta_truth) -> np.ndarray:
    """Fit a zero-noise dataset at several solver steps; tabulate the bias.

    Returns rows ``(h, error)`` where the error is the Euclidean norm of the
    componentwise relative errors of the free constants against
    ``beta_truth`` (relative, because the constants span many decades and an
    absolute norm would only measure the largest one).
    """
    steps = [float(h) for h in steps]
    if len(steps) < 3:
        raise ValueError("need at least three step sizes")
    if spec.dataset.noise_sd is not None and np.any(spec.dataset.noise_sd != 0.0):
        raise ValueError("bias study needs a zero-noise dataset")
    truth = np.asarray(beta_truth, dtype=float)
    if truth.shape != (spec.n_beta,):
        raise ValueError(f"beta_truth must have {spec.n_beta} entries")
    if np.any(truth == 0.0):
        raise ValueError("beta_truth entries must be nonzero for relative errors")
    rows = []
    for h in steps:
        report = fit(replace(spec, step=h))
        rel = (report.theta_hat.beta - truth) / truth
        rows.append((h, float(np.linalg.norm(rel))))
    return np.asarray(rows)
