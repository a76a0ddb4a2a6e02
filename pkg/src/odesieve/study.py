"""Monte-Carlo study harness: repeated simulate-fit cycles over a cell grid.

A *cell* is one (change magnitude, true eta model, fitted eta model)
combination; the full grid crosses the two truths of each magnitude with a
constant-eta fit and a time-varying (spline) fit.  Per cell the harness
reports the average relative estimation error of the constant parameters,
the mean/median of the per-replicate pseudo-information variances, the
empirical variance of the estimates across replicates, and the mean fitted
eta curve on a common time grid.

Replicates are deterministic functions of (master seed, cell, replicate
index): the dataset stream and the optimizer stream are split off the master
seed by fixed tags, so the same dataset is reused by both fitted models of a
truth and any subset of cells can be recomputed in isolation.
"""

from __future__ import annotations

import multiprocessing
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .estimator import PENALTY_BASE, FitSpec, fit
from .inference import pseudo_information
from .models import hiv_system, scenario, scenario_eta, simulate_dataset
from .optimize import OptimizerConfig, SearchSpace
from .rng import substream
from .splines import SplineConfig

__all__ = [
    "StudyCell",
    "ReplicateOutcome",
    "CellResult",
    "StudyResult",
    "StudyError",
    "study_cells",
    "default_study_spline",
    "run_cell",
    "run_study",
    "estimates_csv",
    "eta_mean_csv",
    "are_table_csv",
]

_GRID_TRUTHS = {"small": ("i", "ii"), "large": ("iii", "iv")}
_SCENARIO_TAG = {"i": 0, "ii": 1, "iii": 2, "iv": 3, "complex": 4}
_FIT_TAG = {"constant": 0, "time_varying": 1}
_CURVE_POINTS = 201


class StudyError(RuntimeError):
    """Raised when a cell accumulates more replicate failures than allowed."""


@dataclass(frozen=True)
class StudyCell:
    change: str     # 'small' | 'large'
    truth: str      # scenario id of the data-generating eta
    fit_kind: str   # 'constant' | 'time_varying'

    def __post_init__(self):
        if self.change not in _GRID_TRUTHS:
            raise ValueError(f"change must be 'small' or 'large', got {self.change!r}")
        if self.truth not in _GRID_TRUTHS[self.change]:
            raise ValueError(
                f"truth {self.truth!r} does not belong to the {self.change!r} grid"
            )
        if self.fit_kind not in _FIT_TAG:
            raise ValueError(f"fit_kind must be one of {tuple(_FIT_TAG)}")

    @property
    def label(self) -> str:
        return f"{self.change}_{self.truth}_{self.fit_kind}"


def study_cells(grid: str) -> list:
    """The 2 x 2 (truth x fitted model) cells of one or both magnitudes."""
    if grid not in ("small", "large", "both"):
        raise ValueError(f"grid must be 'small', 'large' or 'both', got {grid!r}")
    changes = ("small", "large") if grid == "both" else (grid,)
    return [
        StudyCell(change=ch, truth=tr, fit_kind=fk)
        for ch in changes
        for tr in _GRID_TRUTHS[ch]
        for fk in ("constant", "time_varying")
    ]


@dataclass(frozen=True)
class ReplicateOutcome:
    replicate: int
    ok: bool
    beta: Optional[np.ndarray]        # constant parameters (lambda, N, c)
    variances: Optional[np.ndarray]   # pseudo-information diagonal, same order
    rss: float
    eta_curve: Optional[np.ndarray]
    message: str = ""


@dataclass(frozen=True)
class CellResult:
    cell: StudyCell
    n_replicates: int
    master_seed: int
    outcomes: tuple
    beta_truth: np.ndarray
    eta_times: np.ndarray

    @property
    def n_failed(self) -> int:
        return sum(1 for o in self.outcomes if not o.ok)

    @property
    def estimates(self) -> np.ndarray:
        """(R_ok, 3) array of successful constant-parameter estimates."""
        rows = [o.beta for o in self.outcomes if o.ok]
        return np.asarray(rows, dtype=float).reshape(len(rows), -1)

    @property
    def variance_rows(self) -> np.ndarray:
        rows = [o.variances for o in self.outcomes if o.ok]
        return np.asarray(rows, dtype=float).reshape(len(rows), -1)

    @property
    def are(self) -> np.ndarray:
        est = self.estimates
        return np.mean(np.abs(est - self.beta_truth) / np.abs(self.beta_truth), axis=0) * 100.0

    @property
    def sigma2_ode(self) -> np.ndarray:
        return self.variance_rows.mean(axis=0)

    @property
    def sigma2_ode_median(self) -> np.ndarray:
        return np.median(self.variance_rows, axis=0)

    @property
    def sigma2_emp(self) -> np.ndarray:
        return np.var(self.estimates, axis=0, ddof=1)

    @property
    def eta_mean(self) -> np.ndarray:
        curves = np.asarray([o.eta_curve for o in self.outcomes if o.ok], dtype=float)
        return curves.mean(axis=0)

    @property
    def eta_truth(self) -> np.ndarray:
        return scenario_eta(self.cell.truth, self.eta_times)


@dataclass(frozen=True)
class StudyResult:
    cells: tuple
    replicates: int
    master_seed: int

    def cell(self, label: str) -> CellResult:
        for c in self.cells:
            if c.cell.label == label:
                return c
        raise KeyError(f"no study cell labelled {label!r}")


def default_study_spline(t0: float = 0.0, t_end: float = 20.0) -> SplineConfig:
    """Sieve used by the study's time-varying fits.

    Four basis functions (one interior knot, quadratic pieces) resolve every
    scenario's eta shape to well under the noise floor while keeping the
    sieve too stiff to chase the (N, c) ridge that flexible fits fall into
    at this sample size; the coefficient bound triples the largest scenario
    amplitude.
    """
    return SplineConfig(t0=t0, t_end=t_end, interior_knots=1, order=3, coef_bound=3e-4)


def _replicate_task(
    cell: StudyCell,
    replicate: int,
    master_seed: int,
    h: float,
    method: str,
    spline: Optional[SplineConfig],
    optimizer: OptimizerConfig,
    space: Optional[SearchSpace],
) -> ReplicateOutcome:
    system = hiv_system()
    scen = scenario(cell.truth)
    sc_tag = _SCENARIO_TAG[cell.truth]
    fit_tag = _FIT_TAG[cell.fit_kind]
    # Stream (1, scenario, r) generates the data: both fitted models of one
    # truth see the same dataset.  Stream (2, scenario, fit, r) drives the
    # optimizer.
    data_rng = substream(master_seed, 1, sc_tag, replicate)
    opt_seed = int(substream(master_seed, 2, sc_tag, fit_tag, replicate).integers(2**31))
    try:
        ds = simulate_dataset(system, scen, seed=data_rng)
        mode = "constant" if cell.fit_kind == "constant" else "spline"
        spec = FitSpec(
            system=system,
            dataset=ds,
            eta_mode=mode,
            spline=spline if mode == "spline" else None,
            step=h,
            method=method,
            space=space,
            optimizer=replace(optimizer, seed=opt_seed),
        )
        report = fit(spec)
        if not report.diagnostics.get("converged", False):
            return ReplicateOutcome(
                replicate, False, None, None, float(report.rss), None,
                message="fit did not leave the penalty region",
            )
        info = pseudo_information(spec, report.theta_hat.free)
        variances = np.diag(info.covariance)[:3].copy()
        return ReplicateOutcome(
            replicate=replicate,
            ok=True,
            beta=report.theta_hat.beta[:3].copy(),
            variances=variances,
            rss=float(report.rss),
            eta_curve=report.eta_curve[1].copy(),
        )
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        return ReplicateOutcome(replicate, False, None, None, np.inf, None, message=str(exc))


def _run_task_tuple(args) -> ReplicateOutcome:
    return _replicate_task(*args)


def run_cell(
    cell: StudyCell,
    replicates: int,
    master_seed: int,
    h: float = 0.05,
    method: str = "rk4",
    spline: Optional[SplineConfig] = None,
    optimizer: Optional[OptimizerConfig] = None,
    space: Optional[SearchSpace] = None,
    threads: int = 1,
    max_fail_fraction: float = 0.10,
) -> CellResult:
    """Simulate and fit ``replicates`` datasets for one cell.

    Raises :class:`StudyError` when more than ``max_fail_fraction`` of the
    replicates fail.  Results are independent of ``threads``.
    """
    if replicates < 10:
        raise ValueError("a study cell needs at least 10 replicates")
    if cell.fit_kind == "time_varying" and spline is None:
        spline = default_study_spline()
    optimizer = optimizer or OptimizerConfig()
    tasks = [
        (cell, r, master_seed, h, method, spline, optimizer, space)
        for r in range(replicates)
    ]
    if threads == 0:
        threads = os.cpu_count() or 1
    if threads > 1:
        with multiprocessing.Pool(processes=threads) as pool:
            outcomes = pool.map(_run_task_tuple, tasks)
    else:
        outcomes = [_run_task_tuple(t) for t in tasks]
    system = hiv_system()
    result = CellResult(
        cell=cell,
        n_replicates=replicates,
        master_seed=master_seed,
        outcomes=tuple(outcomes),
        beta_truth=scenario(cell.truth).beta_truth.copy(),
        eta_times=np.linspace(system.t0, system.t_end, _CURVE_POINTS),
    )
    if result.n_failed > max_fail_fraction * replicates:
        failed = [o for o in result.outcomes if not o.ok]
        raise StudyError(
            f"cell {cell.label}: {result.n_failed}/{replicates} replicates failed "
            f"(first failure: {failed[0].message})"
        )
    return result


def run_study(
    grid: str,
    replicates: int,
    master_seed: int,
    h: float = 0.05,
    method: str = "rk4",
    spline: Optional[SplineConfig] = None,
    optimizer: Optional[OptimizerConfig] = None,
    space_constant: Optional[SearchSpace] = None,
    space_time_varying: Optional[SearchSpace] = None,
    threads: int = 1,
    progress=None,
) -> StudyResult:
    """Run every cell of ``grid`` ('small', 'large' or 'both')."""
    results = []
    for cell in study_cells(grid):
        space = space_constant if cell.fit_kind == "constant" else space_time_varying
        res = run_cell(
            cell,
            replicates,
            master_seed,
            h=h,
            method=method,
            spline=spline,
            optimizer=optimizer,
            space=space,
            threads=threads,
        )
        if progress is not None:
            progress(res)
        results.append(res)
    return StudyResult(cells=tuple(results), replicates=replicates, master_seed=master_seed)


# ---------------------------------------------------------------------------
# CSV rendering.  Floats are written with repr() so files parse back to the
# exact values they were computed from.

_PARAMS = ("lambda", "N", "c")


def estimates_csv(res: CellResult) -> str:
    cols = ["replicate", "ok", "rss"]
    cols += [f"est_{p}" for p in _PARAMS] + [f"var_{p}" for p in _PARAMS]
    lines = [",".join(cols)]
    for o in res.outcomes:
        row = [str(o.replicate), "1" if o.ok else "0", repr(float(o.rss))]
        if o.ok:
            row += [repr(float(v)) for v in o.beta]
            row += [repr(float(v)) for v in o.variances]
        else:
            row += [""] * (2 * len(_PARAMS))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def eta_mean_csv(res: CellResult) -> str:
    lines = ["time,eta_true,eta_mean"]
    truth = res.eta_truth
    mean = res.eta_mean
    for t, tr, mu in zip(res.eta_times, truth, mean):
        lines.append(f"{float(t)!r},{float(tr)!r},{float(mu)!r}")
    return "\n".join(lines) + "\n"


def are_table_csv(result: StudyResult) -> str:
    """One row per cell; per-parameter ARE / sigma2_ode / sigma2_emp triplets."""
    cols = ["change", "truth", "fitted"]
    for p in _PARAMS:
        cols += [f"are_{p}", f"s2ode_{p}", f"s2emp_{p}"]
    cols += ["n_ok", "n_failed"]
    lines = [",".join(cols)]
    for res in result.cells:
        row = [res.cell.change, res.cell.truth, res.cell.fit_kind]
        are, s2o, s2e = res.are, res.sigma2_ode, res.sigma2_emp
        for j in range(len(_PARAMS)):
            row += [repr(float(are[j])), repr(float(s2o[j])), repr(float(s2e[j]))]
        row += [str(res.n_replicates - res.n_failed), str(res.n_failed)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
