"""Fixed-grid ODE integration with dense cubic Hermite output.

Two explicit steppers are provided: the classical four-stage Runge-Kutta
scheme (order 4) and forward Euler (order 1, kept for step-size bias
studies).  Solutions are stored as node states plus node derivatives so that
values between nodes come from local cubic Hermite interpolation; combined
with an order-p stepper the interpolated solution converges at O(h^min(p,4)).

Systems are passed as objects exposing ``dimension``, ``rhs``, ``t0``,
``t_end`` and ``vectorized`` (see :mod:`odesieve.models`); the right-hand
side has signature ``rhs(t, x, beta, eta_value)``.  A vectorized rhs accepts
stacked states ``(P, K)``, stacked parameters ``(P, d)`` and an ``(P,)`` eta
array, which lets the optimizer integrate a whole candidate population per
call (``integrate_batch``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Grid",
    "NumericalSolution",
    "BatchSolution",
    "DivergedTrajectoryError",
    "make_uniform_grid",
    "stage_times",
    "integrate",
    "integrate_batch",
    "interpolate",
    "interpolate_batch",
    "empirical_order",
]

_METHOD_ORDER = {"rk4": 4, "euler": 1}


class DivergedTrajectoryError(RuntimeError):
    """Raised when a trajectory leaves the finite floating-point range.

    Attributes
    ----------
    grid_index:
        Index of the first grid node whose state is non-finite.
    fraction_completed:
        Fraction of the grid integrated before failure, in [0, 1).
    """

    def __init__(self, grid_index: int, fraction_completed: float):
        self.grid_index = int(grid_index)
        self.fraction_completed = float(fraction_completed)
        super().__init__(
            f"trajectory diverged at grid index {grid_index} "
            f"({100.0 * fraction_completed:.1f}% of the grid completed)"
        )


@dataclass(frozen=True)
class Grid:
    """Strictly increasing time grid; ``max_step`` is the largest cell width."""

    points: np.ndarray
    max_step: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("grid needs at least two points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        gaps = np.diff(pts)
        if np.any(gaps <= 0.0):
            raise ValueError("grid points must be strictly increasing")
        actual = float(gaps.max())
        if not np.isclose(actual, self.max_step, rtol=1e-12, atol=0.0):
            raise ValueError(
                f"max_step {self.max_step!r} does not match largest cell width {actual!r}"
            )

    @property
    def t0(self) -> float:
        return float(self.points[0])

    @property
    def t_end(self) -> float:
        return float(self.points[-1])

    def __len__(self) -> int:
        return int(self.points.size)


@dataclass(frozen=True)
class NumericalSolution:
    """Grid states and rhs derivatives of one integrated trajectory.

    ``derivs[j]`` is exactly the system rhs at ``(points[j], states[j])``,
    which makes the stored data sufficient for cubic Hermite interpolation.
    ``order`` is the convergence order of the stepper that produced it.
    """

    grid: Grid
    states: np.ndarray
    derivs: np.ndarray
    order: int

    def __post_init__(self):
        m = len(self.grid)
        states = np.asarray(self.states, dtype=float)
        derivs = np.asarray(self.derivs, dtype=float)
        if states.shape != derivs.shape or states.ndim != 2 or states.shape[0] != m:
            raise ValueError("states/derivs must both have shape (len(grid), K)")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "derivs", derivs)


@dataclass(frozen=True)
class BatchSolution:
    """Population variant of :class:`NumericalSolution`.

    ``states``/``derivs`` have shape (P, m, K).  Divergence does not raise:
    ``ok[p]`` is False for failed members and ``fraction_completed[p]`` holds
    how much of the grid they survived (1.0 when ok).
    """

    grid: Grid
    states: np.ndarray
    derivs: np.ndarray
    order: int
    ok: np.ndarray
    fraction_completed: np.ndarray


def make_uniform_grid(t0: float, t_end: float, h: float) -> Grid:
    """Uniform grid of spacing ``h`` on [t0, t_end], end point always included.

    When (t_end - t0) is not an integer multiple of ``h`` the final cell is
    shorter than ``h``; it is never longer.
    """
    if not (np.isfinite(t0) and np.isfinite(t_end) and np.isfinite(h)):
        raise ValueError("grid bounds and step must be finite")
    if h <= 0.0:
        raise ValueError(f"step must be positive, got {h}")
    if t_end <= t0:
        raise ValueError(f"need t_end > t0, got [{t0}, {t_end}]")
    span = t_end - t0
    n_cells = int(np.ceil(span / h - 1e-9))
    n_cells = max(n_cells, 1)
    pts = t0 + h * np.arange(n_cells, dtype=float)
    # Guard against a vanishing final cell from floating-point spill.
    while pts.size > 1 and pts[-1] >= t_end - 1e-12 * h:
        pts = pts[:-1]
    pts = np.append(pts, t_end)
    return Grid(points=pts, max_step=float(np.diff(pts).max()))


def stage_times(grid: Grid, method: str = "rk4") -> np.ndarray:
    """Distinct times at which the stepper evaluates the rhs.

    For rk4 these are all nodes plus all cell midpoints (2m - 1 values,
    sorted); for euler just the nodes.  Callers that precompute a
    time-varying coefficient tabulate it at exactly these times and pass the
    table to :func:`integrate_batch`.
    """
    _check_method(method)
    pts = grid.points
    if method == "euler":
        return pts.copy()
    mids = 0.5 * (pts[:-1] + pts[1:])
    out = np.empty(2 * pts.size - 1, dtype=float)
    out[0::2] = pts
    out[1::2] = mids
    return out


def _check_method(method: str) -> int:
    if method not in _METHOD_ORDER:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(_METHOD_ORDER)}")
    return _METHOD_ORDER[method]


def _eta_table(eta, grid: Grid, method: str) -> Optional[np.ndarray]:
    """Tabulate a constant or callable eta at the stage times (scalar path)."""
    if eta is None:
        return None
    times = stage_times(grid, method)
    if callable(eta):
        vals = np.asarray([float(eta(t)) for t in times], dtype=float)
    else:
        vals = np.full(times.shape, float(eta))
    return vals


class _SingleTrajectoryAdapter:
    """Present a scalar rhs as a vectorized one for P=1 batch integration."""

    vectorized = True

    def __init__(self, system):
        self._system = system
        self.dimension = system.dimension
        self.initial_state = system.initial_state

    def rhs(self, t, x, betas, eta):
        eta_val = None if eta is None else float(eta[0])
        out = self._system.rhs(t, x[0], betas[0], eta_val)
        return np.asarray(out, dtype=float)[None, :]


def integrate(system, beta, grid: Grid, method: str = "rk4", eta=None) -> NumericalSolution:
    """Integrate one trajectory of ``system`` on ``grid``.

    ``beta`` is the constant-parameter vector handed to the rhs; ``eta`` is
    None, a scalar, or a callable t -> value for systems with a time-varying
    coefficient.  Non-finite states abort with
    :class:`DivergedTrajectoryError`.
    """
    order = _check_method(method)
    beta = np.asarray(beta, dtype=float)
    x0 = np.asarray(system.initial_state, dtype=float)
    if x0.shape != (system.dimension,):
        raise ValueError("initial state does not match system dimension")
    eta_vals = _eta_table(eta, grid, method)
    runner = system if getattr(system, "vectorized", False) else _SingleTrajectoryAdapter(system)
    batched = integrate_batch(
        runner,
        beta[None, :],
        grid,
        method=method,
        eta_stage=None if eta_vals is None else eta_vals[None, :],
    )
    if not batched.ok[0]:
        finite = np.isfinite(batched.states[0]).all(axis=1)
        bad = int(np.argmin(finite))
        raise DivergedTrajectoryError(bad, float(batched.fraction_completed[0]))
    return NumericalSolution(
        grid=grid, states=batched.states[0], derivs=batched.derivs[0], order=order
    )


def integrate_batch(
    system,
    betas: np.ndarray,
    grid: Grid,
    method: str = "rk4",
    eta_stage: Optional[np.ndarray] = None,
) -> BatchSolution:
    """Integrate P candidate parameter vectors in lockstep.

    ``betas`` has shape (P, d).  ``eta_stage`` is None or a (P, S) table of
    the time-varying coefficient at ``stage_times(grid, method)``; pass a
    constant column to emulate a scalar eta.  Requires a vectorized rhs.
    Diverged members keep NaN states past the failure node instead of
    raising, so one bad candidate cannot poison a population evaluation.
    """
    order = _check_method(method)
    if not getattr(system, "vectorized", False):
        raise ValueError("integrate_batch needs a system with a vectorized rhs")
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    P = betas.shape[0]
    pts = grid.points
    m = pts.size
    K = system.dimension
    n_stage = 2 * m - 1 if method == "rk4" else m
    if eta_stage is not None:
        eta_stage = np.asarray(eta_stage, dtype=float)
        if eta_stage.shape != (P, n_stage):
            raise ValueError(
                f"eta_stage must have shape ({P}, {n_stage}), got {eta_stage.shape}"
            )

    rhs = system.rhs
    states = np.empty((P, m, K), dtype=float)
    derivs = np.empty((P, m, K), dtype=float)
    x = np.broadcast_to(np.asarray(system.initial_state, dtype=float), (P, K)).copy()
    states[:, 0, :] = x
    # Members that blow up are frozen at the origin as soon as they produce a
    # non-finite state: NaN arithmetic is drastically slower than ordinary
    # floating point, so letting dead members keep integrating NaNs would slow
    # the whole population down.  fail_node[p] == m means "never failed".
    fail_node = np.full(P, m, dtype=np.intp)
    alive = np.ones(P, dtype=bool)

    def freeze_bad(x_new: np.ndarray, node: int) -> np.ndarray:
        bad_new = alive & ~np.isfinite(x_new).all(axis=1)
        if np.any(bad_new):
            fail_node[bad_new] = node
            alive[bad_new] = False
            x_new[bad_new] = 0.0
        return x_new

    def eta_at(idx: int):
        return None if eta_stage is None else eta_stage[:, idx]

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if method == "euler":
            k1 = np.asarray(rhs(pts[0], x, betas, eta_at(0)), dtype=float)
            for j in range(m - 1):
                derivs[:, j, :] = k1
                x = freeze_bad(x + (pts[j + 1] - pts[j]) * k1, j + 1)
                states[:, j + 1, :] = x
                k1 = np.asarray(rhs(pts[j + 1], x, betas, eta_at(j + 1)), dtype=float)
            derivs[:, m - 1, :] = k1
        else:
            k1 = np.asarray(rhs(pts[0], x, betas, eta_at(0)), dtype=float)
            for j in range(m - 1):
                derivs[:, j, :] = k1
                h = pts[j + 1] - pts[j]
                t_mid = 0.5 * (pts[j] + pts[j + 1])
                e_mid = eta_at(2 * j + 1)
                k2 = np.asarray(rhs(t_mid, x + (0.5 * h) * k1, betas, e_mid), dtype=float)
                k3 = np.asarray(rhs(t_mid, x + (0.5 * h) * k2, betas, e_mid), dtype=float)
                k4 = np.asarray(
                    rhs(pts[j + 1], x + h * k3, betas, eta_at(2 * j + 2)), dtype=float
                )
                x = freeze_bad(x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), j + 1)
                states[:, j + 1, :] = x
                k1 = np.asarray(rhs(pts[j + 1], x, betas, eta_at(2 * j + 2)), dtype=float)
            derivs[:, m - 1, :] = k1

    # Catch the remaining failure mode: a finite state whose rhs is not
    # finite; the interpolant would silently emit NaN there otherwise.
    node_bad = ~(np.isfinite(states).all(axis=2) & np.isfinite(derivs).all(axis=2))
    late = alive & node_bad.any(axis=1)
    if np.any(late):
        fail_node[late] = np.argmax(node_bad[late], axis=1)
        alive[late] = False

    ok = alive
    fraction = np.ones(P, dtype=float)
    bad = ~ok
    if np.any(bad):
        first_bad = fail_node[bad]
        fraction[bad] = np.maximum(first_bad - 1, 0) / (m - 1)
        # NaN out everything from the failure node on (including the frozen
        # zeros) so dead trajectories cannot be mistaken for data.
        tail = np.arange(m)[None, :] >= first_bad[:, None]
        for arr in (states, derivs):
            sub = arr[bad]
            sub[tail] = np.nan
            arr[bad] = sub
    return BatchSolution(
        grid=grid,
        states=states,
        derivs=derivs,
        order=order,
        ok=ok,
        fraction_completed=fraction,
    )


def _locate(points: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cell index, local coordinate and cell width for each query time."""
    span = points[-1] - points[0]
    tol = 1e-9 * span
    if np.any(t < points[0] - tol) or np.any(t > points[-1] + tol):
        raise ValueError("interpolation time outside the solution interval")
    tc = np.clip(t, points[0], points[-1])
    cells = np.clip(np.searchsorted(points, tc, side="right") - 1, 0, points.size - 2)
    width = points[cells + 1] - points[cells]
    s = (tc - points[cells]) / width
    return cells, s, width


def _hermite_weights(s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    return h00, h10, h01, h11


def interpolate(solution: NumericalSolution, t) -> np.ndarray:
    """Evaluate the solution at time(s) ``t`` by local cubic Hermite pieces.

    Grid nodes reproduce the stored states exactly.  Returns shape (K,) for
    scalar ``t`` and (n, K) for an array.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    pts = solution.grid.points
    cells, s, width = _locate(pts, t_arr)
    h00, h10, h01, h11 = _hermite_weights(s)
    y0 = solution.states[cells]
    y1 = solution.states[cells + 1]
    m0 = solution.derivs[cells]
    m1 = solution.derivs[cells + 1]
    w = width[:, None]
    out = h00[:, None] * y0 + h10[:, None] * (w * m0) + h01[:, None] * y1 + h11[:, None] * (w * m1)
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return out[0]
    return out


def interpolate_batch(batch: BatchSolution, t: np.ndarray) -> np.ndarray:
    """Hermite-interpolate every population member at times ``t``; (P, n, K)."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    pts = batch.grid.points
    cells, s, width = _locate(pts, t_arr)
    h00, h10, h01, h11 = _hermite_weights(s)
    y0 = batch.states[:, cells, :]
    y1 = batch.states[:, cells + 1, :]
    m0 = batch.derivs[:, cells, :]
    m1 = batch.derivs[:, cells + 1, :]
    w = width[None, :, None]
    return (
        h00[None, :, None] * y0
        + h10[None, :, None] * (w * m0)
        + h01[None, :, None] * y1
        + h11[None, :, None] * (w * m1)
    )


def empirical_order(
    system,
    beta,
    t_probe: float,
    steps: Sequence[float],
    method: str = "rk4",
    eta=None,
    reference: Optional[Callable[[float], np.ndarray]] = None,
) -> float:
    """Observed convergence order at ``t_probe`` from a log-log error fit.

    Integrates the system once per step size, measures the interpolated-state
    error against ``reference(t_probe)`` (or a 64x-finer rk4 run when no
    analytic reference is given) and returns the slope of log error versus
    log h.  Off-grid probes exercise the Hermite interpolant, so the slope
    reflects the combined stepper+interpolation order.
    """
    steps = [float(h) for h in steps]
    if len(steps) < 3:
        raise ValueError("need at least three step sizes")
    if len(set(steps)) != len(steps):
        raise ValueError("step sizes must be distinct")
    if any(h <= 0 for h in steps):
        raise ValueError("step sizes must be positive")
    if max(steps) / min(steps) < 4.0:
        raise ValueError("step sizes must span at least a factor of 4 for a stable slope")
    if not (system.t0 <= t_probe <= system.t_end):
        raise ValueError("probe time outside the system interval")

    if reference is None:
        fine = make_uniform_grid(system.t0, system.t_end, min(steps) / 64.0)
        ref_sol = integrate(system, beta, fine, method="rk4", eta=eta)
        ref = interpolate(ref_sol, t_probe)
    else:
        ref = np.asarray(reference(t_probe), dtype=float)

    errs = []
    for h in steps:
        grid = make_uniform_grid(system.t0, system.t_end, h)
        sol = integrate(system, beta, grid, method=method, eta=eta)
        approx = interpolate(sol, t_probe)
        errs.append(float(np.linalg.norm(approx - ref)))
    errs = np.asarray(errs)
    if np.any(errs == 0.0):
        raise ValueError("probe error is exactly zero; cannot fit a convergence order")
    slope, _ = np.polyfit(np.log(np.asarray(steps)), np.log(errs), 1)
    return float(slope)
