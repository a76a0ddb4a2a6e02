"""Built-in ODE systems, simulation scenarios and dataset handling.

The main system is a three-compartment HIV dynamic model

    dT_U/dt = lambda - rho T_U - eta(t) T_U V
    dT_I/dt = eta(t) T_U V - delta T_I
    dV/dt   = N delta T_I - c V

observed through total CD4+ count y1 = T_U + T_I and viral load y2 = V, both
measured on the log scale with noise proportional to the raw signal.  The
clearance rates rho and delta are treated as known and baked into the system;
the free constants are (lambda, N, c) and the infection rate eta(t) is either
an unknown constant or an unknown smooth function.

A small exponential-decay system is included as a cheap, fully tractable
test bed for the estimation and bootstrap machinery.

Datasets round-trip losslessly through CSV plus a plain-text metadata
sidecar (same stem, ``.meta`` suffix); all file writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .rng import substream
from .solver import integrate, interpolate, make_uniform_grid

__all__ = [
    "OdeSystem",
    "Dataset",
    "Scenario",
    "hiv_system",
    "decay_system",
    "scenario",
    "scenario_eta",
    "simulate_dataset",
    "write_dataset",
    "read_dataset",
    "SCENARIO_IDS",
]

SCENARIO_IDS = ("i", "ii", "iii", "iv", "complex")


@dataclass(frozen=True)
class OdeSystem:
    """A parametrized ODE with a fixed observation map.

    ``rhs(t, x, beta, eta_value)`` must broadcast over a leading population
    axis when ``vectorized`` is True: ``x`` (P, K), ``beta`` (P, d),
    ``eta_value`` (P,) or None.  ``observe`` maps states (..., K) to
    observables (..., obs_dim).  ``obs_log`` flags which observables are
    fitted on the log scale.
    """

    name: str
    dimension: int
    obs_dim: int
    rhs: Callable
    observe: Callable
    initial_state: np.ndarray
    t0: float
    t_end: float
    param_names: tuple
    uses_eta: bool
    obs_log: tuple
    fixed: dict = field(default_factory=dict)
    vectorized: bool = True

    def __post_init__(self):
        x0 = np.asarray(self.initial_state, dtype=float)
        if x0.shape != (self.dimension,):
            raise ValueError("initial state does not match the system dimension")
        object.__setattr__(self, "initial_state", x0)
        if self.t_end <= self.t0:
            raise ValueError("need t_end > t0")
        if len(self.obs_log) != self.obs_dim:
            raise ValueError("obs_log must have one flag per observable")


def hiv_system(
    rho: float = 0.108,
    delta: float = 0.5,
    initial_state=(600.0, 30.0, 1e5),
    t_span=(0.0, 20.0),
) -> OdeSystem:
    """HIV dynamics with known (rho, delta); free constants (lambda, N, c).

    State is (T_U, T_I, V); eta is required (constant or callable during
    integration, estimated constant or spline during fitting).
    """

    def rhs(t, x, beta, eta_value):
        if eta_value is None:
            raise ValueError("the HIV system needs an infection rate eta")
        tu = x[..., 0]
        ti = x[..., 1]
        v = x[..., 2]
        lam = beta[..., 0]
        n_virions = beta[..., 1]
        clear = beta[..., 2]
        infection = eta_value * tu * v
        out = np.empty_like(x)
        out[..., 0] = lam - rho * tu - infection
        out[..., 1] = infection - delta * ti
        out[..., 2] = n_virions * delta * ti - clear * v
        return out

    def observe(x):
        return np.stack([x[..., 0] + x[..., 1], x[..., 2]], axis=-1)

    return OdeSystem(
        name="hiv",
        dimension=3,
        obs_dim=2,
        rhs=rhs,
        observe=observe,
        initial_state=np.asarray(initial_state, dtype=float),
        t0=float(t_span[0]),
        t_end=float(t_span[1]),
        param_names=("lambda", "N", "c"),
        uses_eta=True,
        obs_log=(True, True),
        fixed={"rho": float(rho), "delta": float(delta)},
    )


def decay_system(x0: float = 1.0, t_span=(0.0, 2.0)) -> OdeSystem:
    """dx/dt = -rate * x; exact solution x0 * exp(-rate t)."""

    def rhs(t, x, beta, eta_value):
        return -beta[..., 0:1] * x

    def observe(x):
        return x

    return OdeSystem(
        name="decay",
        dimension=1,
        obs_dim=1,
        rhs=rhs,
        observe=observe,
        initial_state=np.asarray([x0], dtype=float),
        t0=float(t_span[0]),
        t_end=float(t_span[1]),
        param_names=("rate",),
        uses_eta=False,
        obs_log=(False,),
    )


# ---------------------------------------------------------------------------
# Simulation scenarios


def scenario_eta(sid: str, t):
    """True infection rate for scenario ``sid``, vectorized over ``t``.

    i   : constant 9.5e-6 (small level)
    ii  : 9e-5 (1 - 0.9 cos(pi t / 400)), a ~10% drift around 9.3e-6
    iii : constant 3.84e-5 (matches the time average of iv)
    iv  : 9e-5 (1 - 0.9 cos(pi t / 40)), a 10-fold swing over [0, 20]
    complex: 9e-6 + 9e-7 t (1 - 0.5 sin(pi t / 5.8)), non-monotone growth
    """
    t = np.asarray(t, dtype=float)
    if sid == "i":
        return np.broadcast_to(9.5e-6, t.shape).copy() if t.ndim else 9.5e-6
    if sid == "ii":
        return 9e-5 * (1.0 - 0.9 * np.cos(np.pi * t / 400.0))
    if sid == "iii":
        return np.broadcast_to(3.84e-5, t.shape).copy() if t.ndim else 3.84e-5
    if sid == "iv":
        return 9e-5 * (1.0 - 0.9 * np.cos(np.pi * t / 40.0))
    if sid == "complex":
        return 9.0e-6 + 9.0e-7 * t * (1.0 - 0.5 * np.sin(np.pi * t / 5.8))
    raise ValueError(f"unknown scenario {sid!r}; expected one of {SCENARIO_IDS}")


@dataclass(frozen=True)
class Scenario:
    """Ground truth for one simulation cell."""

    sid: str
    grid_size: str  # 'small' or 'large' eta variation
    eta_kind: str  # 'constant' or 'time_varying'
    beta_truth: np.ndarray  # (lambda, N, c)
    design_times: np.ndarray
    noise_fraction: float

    def eta(self, t):
        return scenario_eta(self.sid, t)

    @property
    def eta_constant(self) -> Optional[float]:
        return float(scenario_eta(self.sid, 0.0)) if self.eta_kind == "constant" else None


def scenario(sid: str) -> Scenario:
    """Standard scenario: beta = (36, 1000, 3), n = 40 half-unit times, 20% noise."""
    kinds = {
        "i": ("small", "constant"),
        "ii": ("small", "time_varying"),
        "iii": ("large", "constant"),
        "iv": ("large", "time_varying"),
        "complex": ("large", "time_varying"),
    }
    if sid not in kinds:
        raise ValueError(f"unknown scenario {sid!r}; expected one of {SCENARIO_IDS}")
    grid_size, eta_kind = kinds[sid]
    return Scenario(
        sid=sid,
        grid_size=grid_size,
        eta_kind=eta_kind,
        beta_truth=np.asarray([36.0, 1000.0, 3.0]),
        design_times=0.5 * np.arange(1, 41, dtype=float),
        noise_fraction=0.2,
    )


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class Dataset:
    """Observed trajectories on the fitting scale.

    ``observations[i, j]`` is the j-th observable at ``times[i]``, already
    log-transformed where ``log_scale[j]`` is set.  ``noise_sd`` (raw scale)
    is carried for reference when known.  ``weights`` are optional per-time
    multipliers used by the weighted bootstrap; None means all ones.
    """

    times: np.ndarray
    observations: np.ndarray
    log_scale: tuple
    noise_sd: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        obs = np.asarray(self.observations, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a non-empty 1-D array")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if obs.shape != (times.size, len(self.log_scale)):
            raise ValueError(
                f"observations must have shape ({times.size}, {len(self.log_scale)})"
            )
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(obs))):
            raise ValueError("times and observations must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "log_scale", tuple(bool(b) for b in self.log_scale))
        if self.noise_sd is not None:
            sd = np.asarray(self.noise_sd, dtype=float)
            if sd.shape != obs.shape:
                raise ValueError("noise_sd must match the observation shape")
            object.__setattr__(self, "noise_sd", sd)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != times.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite, non-negative, one per time")
            object.__setattr__(self, "weights", w)

    @property
    def n_times(self) -> int:
        return int(self.times.size)

    @property
    def n_scalars(self) -> int:
        return int(self.observations.size)

    def with_weights(self, weights) -> "Dataset":
        return replace(self, weights=weights)


def simulate_dataset(
    system: OdeSystem,
    scen: Scenario,
    seed,
    h_truth: float = 0.005,
    times=None,
    noise_fraction: Optional[float] = None,
    method: str = "rk4",
) -> Dataset:
    """Generate one noisy dataset from a scenario's exact trajectory.

    The truth is integrated at the fine step ``h_truth`` and read off at the
    design times.  Noise is drawn as one standard-normal matrix of shape
    (n, obs_dim) from ``substream(seed)`` (or directly from ``seed`` when a
    Generator is passed), scaled per point to ``noise_fraction`` times the
    raw signal, added on the raw scale, and the flagged coordinates are then
    log-transformed.  A draw that lands at or below zero under a log flag is
    an error: that replicate cannot be represented on the fitting scale.
    """
    times = scen.design_times if times is None else np.asarray(times, dtype=float)
    frac = scen.noise_fraction if noise_fraction is None else float(noise_fraction)
    if frac < 0:
        raise ValueError("noise fraction must be >= 0")
    if np.any(times < system.t0) or np.any(times > system.t_end):
        raise ValueError("design times outside the system interval")

    grid = make_uniform_grid(system.t0, system.t_end, h_truth)
    sol = integrate(system, scen.beta_truth, grid, method=method, eta=scen.eta if system.uses_eta else None)
    raw = system.observe(interpolate(sol, times))

    sd = frac * np.abs(raw)
    if frac > 0:
        rng = seed if isinstance(seed, np.random.Generator) else substream(int(seed))
        noisy = raw + sd * rng.standard_normal(raw.shape)
    else:
        noisy = raw.copy()

    obs = noisy.copy()
    for j, flag in enumerate(system.obs_log):
        if flag:
            if np.any(noisy[:, j] <= 0.0):
                raise ValueError(
                    f"noisy draw for observable {j + 1} is non-positive; "
                    "cannot log-transform this replicate"
                )
            obs[:, j] = np.log(noisy[:, j])

    meta = {
        "system": system.name,
        "scenario": scen.sid,
        "noise_fraction": repr(frac),
        "h_truth": repr(float(h_truth)),
        "seed": repr(seed) if not isinstance(seed, np.random.Generator) else "generator",
    }
    return Dataset(
        times=times,
        observations=obs,
        log_scale=system.obs_log,
        noise_sd=sd,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# CSV + sidecar I/O


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-odesieve-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def meta_path(csv_path: str) -> str:
    stem, _ = os.path.splitext(csv_path)
    return stem + ".meta"


def write_dataset(ds: Dataset, path: str) -> None:
    """Write ``<path>`` as CSV and ``<stem>.meta`` as a key = value sidecar.

    Floats are serialized with ``repr`` so the round trip is bit exact.
    """
    k = len(ds.log_scale)
    header = ["time"] + [f"y{j + 1}" for j in range(k)]
    if ds.noise_sd is not None:
        header += [f"sd{j + 1}" for j in range(k)]
    lines = [",".join(header)]
    for i in range(ds.n_times):
        row = [repr(float(ds.times[i]))]
        row += [repr(float(v)) for v in ds.observations[i]]
        if ds.noise_sd is not None:
            row += [repr(float(v)) for v in ds.noise_sd[i]]
        lines.append(",".join(row))
    _atomic_write(path, "\n".join(lines) + "\n")

    meta_lines = [f"log_scale = {','.join('true' if b else 'false' for b in ds.log_scale)}"]
    for key in sorted(ds.meta):
        meta_lines.append(f"{key} = {ds.meta[key]}")
    _atomic_write(meta_path(path), "\n".join(meta_lines) + "\n")


def read_dataset(path: str) -> Dataset:
    """Inverse of :func:`write_dataset`; malformed input raises ValueError."""
    side = meta_path(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if not os.path.exists(side):
        raise FileNotFoundError(f"missing metadata sidecar {side}")

    meta: dict = {}
    with open(side) as fh:
        for ln, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{side}:{ln}: expected 'key = value'")
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    if "log_scale" not in meta:
        raise ValueError(f"{side}: missing log_scale entry")
    log_scale = tuple(
        {"true": True, "false": False}[tok.strip().lower()]
        for tok in meta.pop("log_scale").split(",")
    )

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    k = len(log_scale)
    want_plain = ["time"] + [f"y{j + 1}" for j in range(k)]
    want_sd = want_plain + [f"sd{j + 1}" for j in range(k)]
    if header == want_sd:
        has_sd = True
    elif header == want_plain:
        has_sd = False
    else:
        raise ValueError(f"{path}: unexpected header {header!r}")

    body = [(ln, r) for ln, r in enumerate(rows[1:], start=2) if r]
    parsed = []
    for ln, row in body:
        if len(row) != len(header):
            raise ValueError(f"{path}: line {ln}: expected {len(header)} cells, got {len(row)}")
        try:
            parsed.append([float(v) for v in row])
        except ValueError as exc:
            raise ValueError(f"{path}: line {ln}: non-numeric cell ({exc})") from None
    data = np.asarray(parsed, dtype=float)
    if data.ndim != 2:
        raise ValueError(f"{path}: no data rows")

    times = data[:, 0]
    obs = data[:, 1 : 1 + k]
    sd = data[:, 1 + k : 1 + 2 * k] if has_sd else None
    return Dataset(times=times, observations=obs, log_scale=log_scale, noise_sd=sd, meta=meta)
