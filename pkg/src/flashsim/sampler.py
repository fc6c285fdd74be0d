"""Trajectory sampling: exact waiting times, site draws, ensembles.

Waiting times invert the exact survival function (no rate bound, no thinning):
a coarse scan over powers of E = e^{G dt'} brackets the crossing and dyadic
bisection against a precomputed propagator ladder refines the crossing time
to within tol_t. The ladder is built once per (model, horizon) and cached on
the model, so per-draw cost is matvecs only.

Randomness: trajectory i consumes the Philox stream keyed (seed, i), one
uniform per waiting-time draw plus one per realised flash, nothing else.
Replay is therefore independent of thread count, and snapshot states are
recovered by re-running a trajectory's stream with a shorter horizon.
"""

from __future__ import annotations

import math
import os
import time as _time
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _backend, _kernels_py, linalg
from .errors import ZeroTotalRateError
from .model import FlashModel, FlashRecord, collapse, propagate, require_normalized
from .rng import PhiloxStream

LADDER_LEVELS = 46  # finest ladder rung is dt' * 2^-46


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling controls; defaults follow the documented contract.

    t_max is the trajectory horizon. dt_grid bounds the coarse scan step
    (the actual step divides t_max evenly); tol_t is the time resolution of
    the waiting-time bisection; survival_floor clamps inversion targets so
    the search never chases survival below round-off.
    """

    t_max: float
    dt_grid: float | None = None
    tol_t: float = 1e-10
    survival_floor: float = 1e-12
    seed: int = 0
    stream_id: int = 0
    max_flashes_hint: int = 256

    def __post_init__(self):
        if not (math.isfinite(self.t_max) and self.t_max > 0):
            raise ValueError(f"t_max must be positive and finite, got {self.t_max}")
        if self.dt_grid is not None and not (math.isfinite(self.dt_grid) and self.dt_grid > 0):
            raise ValueError(f"dt_grid must be positive and finite, got {self.dt_grid}")
        if not 0 < self.tol_t < 1:
            raise ValueError(f"tol_t must be in (0, 1), got {self.tol_t}")
        if not 0 < self.survival_floor < 1:
            raise ValueError(f"survival_floor must be in (0, 1), got {self.survival_floor}")
        if self.max_flashes_hint < 1:
            raise ValueError("max_flashes_hint must be >= 1")

    def coarse_step(self) -> float:
        """Scan step: t_max / K with K = ceil(t_max / dt_grid), default K = 64."""
        dt = self.dt_grid if self.dt_grid is not None else self.t_max / 64.0
        k = max(1, int(math.ceil(self.t_max / dt - 1e-12)))
        return self.t_max / k


@dataclass(frozen=True)
class TrajectoryState:
    """State of one trajectory: wave function, clock, flash history."""

    psi: np.ndarray
    clock: float
    flashes: tuple[FlashRecord, ...] = ()
    halted: bool = False


@dataclass(frozen=True)
class RawTrajectory:
    """Compact trajectory record used by ensembles.

    channels encode (label, site) as label_index * n_sites + site.
    """

    times: np.ndarray
    channels: np.ndarray
    psi_final: np.ndarray
    clock: float

    def n_flashes(self) -> int:
        return int(self.times.shape[0])

    def records(self, model: FlashModel) -> tuple[FlashRecord, ...]:
        m = model.n_sites
        return tuple(
            FlashRecord(t=float(t), label=model.labels[int(c) // m], site=int(c) % m)
            for t, c in zip(self.times, self.channels)
        )


@dataclass
class EnsembleResult:
    """Ensemble of independent trajectories plus optional snapshot states."""

    model: FlashModel
    config: SamplerConfig
    n_traj: int
    trajectories: list[RawTrajectory]
    snapshot_times: tuple[float, ...]
    snapshot_density: list[np.ndarray]
    backend: str
    threads: int
    elapsed_s: float

    def flash_counts(self) -> np.ndarray:
        return np.array([t.n_flashes() for t in self.trajectories], dtype=np.int64)

    def first_flash_times(self) -> np.ndarray:
        """Times of each trajectory's first flash; trajectories without one are dropped."""
        return np.array([t.times[0] for t in self.trajectories if t.n_flashes() > 0])


_ladder_cache: "weakref.WeakKeyDictionary[FlashModel, dict]" = weakref.WeakKeyDictionary()


def propagator_ladder(model: FlashModel, delta: float) -> np.ndarray:
    """(LADDER_LEVELS + 1, d, d) array with rung j = e^{G delta 2^-j}, cached."""
    per_model = _ladder_cache.setdefault(model, {})
    ladder = per_model.get(delta)
    if ladder is None:
        rungs = [linalg.semigroup_exp(model.generator, delta * 0.5**j) for j in range(LADDER_LEVELS + 1)]
        ladder = np.ascontiguousarray(np.stack(rungs))
        per_model[delta] = ladder
    return ladder


def _capacity_guess(model: FlashModel, cfg: SamplerConfig) -> int:
    expected = model.total_rate_norm * cfg.t_max
    return max(cfg.max_flashes_hint, int(4 * expected) + 16)


def _run_raw(
    model: FlashModel,
    psi0: np.ndarray,
    cfg: SamplerConfig,
    stream_id: int,
    horizon: float | None = None,
    stop_after: int = 0,
    kernel=None,
) -> RawTrajectory:
    """One kernel run with buffer-overflow retry; deterministic in (seed, stream_id)."""
    if kernel is None:
        kernel = _backend.run_trajectory_kernel
    horizon = cfg.t_max if horizon is None else float(horizon)
    delta = cfg.coarse_step()
    ladder = propagator_ladder(model, delta)
    ops = model.channel_ops()
    capacity = _capacity_guess(model, cfg)
    while True:
        times, channels, psi, status, clock = kernel(
            ladder, ops, psi0, delta, horizon, cfg.tol_t, cfg.survival_floor,
            cfg.seed, stream_id, capacity, stop_after,
        )
        if status == _kernels_py.STATUS_BUFFER_FULL:
            capacity *= 4
            continue
        if status == _kernels_py.STATUS_ZERO_RATE:
            raise ZeroTotalRateError(
                f"total flash rate vanished mid-trajectory (stream {stream_id}); model data inconsistent"
            )
        return RawTrajectory(times=times, channels=channels, psi_final=psi, clock=clock)


def sample_waiting_time(
    model: FlashModel,
    psi: np.ndarray,
    cfg: SamplerConfig,
    rng: PhiloxStream,
    remaining: float | None = None,
) -> float | None:
    """Draw the next flash waiting time, or None when no flash occurs in time.

    Inverts P(T > t) = ||e^{Gt} psi||^2 against 1 - u, resolving the crossing
    time to within tol_t; the target is clamped at survival_floor. Consumes
    exactly one uniform.
    """
    v = require_normalized(psi)
    remaining = cfg.t_max if remaining is None else float(remaining)
    if remaining <= 0.0:
        return None
    delta = cfg.coarse_step()
    ladder = propagator_ladder(model, delta)
    levels = delta * np.ldexp(1.0, -np.arange(ladder.shape[0], dtype=np.int32))
    target = 1.0 - rng.uniform()
    if target < cfg.survival_floor:
        target = cfg.survival_floor
    found, t_rel, _v, _s = _kernels_py._waiting_scan(ladder, levels, delta, v, remaining, target, cfg.tol_t)
    if not found:
        return None
    if t_rel <= 0.0:
        t_rel = float(levels[-1])
    return float(t_rel)


def sample_flash_site(model: FlashModel, psi: np.ndarray, rng: PhiloxStream) -> tuple[str, int]:
    """Draw (label, site) with probability ||sqrt(Lambda_label(site)) psi||^2 / total.

    Consumes exactly one uniform; raises ZeroTotalRateError when the total
    rate vanishes on this state.
    """
    v = require_normalized(psi)
    chosen, _psi_new, total = _kernels_py._site_draw(model.channel_ops(), v, rng.uniform())
    if chosen < 0 or total <= 0.0:
        raise ZeroTotalRateError("total flash rate vanishes on this state")
    m = model.n_sites
    return model.labels[chosen // m], chosen % m


def initial_trajectory_state(model: FlashModel, psi0: np.ndarray) -> TrajectoryState:
    return TrajectoryState(psi=require_normalized(psi0).copy(), clock=0.0, flashes=(), halted=False)


def step(model: FlashModel, state: TrajectoryState, cfg: SamplerConfig, rng: PhiloxStream) -> TrajectoryState:
    """Advance to the next flash (or the horizon), collapsing the state.

    Consumes the stream exactly like the trajectory kernel, so repeated
    step() calls on PhiloxStream(seed, i) replay trajectory i of an ensemble
    up to floating-point equivalence. A halted state is returned unchanged.
    """
    if state.halted:
        return state
    remaining = cfg.t_max - state.clock
    tau = sample_waiting_time(model, state.psi, cfg, rng, remaining=remaining)
    if tau is None:
        v = propagate(model, state.psi, max(remaining, 0.0))
        v = v / np.linalg.norm(v)
        return TrajectoryState(psi=v, clock=cfg.t_max, flashes=state.flashes, halted=True)
    t_flash = state.clock + tau
    if t_flash <= state.clock:
        t_flash = math.nextafter(state.clock, math.inf)
    if t_flash >= cfg.t_max:
        v = propagate(model, state.psi, remaining)
        v = v / np.linalg.norm(v)
        return TrajectoryState(psi=v, clock=cfg.t_max, flashes=state.flashes, halted=True)
    v = propagate(model, state.psi, tau)
    v = v / np.linalg.norm(v)
    label, site = sample_flash_site(model, v, rng)
    v = collapse(model, v, label, site)
    rec = FlashRecord(t=t_flash, label=label, site=site)
    return TrajectoryState(psi=v, clock=t_flash, flashes=state.flashes + (rec,), halted=False)


def run_trajectory(model: FlashModel, psi0: np.ndarray, cfg: SamplerConfig) -> TrajectoryState:
    """Sample one complete trajectory on [0, t_max] with the active backend."""
    v = require_normalized(psi0)
    raw = _run_raw(model, v, cfg, stream_id=cfg.stream_id)
    return TrajectoryState(psi=raw.psi_final, clock=raw.clock, flashes=raw.records(model), halted=True)


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("FLASHSIM_THREADS", "").strip()
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def run_ensemble(
    model: FlashModel,
    psi0: np.ndarray,
    cfg: SamplerConfig,
    n_traj: int,
    threads: int | None = None,
    snapshot_times=(),
) -> EnsembleResult:
    """Sample n_traj independent trajectories; stream i is keyed (seed, i).

    Snapshot density matrices are averages of conditional states obtained by
    replaying each trajectory's stream with the snapshot as horizon, so they
    are exact functionals of the sampled flash histories. Results are
    byte-identical for any thread count.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    v = require_normalized(psi0)
    threads = _resolve_threads(threads)
    snapshot_times = tuple(float(s) for s in snapshot_times)
    for s in snapshot_times:
        if not 0.0 < s <= cfg.t_max:
            raise ValueError(f"snapshot time {s} outside (0, t_max]")
    t0 = _time.perf_counter()
    propagator_ladder(model, cfg.coarse_step())  # build once before threading

    def one(i: int) -> RawTrajectory:
        return _run_raw(model, v, cfg, stream_id=i)

    def snap(args) -> np.ndarray:
        i, s = args
        raw = _run_raw(model, v, cfg, stream_id=i, horizon=s)
        return np.outer(raw.psi_final, raw.psi_final.conj())

    if threads == 1:
        trajectories = [one(i) for i in range(n_traj)]
        outers = [[snap((i, s)) for i in range(n_traj)] for s in snapshot_times]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajectories = list(pool.map(one, range(n_traj)))
            outers = [list(pool.map(snap, ((i, s) for i in range(n_traj)))) for s in snapshot_times]
    snapshot_density = []
    for states in outers:
        acc = np.zeros((model.dim, model.dim), dtype=np.complex128)
        for p in states:  # index order, so the sum is reproducible
            acc += p
        snapshot_density.append(acc / n_traj)
    elapsed = _time.perf_counter() - t0
    return EnsembleResult(
        model=model,
        config=cfg,
        n_traj=n_traj,
        trajectories=trajectories,
        snapshot_times=snapshot_times,
        snapshot_density=snapshot_density,
        backend=_backend.get_backend(),
        threads=threads,
        elapsed_s=elapsed,
    )
