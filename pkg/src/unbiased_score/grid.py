"""Level-indexed time grids and Euler-Maruyama transitions.

Grids come in two flavours: dyadic unit-time grids (step 2^-l, observations
at integer times) and irregular grids built from a vector of observation
times, where the base step is the smallest inter-observation gap and each
interval is filled with full steps plus a remainder step snapping exactly
onto the next observation time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TimeGrid",
    "LevelPairGrid",
    "build_unit_grid",
    "build_irregular_grid",
    "build_level_pair",
    "euler_step",
    "coarsen_increments",
]


@dataclass(frozen=True)
class TimeGrid:
    """A discretization of [t0, T] whose points include every observation time.

    obs_index[p] is the grid index k with times[k] == obs_times[p]. The
    initial time is not an observation.
    """

    level: int
    times: np.ndarray
    step_sizes: np.ndarray
    obs_index: np.ndarray
    horizon: float

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def n_obs(self):
        return len(self.obs_index)


@dataclass(frozen=True)
class LevelPairGrid:
    """Aligned grids at levels l-1 and l.

    coarse_to_fine[j] is the fine-grid index of coarse point j, so coarse
    step j spans fine steps coarse_to_fine[j-1]..coarse_to_fine[j].
    """

    fine: TimeGrid
    coarse: TimeGrid
    coarse_to_fine: np.ndarray


def build_unit_grid(level, horizon):
    """Dyadic grid on [0, T] with step 2^-level and observations at 1..T."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if horizon < 1:
        raise ValueError(f"horizon must be a positive integer, got {horizon}")
    horizon = int(horizon)
    delta = 2.0 ** (-level)
    n_steps = (1 << level) * horizon
    # k * 2^-l is exact in binary floating point, which keeps grids at
    # adjacent levels aligned bit-exactly.
    times = np.arange(n_steps + 1) * delta
    obs_index = np.arange(1, horizon + 1) * (1 << level)
    return TimeGrid(
        level=level,
        times=times,
        step_sizes=np.diff(times),
        obs_index=obs_index,
        horizon=float(horizon),
    )


def build_irregular_grid(obs_times, level):
    """Grid over irregular observation times.

    The base step is the smallest gap between consecutive observation
    times, halved per level. Each interval gets floor(gap/step) full steps;
    if the gap is not a multiple of the step, a final remainder step snaps
    exactly onto the observation time (the stored time is the observation
    time itself, not an accumulated sum).
    """
    obs_times = np.asarray(obs_times, dtype=float)
    if len(obs_times) < 2:
        raise ValueError("need at least two observation times")
    gaps = np.diff(obs_times)
    if np.any(gaps <= 0):
        raise ValueError("observation times must be strictly increasing")
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    delta = gaps.min() * 2.0 ** (-level)
    times = [obs_times[0]]
    obs_index = []
    for p in range(1, len(obs_times)):
        t_prev, t_next = obs_times[p - 1], obs_times[p]
        gap = t_next - t_prev
        ratio = gap / delta
        m = int(np.floor(ratio + 1e-9))
        exact = abs(ratio - round(ratio)) < 1e-9
        n_full = m if not exact else round(ratio)
        for k in range(1, n_full):
            times.append(t_prev + k * delta)
        if exact:
            times.append(t_next)
        else:
            times.append(t_prev + n_full * delta)
            times.append(t_next)
        obs_index.append(len(times) - 1)
    times = np.asarray(times)
    return TimeGrid(
        level=level,
        times=times,
        step_sizes=np.diff(times),
        obs_index=np.asarray(obs_index, dtype=int),
        horizon=float(obs_times[-1]),
    )


def build_level_pair(grid_builder, level):
    """Build grids at (level-1, level) and align coarse points to fine indices.

    grid_builder maps a level to a TimeGrid; both unit and irregular grids
    produce coarse points that are an exact subset of the fine points.
    """
    if level < 1:
        raise ValueError("level pair needs level >= 1")
    fine = grid_builder(level)
    coarse = grid_builder(level - 1)
    idx = np.searchsorted(fine.times, coarse.times)
    ok = (idx < len(fine.times)) & (fine.times[np.minimum(idx, len(fine.times) - 1)] == coarse.times)
    if not ok.all():
        raise ValueError("coarse grid points are not a subset of fine grid points")
    return LevelPairGrid(fine=fine, coarse=coarse, coarse_to_fine=idx)


def euler_step(model, theta, x, dt, v):
    """One Euler-Maruyama transition x + a(x) dt + sigma(x) v.

    v is the Brownian increment over the step; x and v may carry arbitrary
    leading batch dimensions with trailing dimension d.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape:
        raise ValueError(f"state/increment shape mismatch: {x.shape} vs {v.shape}")
    if dt <= 0:
        raise ValueError(f"step size must be positive, got {dt}")
    return x + model.drift(theta, x) * dt + model.apply_sigma(x, v)


def coarsen_increments(v1, v2):
    """Sum a pair of consecutive fine increments into one coarse increment."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != v2.shape:
        raise ValueError(f"increment shape mismatch: {v1.shape} vs {v2.shape}")
    return v1 + v2
