"""Path functional whose smoothing expectation is the score.

Given a discretized trajectory, the functional accumulates a drift-energy
term and a stochastic-integral term over the grid steps, per-observation
score terms, and (for models with a random start) the gradient of the
initial log-density. Averaging it over smoothing draws estimates the
gradient of the log-likelihood at the grid's resolution.
"""

from __future__ import annotations

import numpy as np

__all__ = ["base_step", "segment_rate_sums", "eval_score_functional"]


def base_step(grid):
    """The nominal step of a grid (remainder steps are strictly smaller)."""
    return float(np.max(grid.step_sizes))


def segment_rate_sums(model, theta, grid, states):
    """Per-observation-interval sums of the intensity along a trajectory.

    Sums are endpoint-inclusive: interval p covers grid indices from the
    previous observation (or the start) through the observation itself.

    Args:
      states: array (..., K+1, d) of grid-point states.

    Returns:
      array (..., P, d) of summed per-cell rates.
    """
    rates = model.intensity(theta, states)
    out = np.empty(states.shape[:-2] + (grid.n_obs, model.d))
    lo = 0
    for p, hi in enumerate(grid.obs_index):
        out[..., p, :] = rates[..., lo : hi + 1, :].sum(axis=-2)
        lo = hi
    return out


def eval_score_functional(model, theta, grid, states, obs):
    """Evaluate the score functional on one (batch of) trajectories.

    Args:
      states: array (..., K+1, d); leading axes are independent trajectories.
      obs: ObservationSet whose times match the grid's observation markers.

    Returns:
      array (..., d_theta).
    """
    states = np.asarray(states, dtype=float)
    if states.shape[-2] != len(grid.times):
        raise ValueError("trajectory length does not match grid")
    # an extra leading observation may sit at the grid's initial time
    offset = obs.n_obs - grid.n_obs
    if offset not in (0, 1):
        raise ValueError("observation count does not match grid markers")
    if offset == 1 and (model.obs_mode != "point" or obs.times[0] != grid.times[0]):
        raise ValueError("initial observation requires a point-observation model")
    if not np.array_equal(grid.times[grid.obs_index], obs.times[offset:]):
        raise ValueError("observation times missing from grid")

    x_prev = states[..., :-1, :]
    dx = states[..., 1:, :] - x_prev
    dt = grid.step_sizes  # (K,)

    a = model.drift(theta, x_prev)                      # (..., K, d)
    jac = model.drift_jacobian(theta, x_prev)           # (..., K, d, d_theta)
    # residual against the drift prediction, premultiplied by the inverse
    # diffusion covariance (constant for all models here)
    resid = dx - a * dt[..., :, None]
    weighted = resid @ model.cov_inv_const.T            # (..., K, d)
    # extended-precision accumulation over the K steps: increments at high
    # resolution are small differences of large sums
    per_step = np.einsum("...kdj,...kd->...kj", jac, weighted)
    g = per_step.astype(np.longdouble).sum(axis=-2)

    if model.obs_mode == "point":
        if offset == 1:
            g = g + model.obs_score(theta, obs.values[0], states[..., 0, :])
        for p, k in enumerate(grid.obs_index):
            g = g + model.obs_score(theta, obs.values[p + offset], states[..., k, :])
    else:
        dt0 = base_step(grid)
        rate_sums = segment_rate_sums(model, theta, grid, states)
        for p in range(grid.n_obs):
            g = g + model.obs_score_segment(
                theta, obs.values[p], rate_sums[..., p, :], dt0
            )

    if model.init_point is None:
        g = g + model.init_score(theta, states[..., 0, :])
    return np.asarray(g, dtype=float)
