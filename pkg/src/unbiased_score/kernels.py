"""Conditional particle filter kernels on trajectory space.

One engine drives four sweep modes over a shared batch dimension:

* "cpf"   — a single system of N particles with a pinned reference;
* "ccpf2" — two systems at one level, common Brownian increments and
            maximally coupled resampling;
* "mlcpf" — one system per level of an adjacent level pair, the coarse
            system consuming summed fine increments, resampling coupled
            across levels;
* "ccpf4" — two systems per level, increments common within and across
            levels, resampling drawn by the four-index coupler.

Each sweep propagates N-1 free particles per system, pins the reference
trajectory into the last slot, weights at observation times, resamples
(always, or adaptively when the minimum effective sample size across the
systems drops below N/2), draws terminal indices from the final weights and
back-traces ancestor lines to produce output trajectories.

All arrays carry a leading batch axis of independent replicates sharing the
same model, grid and parameter; each replicate occupies one row of every
coupled-resampling draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import base_step
from .grid import LevelPairGrid, TimeGrid
from .resampling import (
    common_uniform_couple_many,
    maximal_couple2_many,
    maximal_couple4_many,
    multinomial_many,
    normalize,
)
from .rng import derive_stream

__all__ = [
    "SweepOptions",
    "SweepOutput",
    "sweep_batch",
    "cpf_sweep",
    "ccpf2_sweep",
    "mlcpf_sweep",
    "ccpf4_sweep",
    "init_trajectories",
    "init_trajectories_pair",
]

_MODE_SYSTEMS = {"cpf": 1, "ccpf2": 2, "mlcpf": 2, "ccpf4": 4}


@dataclass(frozen=True)
class SweepOptions:
    """Per-sweep behavior switches.

    adaptive_resampling: accumulate weights across observation times and
      resample only when the minimum ESS over all systems falls below N/2
      (all systems resample in lockstep).
    ancestor_sampling: redraw the reference slot's ancestor at resampling
      events from weights tilted by the one-step transition density toward
      the reference's next state; coupled modes draw these indices through
      the same coupling as the regular ancestors.
    coupling: "maximal" (default) or the "common-uniform" comparator which
      inverts every system's CDF with one shared uniform.
    conditional_redraw: how the four-index sampler redraws the barred index
      of a level whose two systems still differ once the other level's
      systems agree — "coupled" (default, maximally coupled to the same
      level's unbarred index) or "independent" (drawn from the conditional
      law alone).
    """

    adaptive_resampling: bool = False
    ancestor_sampling: bool = False
    coupling: str = "maximal"
    common_residuals: bool = False
    conditional_redraw: str = "coupled"


@dataclass
class SweepOutput:
    """Backtraced trajectories and sweep diagnostics.

    traj: list with one array (B, n_sys, K_g+1, d) per grid group (coarse
    group first in multilevel modes). euler_steps counts drift/diffusion
    transition evaluations per batch row. resample_counts counts triggered
    resampling events per row.
    """

    traj: list
    euler_steps: int
    resample_counts: np.ndarray
    min_ess: np.ndarray


def _groups_for(mode, grids):
    if mode in ("cpf", "ccpf2"):
        if not isinstance(grids, TimeGrid):
            raise ValueError(f"mode {mode} needs a single TimeGrid")
        return [(grids, _MODE_SYSTEMS[mode])], None
    if not isinstance(grids, LevelPairGrid):
        raise ValueError(f"mode {mode} needs a LevelPairGrid")
    n = 1 if mode == "mlcpf" else 2
    return [(grids.coarse, n), (grids.fine, n)], grids


def init_trajectories(model, theta, grid, n_traj, stream):
    """Independent draws from the discretized path law on a grid.

    Used to initialize chains: simulate n_traj unconditional Euler paths
    (shape (n_traj, K+1, d)) with fresh increments.
    """
    K = grid.n_steps
    if model.init_point is not None:
        x = np.broadcast_to(model.init_point, (n_traj, model.d)).copy()
    else:
        x = init_states(model, theta, stream, (n_traj,))
    out = np.empty((n_traj, K + 1, model.d))
    out[:, 0] = x
    for k in range(1, K + 1):
        dt = grid.step_sizes[k - 1]
        v = stream.standard_normal((n_traj, model.d)) * np.sqrt(dt)
        x = x + model.drift(theta, x) * dt + model.apply_sigma(x, v)
        out[:, k] = x
    return out


def init_trajectories_pair(model, theta, pair, n_traj, stream):
    """Common-increment draws from the coarse/fine discretized path laws.

    Simulates fine-resolution Euler paths and drives coarse-resolution paths
    with the summed fine increments, returning [coarse, fine] arrays of
    shapes (n_traj, Kc+1, d) and (n_traj, Kf+1, d).
    """
    fine, coarse, c2f = pair.fine, pair.coarse, pair.coarse_to_fine
    if model.init_point is not None:
        xf = np.broadcast_to(model.init_point, (n_traj, model.d)).copy()
    else:
        xf = init_states(model, theta, stream, (n_traj,))
    xc = xf.copy()
    out_f = np.empty((n_traj, fine.n_steps + 1, model.d))
    out_c = np.empty((n_traj, coarse.n_steps + 1, model.d))
    out_f[:, 0] = xf
    out_c[:, 0] = xc
    vbuf = np.zeros((n_traj, model.d))
    cptr = 1
    for k in range(1, fine.n_steps + 1):
        dt = fine.step_sizes[k - 1]
        v = stream.standard_normal((n_traj, model.d)) * np.sqrt(dt)
        xf = xf + model.drift(theta, xf) * dt + model.apply_sigma(xf, v)
        out_f[:, k] = xf
        vbuf += v
        if cptr <= coarse.n_steps and c2f[cptr] == k:
            dtc = coarse.step_sizes[cptr - 1]
            xc = xc + model.drift(theta, xc) * dtc + model.apply_sigma(xc, vbuf)
            out_c[:, cptr] = xc
            vbuf[:] = 0.0
            cptr += 1
    return [out_c, out_f]


def init_states(model, theta, stream, size):
    """Initial states: the fixed start point or a draw from the start law."""
    if model.init_point is not None:
        return np.broadcast_to(model.init_point, size + (model.d,)).copy()
    return model.init_sample(theta, stream, size)


def _gather_particles(arr, idx):
    """arr (B, S, N, ...) gathered along the particle axis by idx (B, S, N')."""
    extra = arr.ndim - idx.ndim
    ix = idx.reshape(idx.shape + (1,) * extra)
    return np.take_along_axis(arr, np.broadcast_to(ix, idx.shape + arr.shape[idx.ndim:]), axis=2)


def _draw_ancestors(stream, probs_list, m, mode, opts):
    """Coupled index draws, one (B, m) array per system."""
    if opts.coupling == "common-uniform":
        return common_uniform_couple_many(stream, probs_list, m)
    if mode == "cpf":
        return [multinomial_many(stream, probs_list[0], m)]
    if mode in ("ccpf2", "mlcpf"):
        a, ab = maximal_couple2_many(
            stream, probs_list[0], probs_list[1], m,
            common_residuals=opts.common_residuals,
        )
        return [a, ab]
    a0, ab0, a1, ab1 = maximal_couple4_many(
        stream, probs_list[0], probs_list[1], probs_list[2], probs_list[3], m,
        conditional_redraw=opts.conditional_redraw,
    )
    return [a0, ab0, a1, ab1]


def _transition_logdensity(model, theta, x, target, dt):
    """log of the one-step Euler Gaussian density from x to target (no const)."""
    mean = x + model.drift(theta, x) * dt
    r = target[..., None, :] - mean
    q = np.einsum("...d,de,...e->...", r, model.cov_inv_const, r)
    return -0.5 * q / dt


def sweep_batch(model, theta, grids, obs, refs, N, seed_spec, opts=None, mode="cpf"):
    """Run one coupled sweep on a batch of replicates.

    Args:
      grids: TimeGrid for single-level modes, LevelPairGrid otherwise.
      refs: list of reference arrays, one per grid group, each of shape
        (B, n_sys_group, K_group+1, d). Single-level modes take one group.
      seed_spec: SeedSpec for this sweep; increments and resampling draw
        from separately derived child streams.

    Returns:
      SweepOutput with per-group output trajectories (B, n_sys, K+1, d).
    """
    if opts is None:
        opts = SweepOptions()
    if N < 2:
        raise ValueError("need at least two particles")
    model.check_theta(theta)
    groups, pair = _groups_for(mode, grids)
    if len(refs) != len(groups):
        raise ValueError("one reference array per grid group required")
    for (grid, n_sys), ref in zip(groups, refs):
        if ref.shape[1] != n_sys or ref.shape[2] != grid.n_steps + 1:
            raise ValueError("reference shape does not match mode/grid")
    B = refs[0].shape[0]
    d = model.d
    rslot = N - 1
    segment = model.obs_mode == "segment"

    stream_incr = derive_stream(seed_spec.child("incr"))
    stream_res = derive_stream(seed_spec.child("res"))

    fine_grid = groups[-1][0]
    Kf = fine_grid.n_steps
    n_obs = fine_grid.n_obs
    # an extra leading observation at the initial time weights the initial
    # particle draw instead of adding a grid event
    obs_offset = obs.n_obs - n_obs
    if obs_offset not in (0, 1):
        raise ValueError("observation count does not match grid markers")
    if obs_offset == 1 and (segment or obs.times[0] != fine_grid.times[0]):
        raise ValueError("initial observation requires a point-observation model")

    # per-group mutable state; initial free particles are drawn once and
    # shared by every system in every group (common randomness)
    x0 = init_states(model, theta, stream_incr, (B, N - 1))
    cur, hist, logw, acc, events, dt0 = [], [], [], [], [], []
    for gi, ((grid, n_sys), ref) in enumerate(zip(groups, refs)):
        c = np.empty((B, n_sys, N, d))
        c[:, :, : N - 1] = x0[:, None]
        c[:, :, rslot] = ref[:, :, 0]
        cur.append(c)
        h = np.empty((B, n_sys, grid.n_steps + 1, N, d))
        h[:, :, 0] = c
        hist.append(h)
        if obs_offset == 1:
            logw.append(model.obs_logdensity(theta, obs.values[0], c))
        else:
            logw.append(np.zeros((B, n_sys, N)))
        acc.append(model.intensity(theta, c) if segment else None)
        events.append([])
        dt0.append(base_step(grid))

    if pair is not None:
        c2f = pair.coarse_to_fine
        cptr = 1
        vbuf = np.zeros((B, N - 1, d))

    euler_steps = 0
    resample_counts = np.zeros(B, dtype=int)
    min_ess = np.full(B, float(N))
    obs_ptr = 0
    terminal_idx = None

    for k in range(1, Kf + 1):
        dt_f = fine_grid.step_sizes[k - 1]
        V = stream_incr.standard_normal((B, N - 1, d)) * np.sqrt(dt_f)

        group_idx_now = []  # (group, grid index reached this step)
        # fine group always advances
        gfine = len(groups) - 1
        _propagate(model, theta, cur[gfine], V, dt_f)
        euler_steps += groups[gfine][1] * (N - 1)
        cur[gfine][:, :, rslot] = refs[gfine][:, :, k]
        hist[gfine][:, :, k] = cur[gfine]
        if segment:
            acc[gfine] += model.intensity(theta, cur[gfine])
        group_idx_now.append((gfine, k))

        if pair is not None:
            vbuf += V
            if cptr <= groups[0][0].n_steps and c2f[cptr] == k:
                dt_c = groups[0][0].step_sizes[cptr - 1]
                _propagate(model, theta, cur[0], vbuf, dt_c)
                euler_steps += groups[0][1] * (N - 1)
                cur[0][:, :, rslot] = refs[0][:, :, cptr]
                hist[0][:, :, cptr] = cur[0]
                if segment:
                    acc[0] += model.intensity(theta, cur[0])
                group_idx_now.append((0, cptr))
                vbuf[:] = 0.0
                cptr += 1

        if obs_ptr < n_obs and fine_grid.obs_index[obs_ptr] == k:
            y = obs.values[obs_ptr + obs_offset]
            is_terminal = obs_ptr == n_obs - 1
            for gi, (grid, n_sys) in enumerate(groups):
                x = cur[gi]
                if segment:
                    logg = model.obs_logdensity_segment(theta, y, acc[gi], dt0[gi])
                else:
                    logg = model.obs_logdensity(theta, y, x)
                logw[gi] = logw[gi] + logg
            probs_list = []
            for gi, (grid, n_sys) in enumerate(groups):
                probs_list.extend(normalize(logw[gi]).probs.transpose(1, 0, 2))
            ess_vals = np.stack(
                [1.0 / np.sum(p * p, axis=-1) for p in probs_list], axis=0
            )
            min_ess = np.minimum(min_ess, ess_vals.min(axis=0))
            if is_terminal:
                terminal_idx = _draw_ancestors(stream_res, probs_list, 1, mode, opts)
                break

            if opts.adaptive_resampling:
                trigger = ess_vals.min(axis=0) < N / 2.0
            else:
                trigger = np.ones(B, dtype=bool)
            drawn = _draw_ancestors(stream_res, probs_list, N - 1, mode, opts)
            if opts.ancestor_sampling:
                as_idx = _ancestor_sampling_draw(
                    model, theta, groups, cur, logw, refs, k, cptr if pair is not None else None,
                    fine_grid, stream_res, mode, opts,
                )
            resample_counts += trigger.astype(int)

            si = 0
            for gi, (grid, n_sys) in enumerate(groups):
                A = np.broadcast_to(
                    np.arange(N)[None, None, :], (B, n_sys, N)
                ).copy()
                for s in range(n_sys):
                    A[trigger, s, : N - 1] = drawn[si][trigger]
                    if opts.ancestor_sampling:
                        A[trigger, s, rslot] = as_idx[si][trigger, 0]
                    si += 1
                gidx = k if gi == gfine else cptr - 1
                events[gi].append((gidx, A))
                cur[gi] = _gather_particles(cur[gi], A)
                logw[gi] = np.where(trigger[:, None, None], 0.0, logw[gi])
                if segment:
                    acc[gi] = model.intensity(theta, cur[gi])
            obs_ptr += 1

    if terminal_idx is None:
        raise RuntimeError("grid ended before the terminal observation")

    # backward index tracing
    traj = []
    si = 0
    for gi, (grid, n_sys) in enumerate(groups):
        Kg = grid.n_steps
        b = np.empty((B, n_sys), dtype=int)
        for s in range(n_sys):
            b[:, s] = terminal_idx[si][:, 0]
            si += 1
        out = np.empty((B, n_sys, Kg + 1, d))
        ev = {idx: A for idx, A in events[gi]}
        for kk in range(Kg, -1, -1):
            if kk < Kg and kk in ev:
                b = np.take_along_axis(ev[kk], b[..., None], axis=2)[..., 0]
            out[:, :, kk] = _gather_particles(hist[gi][:, :, kk], b[..., None])[:, :, 0]
        traj.append(out)

    return SweepOutput(
        traj=traj,
        euler_steps=euler_steps,
        resample_counts=resample_counts,
        min_ess=min_ess,
    )


def _propagate(model, theta, cur, V, dt):
    """Advance the N-1 free particles of every system in place."""
    x = cur[:, :, : cur.shape[2] - 1]
    v = np.broadcast_to(V[:, None], x.shape)
    cur[:, :, : cur.shape[2] - 1] = (
        x + model.drift(theta, x) * dt + model.apply_sigma(x, v)
    )


def _ancestor_sampling_draw(
    model, theta, groups, cur, logw, refs, k_fine, cptr, fine_grid, stream, mode, opts
):
    """Reference-slot ancestor indices from transition-tilted weights."""
    probs_list = []
    for gi, (grid, n_sys) in enumerate(groups):
        if gi == len(groups) - 1:
            gidx = k_fine
        else:
            gidx = cptr - 1
        dt_next = grid.step_sizes[gidx]
        target = refs[gi][:, :, gidx + 1]
        logf = _transition_logdensity(model, theta, cur[gi], target, dt_next)
        probs = normalize(logw[gi] + logf).probs
        probs_list.extend(probs.transpose(1, 0, 2))
    return _draw_ancestors(stream, probs_list, 1, mode, opts)


def _single(refs_groups, model, theta, grids, obs, N, seed_spec, opts, mode):
    out = sweep_batch(
        model, theta, grids, obs,
        [np.asarray(r, dtype=float) for r in refs_groups],
        N, seed_spec, opts=opts, mode=mode,
    )
    return out


def cpf_sweep(model, theta, grid, obs, ref, N, seed_spec, opts=None):
    """One draw from the CPF kernel given a reference trajectory (K+1, d)."""
    out = _single([np.asarray(ref)[None, None]], model, theta, grid, obs, N,
                  seed_spec, opts, "cpf")
    out.traj = [out.traj[0][0, 0]]
    return out


def ccpf2_sweep(model, theta, grid, obs, ref, ref_bar, N, seed_spec, opts=None):
    """One coupled draw at a single level from a pair of references."""
    refs = np.stack([np.asarray(ref), np.asarray(ref_bar)])[None]
    out = _single([refs], model, theta, grid, obs, N, seed_spec, opts, "ccpf2")
    out.traj = [out.traj[0][0, 0], out.traj[0][0, 1]]
    return out


def mlcpf_sweep(model, theta, level_pair, obs, ref_coarse, ref_fine, N, seed_spec, opts=None):
    """One across-level coupled draw from (coarse, fine) references."""
    out = _single(
        [np.asarray(ref_coarse)[None, None], np.asarray(ref_fine)[None, None]],
        model, theta, level_pair, obs, N, seed_spec, opts, "mlcpf",
    )
    out.traj = [out.traj[0][0, 0], out.traj[1][0, 0]]
    return out


def ccpf4_sweep(
    model, theta, level_pair, obs, ref_coarse, ref_coarse_bar, ref_fine,
    ref_fine_bar, N, seed_spec, opts=None,
):
    """One four-system coupled draw across a level pair."""
    rc = np.stack([np.asarray(ref_coarse), np.asarray(ref_coarse_bar)])[None]
    rf = np.stack([np.asarray(ref_fine), np.asarray(ref_fine_bar)])[None]
    out = _single([rc, rf], model, theta, level_pair, obs, N, seed_spec, opts, "ccpf4")
    out.traj = [
        out.traj[0][0, 0], out.traj[0][0, 1],
        out.traj[1][0, 0], out.traj[1][0, 1],
    ]
    return out
