"""Unbiased score estimators built on coupled particle-filter chains.

A pair of chains at one resolution level (or two pairs across an adjacent
level pair) is advanced until it meets and for at least I iterations; the
time-averaged estimator combines the MCMC average of the path functional
with bias-correction terms accumulated before the meeting time. Randomizing
the highest level with a heavy-tailed PMF and dividing each level's
increment by the PMF tail removes the discretization bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .functional import eval_score_functional
from .grid import LevelPairGrid, build_level_pair
from .kernels import (
    SweepOptions,
    init_trajectories,
    init_trajectories_pair,
    sweep_batch,
)
from .rng import derive_stream

__all__ = [
    "IterationCapError",
    "ChainRecord",
    "LevelPMF",
    "ScoreEstimate",
    "EstimatorConfig",
    "time_averaged_score",
    "run_coupled_chains",
    "estimate_increment_l0",
    "estimate_increment",
    "build_level_pmf",
    "sample_levels",
    "unbiased_score",
    "level_increments",
    "replicate_scores",
    "average_replicates",
    "pilot_stopping_times",
    "burnin_from_pilot",
    "resolve_preset",
]

DEFAULT_ITERATION_CAP = 100_000
# fixed batching budget so results are reproducible across machines
_CHUNK_BUDGET_BYTES = 1e9


class IterationCapError(RuntimeError):
    """A coupled chain failed to meet within the iteration cap."""


@dataclass
class ChainRecord:
    """History of one batch of coupled chain runs.

    g_lead: array (n_iter+1, B, n_levels, d_theta) of functional values on
      the lead chain, g_lead[i] evaluated at chain state i.
    g_shadow: array (n_iter, B, n_levels, d_theta), g_shadow[i] evaluated at
      shadow state i (the shadow chain lags the lead by one).
    tau: (B, n_levels) meeting times; tau_bar is the per-row max.
    kernel_units: (B, n_levels) cost in kernel applications at each level.
    euler_steps: (B,) raw transition-evaluation counts.
    failed: (B,) rows that hit the iteration cap.
    """

    g_lead: np.ndarray
    g_shadow: np.ndarray
    tau: np.ndarray
    kernel_units: np.ndarray
    euler_steps: np.ndarray
    failed: np.ndarray

    @property
    def tau_bar(self):
        return self.tau.max(axis=1)


@dataclass(frozen=True)
class LevelPMF:
    """Randomization distribution over shifted levels with cumulative tails."""

    kind: str
    l_min: int
    probs: np.ndarray
    tails: np.ndarray


@dataclass
class ScoreEstimate:
    """One replicate of the randomized-level estimator."""

    value: np.ndarray
    level: int
    increments: np.ndarray        # (level+1, d_theta), already tail-divided
    tau: list                     # per shifted level: (n_levels,) meeting times
    kernel_units: np.ndarray      # (level+1,) in level-specific kernel units
    euler_steps: int
    cost: float
    master_seed: int


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings shared by all replicates of a score estimation run.

    grid_builder maps a shifted level j >= 0 to the TimeGrid at absolute
    level l_min + j.
    """

    grid_builder: callable
    N: int
    b: int
    I: int
    l_min: int
    pmf: LevelPMF
    opts: SweepOptions = field(default_factory=SweepOptions)
    iteration_cap: int = DEFAULT_ITERATION_CAP
    chunk_rows: int = 0  # 0 = derive from the fixed memory budget
    # single-term randomized estimator: only the sampled level's increment,
    # divided by its probability, instead of the sum over levels up to it
    single_term: bool = False


def time_averaged_score(g_lead, g_shadow, tau, b, I):
    """Bias-corrected time average for one chain pair.

    Args:
      g_lead: (n+1, d_theta) functional values at lead states 0..n.
      g_shadow: (n, d_theta) functional values at shadow states 0..n-1.
      tau: meeting time (first i >= 1 with lead state i equal to shadow
        state i-1).
      b, I: burn-in and final averaging iteration, 0 <= b <= I.

    Returns:
      mean of g_lead[b..I] plus sum over i in (b, tau) of
      min(1, (i-b)/(I-b+1)) * (g_lead[i] - g_shadow[i-1]).
    """
    g_lead = np.asarray(g_lead, dtype=float)
    g_shadow = np.asarray(g_shadow, dtype=float)
    if b > I:
        raise ValueError("burn-in exceeds iteration count")
    need = max(I, tau - 1)
    if g_lead.shape[0] < need + 1:
        raise ValueError("record does not cover max(I, tau-1) iterations")
    est = g_lead[b : I + 1].mean(axis=0)
    for i in range(b + 1, tau):
        est = est + min(1.0, (i - b) / (I - b + 1)) * (g_lead[i] - g_shadow[i - 1])
    return est


def _time_averaged_batch(g_lead, g_shadow, tau, b, I):
    """Vectorized time average: g_lead (n+1, B, d), tau (B,) -> (B, d)."""
    est = g_lead[b : I + 1].mean(axis=0)
    hi = int(tau.max())
    for i in range(b + 1, hi):
        rows = tau > i
        if not rows.any():
            break
        w = min(1.0, (i - b) / (I - b + 1))
        est[rows] += w * (g_lead[i, rows] - g_shadow[i - 1, rows])
    return est


def run_coupled_chains(model, theta, grids, obs, B, N, I, seed_spec, opts=None,
                       iteration_cap=DEFAULT_ITERATION_CAP):
    """Advance B independent coupled chain runs in lockstep.

    grids is a TimeGrid (single-level pair of chains) or LevelPairGrid (two
    pairs coupled across levels). Each run starts from independent draws of
    the discretized path law, takes one uncoupled transition, then iterates
    the coupled kernel until it has met on every level and the lead chain
    has reached iteration I. Rows that fail to meet within iteration_cap
    are flagged and abandoned.
    """
    if opts is None:
        opts = SweepOptions()
    multi = isinstance(grids, LevelPairGrid)
    glist = [grids.coarse, grids.fine] if multi else [grids]
    n_lev = len(glist)
    d_theta = model.d_theta

    init_stream = derive_stream(seed_spec.child("init"))
    if multi:
        lead = init_trajectories_pair(model, theta, grids, B, init_stream)
        shadow = init_trajectories_pair(model, theta, grids, B, init_stream)
    else:
        lead = [init_trajectories(model, theta, glist[0], B, init_stream)]
        shadow = [init_trajectories(model, theta, glist[0], B, init_stream)]

    def geval(paths_by_level):
        out = np.empty((len(paths_by_level[0]), n_lev, d_theta))
        for lv, (g, p) in enumerate(zip(glist, paths_by_level)):
            out[:, lv] = eval_score_functional(model, theta, g, p, obs)
        return out

    g_lead = [geval(lead)]
    g_shadow = [geval(shadow)]

    euler_steps = np.zeros(B, dtype=np.int64)
    # first (uncoupled) transition of the lead chain, all rows
    out = sweep_batch(
        model, theta, grids, obs, [l[:, None] for l in lead], N,
        seed_spec.child("sweep", 0).child("single"), opts=opts,
        mode="mlcpf" if multi else "cpf",
    )
    lead = [t[:, 0] for t in out.traj]
    euler_steps += out.euler_steps
    g_lead.append(geval(lead))

    met = np.zeros((B, n_lev), dtype=bool)
    tau = np.zeros((B, n_lev), dtype=np.int64)
    # immediate meeting: lead state 1 equal to shadow state 0
    for lv in range(n_lev):
        eq = np.all(lead[lv] == shadow[lv], axis=(1, 2))
        met[:, lv] = eq
        tau[eq, lv] = 1
    kernel_units = np.ones((B, n_lev), dtype=np.int64)
    failed = np.zeros(B, dtype=bool)
    coupled_mode = "ccpf4" if multi else "ccpf2"
    single_mode = "mlcpf" if multi else "cpf"

    t = 1
    while True:
        unmet = ~met.all(axis=1) & ~failed
        singles = met.all(axis=1) & (t < I)
        if not unmet.any() and not singles.any():
            break
        if t >= iteration_cap:
            failed |= unmet
            if not singles.any():
                break
            unmet = np.zeros(B, dtype=bool)

        gl_new = np.full((B, n_lev, d_theta), np.nan)
        gs_new = np.full((B, n_lev, d_theta), np.nan)

        # cost convention: a level counts 2 units per coupled iteration
        # before its meeting time and 1 unit per lead-advancing iteration
        # afterwards while t < I
        active = unmet | singles
        for lv in range(n_lev):
            kernel_units[:, lv] += np.where(
                active & ~met[:, lv], 2, np.where(active & (t < I), 1, 0)
            )

        if unmet.any():
            rows = np.where(unmet)[0]
            refs = []
            for lv in range(n_lev):
                refs.append(np.stack([lead[lv][rows], shadow[lv][rows]], axis=1))
            out = sweep_batch(
                model, theta, grids, obs, refs, N,
                seed_spec.child("sweep", t).child("coupled"), opts=opts,
                mode=coupled_mode,
            )
            euler_steps[rows] += out.euler_steps
            for lv in range(n_lev):
                new_lead = out.traj[lv][:, 0]
                new_shadow = out.traj[lv][:, 1]
                eq = np.all(new_lead == new_shadow, axis=(1, 2))
                newly = eq & ~met[rows, lv]
                met[rows[newly], lv] = True
                tau[rows[newly], lv] = t + 1
                lead[lv][rows] = new_lead
                shadow[lv][rows] = new_shadow
            gl_new[rows] = geval([l[rows] for l in lead])
            gs_new[rows] = geval([s[rows] for s in shadow])

        if singles.any():
            rows = np.where(singles)[0]
            refs = [lead[lv][rows][:, None] for lv in range(n_lev)]
            out = sweep_batch(
                model, theta, grids, obs, refs, N,
                seed_spec.child("sweep", t).child("single"), opts=opts,
                mode=single_mode,
            )
            euler_steps[rows] += out.euler_steps
            for lv in range(n_lev):
                lead[lv][rows] = out.traj[lv][:, 0]
                shadow[lv][rows] = out.traj[lv][:, 0]
            gl_new[rows] = geval([l[rows] for l in lead])
            gs_new[rows] = gl_new[rows]

        g_lead.append(gl_new)
        g_shadow.append(gs_new)
        t += 1

    return ChainRecord(
        g_lead=np.asarray(g_lead),
        g_shadow=np.asarray(g_shadow),
        tau=tau,
        kernel_units=kernel_units,
        euler_steps=euler_steps,
        failed=failed,
    )


def _increment_from_record(rec, b, I, multi):
    """Per-row estimator values from a chain record.

    Single level: the level's time-averaged score. Level pair: fine minus
    coarse time-averaged scores (the score increment).
    """
    if multi:
        coarse = _time_averaged_batch(
            rec.g_lead[:, :, 0], rec.g_shadow[:, :, 0], rec.tau[:, 0], b, I
        )
        fine = _time_averaged_batch(
            rec.g_lead[:, :, 1], rec.g_shadow[:, :, 1], rec.tau[:, 1], b, I
        )
        return fine - coarse
    return _time_averaged_batch(
        rec.g_lead[:, :, 0], rec.g_shadow[:, :, 0], rec.tau[:, 0], b, I
    )


def estimate_increment_l0(model, theta, grid, obs, N, b, I, seed_spec, opts=None,
                          iteration_cap=DEFAULT_ITERATION_CAP):
    """Unbiased estimator of the base-level score from one chain pair."""
    rec = run_coupled_chains(
        model, theta, grid, obs, 1, N, I, seed_spec, opts=opts,
        iteration_cap=iteration_cap,
    )
    if rec.failed[0]:
        raise IterationCapError(
            f"chains did not meet within {iteration_cap} iterations"
        )
    return _increment_from_record(rec, b, I, multi=False)[0], rec


def estimate_increment(model, theta, level_pair, obs, N, b, I, seed_spec, opts=None,
                       iteration_cap=DEFAULT_ITERATION_CAP):
    """Unbiased estimator of the score increment across a level pair."""
    rec = run_coupled_chains(
        model, theta, level_pair, obs, 1, N, I, seed_spec, opts=opts,
        iteration_cap=iteration_cap,
    )
    if rec.failed[0]:
        raise IterationCapError(
            f"chains did not meet within {iteration_cap} iterations"
        )
    return _increment_from_record(rec, b, I, multi=True)[0], rec


def build_level_pmf(kind, l_min, truncation=12):
    """Randomization PMF over shifted levels 0..truncation-1.

    Mass at shifted level j is proportional to step^kappa * (j+1) *
    log2(2+j)^2 with step 2^-j, kappa = 1/2 for "sqrt" and 1 for "linear";
    the truncated PMF is renormalized, which makes the estimand the score
    at absolute level l_min + truncation - 1.
    """
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if kind not in ("sqrt", "linear"):
        raise ValueError(f"unknown pmf kind {kind!r}")
    kappa = 0.5 if kind == "sqrt" else 1.0
    j = np.arange(truncation)
    raw = (2.0 ** (-j * kappa)) * (j + 1) * np.log2(2.0 + j) ** 2
    probs = raw / raw.sum()
    tails = np.cumsum(probs[::-1])[::-1].copy()
    return LevelPMF(kind=kind, l_min=l_min, probs=probs, tails=tails)


def sample_levels(pmf, stream, size):
    """Draw shifted highest levels from the PMF."""
    u = stream.random(size)
    return np.searchsorted(np.cumsum(pmf.probs), u, side="right")


def unbiased_score(model, theta, obs, config, seed_spec):
    """One replicate of the randomized-level score estimator.

    Samples a highest level, runs the base-level chain pair and one chain
    quadruple per level up to it, and returns the tail-weighted sum with
    cost bookkeeping. With config.single_term only the sampled level's
    increment is computed and divided by its probability.
    """
    lstream = derive_stream(seed_spec.child("level-draw"))
    L = int(sample_levels(config.pmf, lstream, 1)[0])
    d_theta = model.d_theta
    js = [L] if config.single_term else list(range(L + 1))
    increments = np.empty((len(js), d_theta))
    taus, units = [], []
    euler = 0
    cost = 0.0
    n_obs = obs.n_obs
    for pos, j in enumerate(js):
        spec_j = seed_spec.child("inc", j)
        if j == 0:
            val, rec = estimate_increment_l0(
                model, theta, config.grid_builder(0), obs, config.N,
                config.b, config.I, spec_j, opts=config.opts,
                iteration_cap=config.iteration_cap,
            )
        else:
            pair = build_level_pair(config.grid_builder, j)
            val, rec = estimate_increment(
                model, theta, pair, obs, config.N, config.b, config.I,
                spec_j, opts=config.opts, iteration_cap=config.iteration_cap,
            )
        denom = config.pmf.probs[j] if config.single_term else config.pmf.tails[j]
        increments[pos] = val / denom
        taus.append(rec.tau[0])
        u = rec.kernel_units[0]
        units.append(u.sum())
        euler += int(rec.euler_steps[0])
        cost += float(u[-1]) * config.N * 2.0 ** (config.l_min + j) * n_obs
        if j >= 1:
            cost += float(u[0]) * config.N * 2.0 ** (config.l_min + j - 1) * n_obs
    return ScoreEstimate(
        value=increments.sum(axis=0),
        level=L,
        increments=increments,
        tau=taus,
        kernel_units=np.asarray(units),
        euler_steps=euler,
        cost=cost,
        master_seed=seed_spec.master_seed,
    )


def level_increments(model, theta, obs, config, seed_spec, R, shifted_level):
    """R independent replicates of one level's estimator, run in chunks.

    shifted_level 0 gives the base-level score estimator; higher levels give
    the across-level increment. Returns per-replicate increments (R, d_theta,
    NaN on failures), meeting times (R, n_levels), kernel-unit counts,
    transition-evaluation counts, and failure flags.
    """
    j = int(shifted_level)
    if j == 0:
        grids = config.grid_builder(0)
        multi = False
    else:
        grids = build_level_pair(config.grid_builder, j)
        multi = True
    n_lev = 2 if multi else 1
    d_theta = model.d_theta
    inc = np.full((R, d_theta), np.nan)
    tau = np.zeros((R, n_lev), dtype=np.int64)
    units = np.zeros((R, n_lev), dtype=np.int64)
    euler = np.zeros(R, dtype=np.int64)
    failed = np.zeros(R, dtype=bool)
    chunk = _chunk_rows(config, grids, multi)
    for ci, lo in enumerate(range(0, R, chunk)):
        B = min(chunk, R - lo)
        rec = run_coupled_chains(
            model, theta, grids, obs, B, config.N, config.I,
            seed_spec.child("chunk", ci), opts=config.opts,
            iteration_cap=config.iteration_cap,
        )
        vals = _increment_from_record(rec, config.b, config.I, multi)
        sl = slice(lo, lo + B)
        ok = ~rec.failed
        inc[sl][ok] = vals[ok]
        tau[sl] = rec.tau
        units[sl] = rec.kernel_units
        euler[sl] = rec.euler_steps
        failed[sl] = rec.failed
    return {
        "increments": inc,
        "tau": tau,
        "kernel_units": units,
        "euler_steps": euler,
        "failed": failed,
    }


def _chunk_rows(config, grids, multi):
    if config.chunk_rows > 0:
        return config.chunk_rows
    if multi:
        K = grids.fine.n_steps + grids.coarse.n_steps
        n_sys = 4
    else:
        K = grids.n_steps
        n_sys = 2
    per_row = (K + 2) * n_sys * config.N * 8.0 * 2
    return int(max(1, min(512, _CHUNK_BUDGET_BYTES / max(per_row, 1.0))))


def replicate_scores(model, theta, obs, config, seed_spec, R):
    """R independent replicates of the randomized-level estimator.

    Replicates sharing a level are advanced together in fixed-size chunks,
    so the whole batch costs far fewer kernel launches than R independent
    runs. Returns a dict with per-replicate values (R, d_theta), sampled
    levels, stopping times of the base level, costs, and failure flags.

    Results are deterministic given (seed, config, R).
    """
    lstream = derive_stream(seed_spec.child("levels"))
    levels = sample_levels(config.pmf, lstream, R)
    d_theta = model.d_theta
    values = np.zeros((R, d_theta))
    cost = np.zeros(R)
    euler = np.zeros(R, dtype=np.int64)
    failed = np.zeros(R, dtype=bool)
    tau_bar0 = np.zeros(R, dtype=np.int64)
    n_obs = obs.n_obs
    for j in range(int(levels.max()) + 1):
        rows = np.where(levels == j if config.single_term else levels >= j)[0]
        if len(rows) == 0:
            continue
        if j == 0:
            grids = config.grid_builder(0)
            multi = False
        else:
            grids = build_level_pair(config.grid_builder, j)
            multi = True
        chunk = _chunk_rows(config, grids, multi)
        for ci, lo in enumerate(range(0, len(rows), chunk)):
            sub = rows[lo : lo + chunk]
            rec = run_coupled_chains(
                model, theta, grids, obs, len(sub), config.N, config.I,
                seed_spec.child("levelgrp", j).child("chunk", ci),
                opts=config.opts, iteration_cap=config.iteration_cap,
            )
            inc = _increment_from_record(rec, config.b, config.I, multi)
            ok = ~rec.failed
            denom = config.pmf.probs[j] if config.single_term else config.pmf.tails[j]
            values[sub[ok]] += inc[ok] / denom
            failed[sub[~ok]] = True
            u_fine = rec.kernel_units[:, -1].astype(float)
            cost[sub] += u_fine * config.N * 2.0 ** (config.l_min + j) * n_obs
            if multi:
                cost[sub] += (
                    rec.kernel_units[:, 0].astype(float)
                    * config.N * 2.0 ** (config.l_min + j - 1) * n_obs
                )
            euler[sub] += rec.euler_steps
            if j == 0:
                tau_bar0[sub] = rec.tau_bar
    values[failed] = np.nan
    return {
        "values": values,
        "levels": levels,
        "cost": cost,
        "euler_steps": euler,
        "failed": failed,
        "tau_bar_l0": tau_bar0,
    }


def average_replicates(estimates):
    """Mean and unbiased sample covariance of replicate score values.

    Accepts a list of ScoreEstimate or an (R, d_theta) array.
    """
    if isinstance(estimates, np.ndarray):
        vals = estimates
    else:
        if len(estimates) == 0:
            raise ValueError("no estimates to average")
        vals = np.stack([e.value for e in estimates])
    mean = vals.mean(axis=0)
    if vals.shape[0] > 1:
        cov = np.cov(vals, rowvar=False).reshape(vals.shape[1], vals.shape[1])
    else:
        cov = np.zeros((vals.shape[1], vals.shape[1]))
    return mean, cov


def pilot_stopping_times(model, theta, obs, config, seed_spec, n_pilot=50,
                         shifted_level=1):
    """Stopping times from pilot chain-quadruple runs at a low level."""
    pair = build_level_pair(config.grid_builder, shifted_level)
    rec = run_coupled_chains(
        model, theta, pair, obs, n_pilot, config.N, 0,
        seed_spec.child("pilot"), opts=config.opts,
        iteration_cap=config.iteration_cap,
    )
    return rec.tau_bar[~rec.failed]


def burnin_from_pilot(taus, quantile=0.9):
    """Burn-in choice: the 90% quantile of pilot stopping times."""
    if len(taus) == 0:
        raise ValueError("no successful pilot runs")
    return int(np.ceil(np.quantile(np.asarray(taus), quantile)))


def resolve_preset(preset, pilot_b=None):
    """(b, I) for the named estimator preset.

    "naive" uses no burn-in and a single iteration; "simple" burns in to
    the pilot 90% stopping-time quantile and averages one term; the
    "time-averaged" preset averages ten burn-in lengths of iterations.
    """
    if preset == "naive":
        return 0, 0
    if pilot_b is None:
        raise ValueError(f"preset {preset!r} needs a pilot burn-in value")
    if preset == "simple":
        return pilot_b, pilot_b
    if preset == "time-averaged":
        return pilot_b, 10 * pilot_b
    raise ValueError(f"unknown preset {preset!r}")
