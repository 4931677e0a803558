"""Stochastic gradient drivers consuming unbiased score estimates.

Both loops work in an unconstrained working space: log-marked parameter
components are exponentiated before each score evaluation, and the returned
constrained-space gradient is mapped back by the chain rule (multiply by
the constrained value on log components). Gradient ascent targets the MLE;
the Langevin loop adds a Gaussian prior gradient and injected noise to
sample the posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import IterationCapError, unbiased_score
from .models import to_constrained
from .rng import derive_stream

__all__ = [
    "LearningSchedule",
    "constant_schedule",
    "power_schedule",
    "PriorSpec",
    "working_gradient",
    "sga_run",
    "sgld_run",
    "polyak_ruppert",
]

DEFAULT_DIVERGENCE_BOUND = 50.0


@dataclass(frozen=True)
class LearningSchedule:
    """Iteration-indexed learning rates, scalar or per-component."""

    rate: callable

    def __call__(self, m):
        r = np.asarray(self.rate(m), dtype=float)
        if np.any(r <= 0):
            raise ValueError(f"learning rate must be positive at m={m}")
        return r


def constant_schedule(c):
    """Constant rate; c may be a scalar or per-component vector."""
    c = np.asarray(c, dtype=float)
    return LearningSchedule(rate=lambda m: c)


def power_schedule(c0, gamma, scale=1.0):
    """Rate (c0 + m)^(-gamma) * scale, with scale scalar or vector."""
    scale = np.asarray(scale, dtype=float)
    return LearningSchedule(rate=lambda m: (c0 + m) ** (-gamma) * scale)


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussian prior on the working-space parameters."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "var", np.asarray(self.var, dtype=float))
        if np.any(self.var <= 0):
            raise ValueError("prior variances must be positive")

    def grad_logpdf(self, working):
        return -(working - self.mean) / self.var


def working_gradient(score_constrained, theta_constrained, transform_spec):
    """Chain-rule map of a constrained-space score to working space."""
    g = np.asarray(score_constrained, dtype=float).copy()
    for j, kind in enumerate(transform_spec):
        if kind == "log":
            g[j] *= theta_constrained[j]
    return g


def _default_score_fn(model, obs, config):
    def fn(theta_constrained, spec):
        est = unbiased_score(model, theta_constrained, obs, config, spec)
        return est.value, est.cost
    return fn


def _trace_dict(M, d):
    return {
        "working": np.full((M + 1, d), np.nan),
        "constrained": np.full((M + 1, d), np.nan),
        "score_norm": np.full(M + 1, np.nan),
        "cost": np.zeros(M + 1),
        "diverged": False,
        "capped": None,  # iteration whose score estimate hit the chain cap
        "iterations": 0,
    }


def _check_iterate(working, bound):
    return np.all(np.isfinite(working)) and np.all(np.abs(working) <= bound)


def sga_run(model, obs, config, theta0_working, schedule, M, seed_spec,
            score_fn=None, divergence_bound=DEFAULT_DIVERGENCE_BOUND):
    """Stochastic gradient ascent on the log-likelihood.

    Returns the trace dict; if an iterate leaves the divergence guard the
    loop stops early with diverged=True and the partial trace intact.
    """
    if score_fn is None:
        score_fn = _default_score_fn(model, obs, config)
    theta_w = np.asarray(theta0_working, dtype=float).copy()
    trace = _trace_dict(M, len(theta_w))
    trace["working"][0] = theta_w
    trace["constrained"][0] = to_constrained(theta_w, model.transform_spec)
    for m in range(1, M + 1):
        theta_c = to_constrained(theta_w, model.transform_spec)
        try:
            s_c, cost = score_fn(theta_c, seed_spec.child("iter", m))
        except IterationCapError:
            trace["capped"] = m
            break
        s_w = working_gradient(s_c, theta_c, model.transform_spec)
        theta_w = theta_w + schedule(m) * s_w
        trace["iterations"] = m
        trace["cost"][m] = cost
        trace["score_norm"][m] = float(np.linalg.norm(s_w))
        if not _check_iterate(theta_w, divergence_bound):
            trace["diverged"] = True
            break
        trace["working"][m] = theta_w
        trace["constrained"][m] = to_constrained(theta_w, model.transform_spec)
    return trace


def sgld_run(model, obs, config, prior, theta0_working, schedule, M, seed_spec,
             score_fn=None, divergence_bound=DEFAULT_DIVERGENCE_BOUND):
    """Stochastic gradient Langevin dynamics in working space.

    Update: theta += 0.5*eps*(prior gradient + score) + sqrt(eps)*noise,
    with eps applied per component when the schedule is vector-valued.
    """
    if score_fn is None:
        score_fn = _default_score_fn(model, obs, config)
    noise_stream = derive_stream(seed_spec.child("noise"))
    theta_w = np.asarray(theta0_working, dtype=float).copy()
    trace = _trace_dict(M, len(theta_w))
    trace["working"][0] = theta_w
    trace["constrained"][0] = to_constrained(theta_w, model.transform_spec)
    for m in range(1, M + 1):
        theta_c = to_constrained(theta_w, model.transform_spec)
        try:
            s_c, cost = score_fn(theta_c, seed_spec.child("iter", m))
        except IterationCapError:
            trace["capped"] = m
            break
        s_w = working_gradient(s_c, theta_c, model.transform_spec)
        drift = s_w if prior is None else s_w + prior.grad_logpdf(theta_w)
        eps = schedule(m)
        eta = noise_stream.standard_normal(len(theta_w))
        theta_w = theta_w + 0.5 * eps * drift + np.sqrt(eps) * eta
        trace["iterations"] = m
        trace["cost"][m] = cost
        trace["score_norm"][m] = float(np.linalg.norm(s_w))
        if not _check_iterate(theta_w, divergence_bound):
            trace["diverged"] = True
            break
        trace["working"][m] = theta_w
        trace["constrained"][m] = to_constrained(theta_w, model.transform_spec)
    return trace


def polyak_ruppert(iterates, burn_fraction=0.0):
    """Running mean of iterates after discarding a burn-in fraction.

    iterates: (M, d) array; returns (M - burn, d) running averages.
    """
    iterates = np.asarray(iterates, dtype=float)
    if len(iterates) == 0:
        raise ValueError("empty trace")
    if not 0.0 <= burn_fraction < 1.0:
        raise ValueError("burn_fraction must be in [0, 1)")
    start = int(np.floor(burn_fraction * len(iterates)))
    tail = iterates[start:]
    csum = np.cumsum(tail, axis=0)
    counts = np.arange(1, len(tail) + 1, dtype=float)
    return csum / counts.reshape(-1, *([1] * (tail.ndim - 1)))
