"""Ground-truth machinery kept independent of the main engine.

For the mean-reverting Gaussian model both the exact unit-time transition
and the Euler-discretized chain are linear-Gaussian state space models, so
their scores are exactly computable by Kalman smoothing. This module
implements that with its own scalar recursions (no code shared with the
particle engine), plus a simulation smoother for invariance tests and a
brute-force enumeration of the four-index coupled-resampling law for tiny
particle counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinearGaussianSSM",
    "ou_exact_ssm",
    "ou_euler_ssm",
    "kalman_loglik",
    "kalman_filter",
    "kalman_smoother_moments",
    "kalman_score",
    "simulate_smoother",
    "bruteforce_coupling4_pmf",
]


@dataclass(frozen=True)
class LinearGaussianSSM:
    """Scalar linear-Gaussian chain with equally spaced observations.

    Transition x_k = trans_mult * x_{k-1} + trans_off + N(0, trans_var),
    observation y = x + N(0, obs_var) every steps_per_obs steps, fixed
    start x0. dparams rows hold the derivatives of
    (trans_mult, trans_off, trans_var, obs_var) for each model parameter.
    """

    trans_mult: float
    trans_off: float
    trans_var: float
    obs_var: float
    steps_per_obs: int
    x0: float
    dparams: np.ndarray
    unstable: bool = False

    def __post_init__(self):
        if self.trans_var <= 0 or self.obs_var <= 0:
            raise ValueError("variances must be positive")


def ou_exact_ssm(theta, sigma=1.0):
    """Exact unit-time transition of the mean-reverting model.

    theta = (rate, mean, obs_var): transition mean
    mean + (x - mean) e^{-rate}, variance sigma^2 (1 - e^{-2 rate}) / (2 rate).
    """
    t1, t2, t3 = float(theta[0]), float(theta[1]), float(theta[2])
    if t1 <= 0 or t3 <= 0:
        raise ValueError("rate and observation variance must be positive")
    e = np.exp(-t1)
    a = e
    c = t2 * (1.0 - e)
    q = sigma**2 * (1.0 - e**2) / (2.0 * t1)
    dq1 = sigma**2 * (e**2 / t1 - (1.0 - e**2) / (2.0 * t1**2))
    dparams = np.array([
        [-e, t2 * e, dq1, 0.0],
        [0.0, 1.0 - e, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    return LinearGaussianSSM(
        trans_mult=a, trans_off=c, trans_var=q, obs_var=t3,
        steps_per_obs=1, x0=0.0, dparams=dparams,
    )


def ou_euler_ssm(theta, sigma=1.0, level=0):
    """Euler chain of the mean-reverting model at a dyadic level.

    Per-step transition mean x + rate*(mean - x)*step, variance
    step * sigma^2, observations every 2^level steps. Flags the
    discretization as unstable when rate*step >= 1.
    """
    t1, t2, t3 = float(theta[0]), float(theta[1]), float(theta[2])
    if t1 <= 0 or t3 <= 0:
        raise ValueError("rate and observation variance must be positive")
    dt = 2.0 ** (-level)
    dparams = np.array([
        [-dt, t2 * dt, 0.0, 0.0],
        [0.0, t1 * dt, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    return LinearGaussianSSM(
        trans_mult=1.0 - t1 * dt, trans_off=t1 * t2 * dt, trans_var=dt * sigma**2,
        obs_var=t3, steps_per_obs=1 << level, x0=0.0, dparams=dparams,
        unstable=t1 * dt >= 1.0,
    )


def kalman_filter(ssm, ys):
    """Forward pass: filtered/predicted means and variances plus loglik."""
    ys = np.asarray(ys, dtype=float)
    P = len(ys)
    K = P * ssm.steps_per_obs
    m_f = np.empty(K + 1)
    p_f = np.empty(K + 1)
    m_p = np.empty(K + 1)
    p_p = np.empty(K + 1)
    m_f[0], p_f[0] = ssm.x0, 0.0
    m_p[0], p_p[0] = ssm.x0, 0.0
    ll = 0.0
    for k in range(1, K + 1):
        m_p[k] = ssm.trans_mult * m_f[k - 1] + ssm.trans_off
        p_p[k] = ssm.trans_mult**2 * p_f[k - 1] + ssm.trans_var
        if k % ssm.steps_per_obs == 0:
            y = ys[k // ssm.steps_per_obs - 1]
            s = p_p[k] + ssm.obs_var
            if s <= 0:
                raise FloatingPointError("innovation variance lost positivity")
            ll += -0.5 * np.log(2 * np.pi * s) - 0.5 * (y - m_p[k]) ** 2 / s
            gain = p_p[k] / s
            m_f[k] = m_p[k] + gain * (y - m_p[k])
            p_f[k] = (1.0 - gain) * p_p[k]
        else:
            m_f[k], p_f[k] = m_p[k], p_p[k]
    return m_f, p_f, m_p, p_p, ll


def kalman_loglik(ssm, ys):
    """Exact log-likelihood of the observation sequence."""
    return kalman_filter(ssm, ys)[4]


def kalman_smoother_moments(ssm, ys):
    """Smoothed means, variances, and one-step cross-covariances.

    Returns (m_s, p_s, c_s) with c_s[k] = Cov(x_k, x_{k-1} | all data),
    c_s[0] = 0.
    """
    m_f, p_f, m_p, p_p, _ = kalman_filter(ssm, ys)
    K = len(m_f) - 1
    m_s = m_f.copy()
    p_s = p_f.copy()
    c_s = np.zeros(K + 1)
    for k in range(K, 0, -1):
        if p_p[k] > 0:
            j = p_f[k - 1] * ssm.trans_mult / p_p[k]
        else:
            j = 0.0
        m_s[k - 1] = m_f[k - 1] + j * (m_s[k] - m_p[k])
        p_s[k - 1] = p_f[k - 1] + j**2 * (p_s[k] - p_p[k])
        c_s[k] = j * p_s[k]
    return m_s, p_s, c_s


def _smoothing_score(ssm, ys):
    """Score via smoothed pairwise moments of transitions and observations."""
    m_s, p_s, c_s = kalman_smoother_moments(ssm, ys)
    a, c, q, r = ssm.trans_mult, ssm.trans_off, ssm.trans_var, ssm.obs_var
    K = len(m_s) - 1
    sum_xe = 0.0   # sum over k of E[x_{k-1} * residual_k]
    sum_e = 0.0
    sum_e2 = 0.0
    for k in range(1, K + 1):
        ek = m_s[k] - a * m_s[k - 1] - c
        sum_e += ek
        sum_e2 += p_s[k] + a**2 * p_s[k - 1] - 2 * a * c_s[k] + ek**2
        sum_xe += c_s[k] - a * p_s[k - 1] + m_s[k - 1] * ek
    sum_obs = 0.0
    ys = np.asarray(ys, dtype=float)
    for p in range(1, len(ys) + 1):
        k = p * ssm.steps_per_obs
        sum_obs += -0.5 / r + ((ys[p - 1] - m_s[k]) ** 2 + p_s[k]) / (2 * r**2)
    coeff = np.array([sum_xe / q, sum_e / q, -K / (2 * q) + sum_e2 / (2 * q**2), sum_obs])
    return ssm.dparams @ coeff


def kalman_score(builder, theta, ys, cross_check=True, rel_tol=1e-6):
    """Exact score of a linear-Gaussian model at theta.

    builder maps a parameter vector to a LinearGaussianSSM. The smoothing
    identity result is cross-checked against central finite differences of
    the log-likelihood; disagreement beyond rel_tol raises.
    """
    theta = np.asarray(theta, dtype=float)
    ys = np.asarray(ys, dtype=float)
    g = _smoothing_score(builder(theta), ys)
    if len(ys) == 0:
        return np.zeros_like(theta)
    if cross_check:
        fd = np.empty_like(g)
        for j in range(len(theta)):
            h = 1e-5 * (1.0 + abs(theta[j]))
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd[j] = (kalman_loglik(builder(tp), ys) - kalman_loglik(builder(tm), ys)) / (2 * h)
        scale = np.maximum(np.abs(g), np.maximum(np.abs(fd), 1.0))
        if np.any(np.abs(g - fd) / scale > rel_tol):
            raise FloatingPointError(
                f"smoothing-identity score disagrees with finite differences: {g} vs {fd}"
            )
    return g


def simulate_smoother(ssm, ys, n, stream):
    """Draw n independent trajectories from the exact smoothing law.

    Backward sampling from the filtering pass; returns (n, K+1) states.
    """
    m_f, p_f, m_p, p_p, _ = kalman_filter(ssm, ys)
    K = len(m_f) - 1
    x = np.empty((n, K + 1))
    x[:, K] = m_f[K] + np.sqrt(max(p_f[K], 0.0)) * stream.standard_normal(n)
    for k in range(K - 1, -1, -1):
        if p_p[k + 1] > 0:
            j = p_f[k] * ssm.trans_mult / p_p[k + 1]
        else:
            j = 0.0
        mean = m_f[k] + j * (x[:, k + 1] - m_p[k + 1])
        var = max(p_f[k] - j**2 * p_p[k + 1], 0.0)
        x[:, k] = mean + np.sqrt(var) * stream.standard_normal(n)
    return x


def _pmf2(w0, w1):
    """Across-level maximal-coupling PMF (local copy, no engine code)."""
    o = np.minimum(w0, w1)
    mu = o.sum()
    out = np.diag(o).astype(float)
    if mu < 1.0:
        out = out + np.outer(w0 - o, w1 - o) / (1.0 - mu)
    return out


def _maximal_transition(p, q):
    """Transition matrix of the maximal coupling of laws p and q.

    Row b gives the law of the coupled draw from q when the draw from p
    landed on b: keep b with probability min(1, q_b/p_b), otherwise sample
    from the normalized positive part of q - p.
    """
    n = len(p)
    resid = np.maximum(q - p, 0.0)
    gamma = resid.sum()
    k = np.zeros((n, n))
    for b in range(n):
        if p[b] == 0:
            # unreachable given the source draw came from p; keep valid rows
            k[b, b] = 1.0
            continue
        acc = min(1.0, q[b] / p[b])
        k[b, b] = acc
        if gamma > 0:
            k[b, :] += (1.0 - acc) * resid / gamma
    return k


def bruteforce_coupling4_pmf(w0, wb0, w1, wb1, conditional_redraw="coupled"):
    """Exact joint law of the four-index coupled-resampling draw.

    Returns an (N^2, N^2) table over flattened pairs (a*N+b, abar*N+bbar).
    The law follows the sampler's case analysis: with both levels'
    barred/unbarred weights identical the barred pair copies the unbarred
    one; with exactly one level identical that level's index is copied and
    the other drawn from its barred conditional law, either maximally
    coupled to the unbarred index of the same level ("coupled", default) or
    conditionally independent of it ("independent"); otherwise the two pair
    distributions are maximally coupled with independent residuals.
    """
    w0 = np.asarray(w0, dtype=float)
    wb0 = np.asarray(wb0, dtype=float)
    w1 = np.asarray(w1, dtype=float)
    wb1 = np.asarray(wb1, dtype=float)
    n = len(w0)
    if n > 8:
        raise ValueError("enumeration limited to N <= 8")
    r = _pmf2(w0, w1)
    rb = _pmf2(wb0, wb1)
    eq0 = np.array_equal(w0, wb0)
    eq1 = np.array_equal(w1, wb1)
    joint = np.zeros((n * n, n * n))
    if eq0 and eq1:
        for a in range(n):
            for b in range(n):
                joint[a * n + b, a * n + b] = r[a, b]
    elif eq0:
        for a in range(n):
            if w0[a] == 0:
                continue
            p = r[a, :] / w0[a]
            q = rb[a, :] / w0[a]
            if conditional_redraw == "coupled":
                k = _maximal_transition(p, q)
            else:
                k = np.tile(q, (n, 1))
            for b in range(n):
                for d in range(n):
                    joint[a * n + b, a * n + d] = r[a, b] * k[b, d]
    elif eq1:
        for b in range(n):
            if w1[b] == 0:
                continue
            p = r[:, b] / w1[b]
            q = rb[:, b] / w1[b]
            if conditional_redraw == "coupled":
                k = _maximal_transition(p, q)
            else:
                k = np.tile(q, (n, 1))
            for a in range(n):
                for c in range(n):
                    joint[a * n + b, c * n + b] = r[a, b] * k[a, c]
    else:
        m = np.minimum(r, rb)
        mass = m.sum()
        rf, rbf, mf = r.ravel(), rb.ravel(), m.ravel()
        joint = np.diag(mf)
        if mass < 1.0:
            joint = joint + np.outer(rf - mf, rbf - mf) / (1.0 - mass)
    return joint
