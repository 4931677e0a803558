"""Diffusion model definitions: drift, diffusion, observation densities and
their parameter gradients.

Three concrete models are provided:

* a mean-reverting Ornstein-Uhlenbeck process with Gaussian observations,
* a logistic population-growth diffusion (after a Lamperti transformation)
  with negative-binomial double-transect counts and a random initial state,
* a two-cell neural-network diffusion with tanh coupling, observed through
  Poisson spike counts whose rate integrates the intensity over each
  observation interval (the observation density therefore depends on the
  whole path segment and on the grid step).

All callbacks broadcast over arbitrary leading batch dimensions; the state
is always the trailing axis of length d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

__all__ = [
    "ParamVector",
    "ModelSpec",
    "ObservationSet",
    "ou_model",
    "logistic_model",
    "gridcell_model",
    "to_constrained",
    "from_constrained",
]


@dataclass(frozen=True)
class ParamVector:
    """Parameter values with per-component transform markers.

    transform_spec entries are "identity" or "log"; log-marked components
    are strictly positive in model space and unconstrained in working space.
    """

    theta: np.ndarray
    transform_spec: tuple

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if len(self.theta) != len(self.transform_spec):
            raise ValueError("theta and transform_spec lengths differ")


def to_constrained(working, transform_spec):
    """Map working-space values to model space (exp on log-marked entries)."""
    working = np.asarray(working, dtype=float)
    out = working.copy()
    for j, kind in enumerate(transform_spec):
        if kind == "log":
            out[j] = np.exp(working[j])
        elif kind != "identity":
            raise ValueError(f"unknown transform {kind!r}")
    return out


def from_constrained(theta, transform_spec):
    """Inverse of to_constrained; errors on non-positive log components."""
    theta = np.asarray(theta, dtype=float)
    out = theta.copy()
    for j, kind in enumerate(transform_spec):
        if kind == "log":
            if theta[j] <= 0:
                raise ValueError(f"component {j} must be positive for log transform")
            out[j] = np.log(theta[j])
        elif kind != "identity":
            raise ValueError(f"unknown transform {kind!r}")
    return out


@dataclass(frozen=True)
class ObservationSet:
    """Observation times and values; values[p] has length d_y."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if len(self.times) != len(self.values):
            raise ValueError("times/values length mismatch")

    @property
    def n_obs(self):
        return len(self.times)


@dataclass(frozen=True)
class ModelSpec:
    """Uniform model interface used by the particle kernels and the score
    functional.

    obs_mode is "point" (density depends on the state at the observation
    time) or "segment" (density depends on all grid states in the interval
    ending at the observation time, and on the grid step). For segment
    models, obs_logdensity/obs_score receive the per-particle accumulated
    intensity sums instead of a single state.

    init_point is None for models with a random initial distribution, in
    which case init_sample and init_score must be provided.
    """

    name: str
    d: int
    d_theta: int
    d_y: int
    transform_spec: tuple
    drift: callable
    drift_jacobian: callable
    sigma_const: np.ndarray        # constant diffusion matrix sigma (d x d)
    cov_inv_const: np.ndarray      # constant (sigma sigma^T)^{-1}
    obs_mode: str = "point"
    obs_logdensity: callable = None
    obs_score: callable = None
    # segment models
    intensity: callable = None          # state -> per-cell rates, shape (..., d)
    obs_logdensity_segment: callable = None
    obs_score_segment: callable = None
    # initial condition
    init_point: np.ndarray = None
    init_sample: callable = None
    init_score: callable = None
    validate_theta: callable = None

    def apply_sigma(self, x, v):
        """sigma(x) v for constant sigma; v has trailing dimension d."""
        if self.d == 1:
            return self.sigma_const[0, 0] * v
        return v @ self.sigma_const.T

    def check_theta(self, theta):
        if self.validate_theta is not None:
            self.validate_theta(np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck


def ou_model(sigma_const=1.0):
    """Mean-reverting scalar diffusion with Gaussian observations.

    theta = (rate, mean, obs_var); drift rate*(mean - x), constant diffusion
    coefficient, observations N(x, obs_var) at unit times, fixed start at 0.
    """
    if sigma_const <= 0:
        raise ValueError("sigma_const must be positive")
    sig = float(sigma_const)

    def validate(theta):
        if theta[0] <= 0 or theta[2] <= 0:
            raise ValueError("rate and observation variance must be positive")

    def drift(theta, x):
        return theta[0] * (theta[1] - x)

    def drift_jac(theta, x):
        # rows: state dim (1), cols: (rate, mean, obs_var)
        out = np.zeros(x.shape[:-1] + (1, 3))
        out[..., 0, 0] = theta[1] - x[..., 0]
        out[..., 0, 1] = theta[0]
        return out

    def obs_logdensity(theta, y, x):
        r = y[0] - x[..., 0]
        return -0.5 * np.log(2 * np.pi * theta[2]) - 0.5 * r * r / theta[2]

    def obs_score(theta, y, x):
        out = np.zeros(x.shape[:-1] + (3,))
        r = y[0] - x[..., 0]
        out[..., 2] = -0.5 / theta[2] + r * r / (2 * theta[2] ** 2)
        return out

    return ModelSpec(
        name="ou",
        d=1,
        d_theta=3,
        d_y=1,
        transform_spec=("log", "identity", "log"),
        drift=drift,
        drift_jacobian=drift_jac,
        sigma_const=np.array([[sig]]),
        cov_inv_const=np.array([[1.0 / sig**2]]),
        obs_logdensity=obs_logdensity,
        obs_score=obs_score,
        init_point=np.zeros(1),
        validate_theta=validate,
    )


# ---------------------------------------------------------------------------
# Logistic growth diffusion (Lamperti-transformed)

_LOGISTIC_INIT_MEAN_NUM = 5.0
_LOGISTIC_INIT_SD_NUM = 10.0


def _nb_logpmf(y, r, mu):
    """Negative binomial in the (dispersion r, mean mu) parameterization.

    mu can underflow to zero for extreme latent states; the pmf limit is
    log 1 = 0 at y = 0 and -inf otherwise, so clamp mu away from zero and
    let the y*log(mu) term produce the -inf.
    """
    mu = np.maximum(mu, np.finfo(float).tiny)
    return (
        gammaln(y + r)
        - gammaln(r)
        - gammaln(y + 1.0)
        + r * (np.log(r) - np.log(r + mu))
        + y * (np.log(mu) - np.log(r + mu))
    )


def logistic_model():
    """Logistic growth diffusion after the variance-stabilising transform.

    theta = (growth, crowding, diffusivity, dispersion). The transformed
    state is x = log(z)/diffusivity, with unit diffusion coefficient, drift
    growth/diffusivity - (crowding/diffusivity) exp(diffusivity x), random
    Gaussian initial state, and a product of two negative-binomial counts
    per observation with mean exp(diffusivity x).
    """

    def validate(theta):
        if theta[1] <= 0 or theta[2] <= 0 or theta[3] <= 0:
            raise ValueError("crowding, diffusivity and dispersion must be positive")

    def drift(theta, x):
        t1, t2, t3 = theta[0], theta[1], theta[2]
        return t1 / t3 - (t2 / t3) * np.exp(t3 * x)

    def drift_jac(theta, x):
        t1, t2, t3 = theta[0], theta[1], theta[2]
        e = np.exp(t3 * x[..., 0])
        out = np.zeros(x.shape[:-1] + (1, 4))
        out[..., 0, 0] = 1.0 / t3
        out[..., 0, 1] = -e / t3
        out[..., 0, 2] = -t1 / t3**2 - (t2 / t3**2) * e * (t3 * x[..., 0] - 1.0)
        return out

    def obs_logdensity(theta, y, x):
        mu = np.exp(theta[2] * x[..., 0])
        return _nb_logpmf(y[0], theta[3], mu) + _nb_logpmf(y[1], theta[3], mu)

    def obs_score(theta, y, x):
        t3, t4 = theta[2], theta[3]
        xs = x[..., 0]
        e = np.exp(t3 * xs)
        ysum = y[0] + y[1]
        out = np.zeros(x.shape[:-1] + (4,))
        out[..., 2] = -2 * t4 * xs * e / (t4 + e) + ysum * xs * (1 - e / (t4 + e))
        out[..., 3] = (
            digamma(y[0] + t4)
            + digamma(y[1] + t4)
            - 2 * digamma(t4)
            + 2 * (np.log(t4) - np.log(t4 + e))
            + 2 * (1 - t4 / (t4 + e))
            - ysum / (t4 + e)
        )
        return out

    def init_sample(theta, stream, size=()):
        mean = _LOGISTIC_INIT_MEAN_NUM / theta[2]
        sd = _LOGISTIC_INIT_SD_NUM / theta[2]
        return mean + sd * stream.standard_normal(size + (1,))

    def init_score(theta, x):
        t3 = theta[2]
        xs = x[..., 0]
        m = _LOGISTIC_INIT_MEAN_NUM
        s2 = _LOGISTIC_INIT_SD_NUM**2
        out = np.zeros(x.shape[:-1] + (4,))
        out[..., 2] = 1.0 / t3 - (t3 / s2) * (xs - m / t3) ** 2 - (m / s2) * (xs - m / t3)
        return out

    return ModelSpec(
        name="logistic",
        d=1,
        d_theta=4,
        d_y=2,
        transform_spec=("identity", "log", "log", "log"),
        drift=drift,
        drift_jacobian=drift_jac,
        sigma_const=np.eye(1),
        cov_inv_const=np.eye(1),
        obs_logdensity=obs_logdensity,
        obs_score=obs_score,
        init_sample=init_sample,
        init_score=init_score,
        validate_theta=validate,
    )


# ---------------------------------------------------------------------------
# Two-cell grid-cell network


def gridcell_model():
    """Coupled two-cell diffusion observed through Poisson spike counts.

    theta = (amp1, conn1, base1, decay1, diff1, log_rate1,
             amp2, conn2, base2, decay2, diff2, log_rate2).
    The state is rescaled by the diffusivities so the diffusion matrix is
    the identity. Counts on each observation interval are Poisson with rate
    dt * sum of exp(log_rate_i + x_i) over the grid points of the interval,
    endpoints included.
    """

    def validate(theta):
        if theta[3] <= 0 or theta[9] <= 0 or theta[4] <= 0 or theta[10] <= 0:
            raise ValueError("decay and diffusivity parameters must be positive")

    def _parts(theta):
        a1, b1, g1, d1, s1, _k1 = theta[0:6]
        a2, b2, g2, d2, s2, _k2 = theta[6:12]
        return a1, b1, g1, d1, s1, a2, b2, g2, d2, s2

    def drift(theta, x):
        a1, b1, g1, d1, s1, a2, b2, g2, d2, s2 = _parts(theta)
        x1, x2 = x[..., 0], x[..., 1]
        out = np.empty_like(x)
        out[..., 0] = a1 * np.tanh(b1 * s2 * x2 + g1) / s1 - d1 * x1
        out[..., 1] = a2 * np.tanh(b2 * s1 * x1 + g2) / s2 - d2 * x2
        return out

    def drift_jac(theta, x):
        a1, b1, g1, d1, s1, a2, b2, g2, d2, s2 = _parts(theta)
        x1, x2 = x[..., 0], x[..., 1]
        t1 = np.tanh(b1 * s2 * x2 + g1)
        t2 = np.tanh(b2 * s1 * x1 + g2)
        u1 = 1.0 - t1 * t1
        u2 = 1.0 - t2 * t2
        out = np.zeros(x.shape[:-1] + (2, 12))
        out[..., 0, 0] = t1 / s1
        out[..., 0, 1] = a1 * s2 * x2 * u1 / s1
        out[..., 0, 2] = a1 * u1 / s1
        out[..., 0, 3] = -x1
        out[..., 0, 4] = -a1 * t1 / s1**2
        out[..., 0, 10] = a1 * b1 * x2 * u1 / s1
        out[..., 1, 6] = t2 / s2
        out[..., 1, 7] = a2 * s1 * x1 * u2 / s2
        out[..., 1, 8] = a2 * u2 / s2
        out[..., 1, 9] = -x2
        out[..., 1, 4] = a2 * b2 * x1 * u2 / s2
        out[..., 1, 10] = -a2 * t2 / s2**2
        return out

    def intensity(theta, x):
        k1, k2 = theta[5], theta[11]
        out = np.empty_like(x)
        out[..., 0] = np.exp(k1 + x[..., 0])
        out[..., 1] = np.exp(k2 + x[..., 1])
        return out

    def obs_logdensity_segment(theta, y, rate_sum, dt):
        """log Poisson(y_i; dt * rate_sum_i) summed over the two cells."""
        lam = dt * rate_sum
        lam = np.maximum(lam, 1e-300)
        return np.sum(y * np.log(lam) - lam - gammaln(y + 1.0), axis=-1)

    def obs_score_segment(theta, y, rate_sum, dt):
        out = np.zeros(rate_sum.shape[:-1] + (12,))
        out[..., 5] = y[0] - dt * rate_sum[..., 0]
        out[..., 11] = y[1] - dt * rate_sum[..., 1]
        return out

    return ModelSpec(
        name="gridcell",
        d=2,
        d_theta=12,
        d_y=2,
        transform_spec=(
            "identity", "identity", "identity", "log", "log", "identity",
            "identity", "identity", "identity", "log", "log", "identity",
        ),
        drift=drift,
        drift_jacobian=drift_jac,
        sigma_const=np.eye(2),
        cov_inv_const=np.eye(2),
        obs_mode="segment",
        intensity=intensity,
        obs_logdensity_segment=obs_logdensity_segment,
        obs_score_segment=obs_score_segment,
        init_point=np.zeros(2),
        validate_theta=validate,
    )
