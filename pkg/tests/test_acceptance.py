"""End-to-end acceptance checks, one test per numbered criterion.

Each test exercises the library the way a user would: synthetic data from
the bundled simulators, estimator configs assembled through the experiment
layer, and closed-form oracles (Kalman recursions, enumerated coupling
laws, finite differences) as the source of every expected value. Heavy
Monte Carlo pools are computed once per session and shared across the
tests that need them.
"""

import functools
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from unbiased_score.drivers import PriorSpec, constant_schedule, polyak_ruppert, power_schedule, sga_run, sgld_run
from unbiased_score.estimators import level_increments, replicate_scores
from unbiased_score.experiments import (
    ExperimentConfig,
    build_estimator_config,
    load_observations,
    make_model,
)
from unbiased_score.grid import build_irregular_grid
from unbiased_score.models import from_constrained
from unbiased_score.oracles import (
    bruteforce_coupling4_pmf,
    kalman_score,
    ou_euler_ssm,
    ou_exact_ssm,
)
from unbiased_score.resampling import (
    coupling_pmf,
    maximal_couple2_many,
    maximal_couple4_many,
)
from unbiased_score.rng import SeedSpec, derive_stream

OU_THETA = np.array([2.0, 7.0, 1.0])


# ---------------------------------------------------------------------------
# shared fixtures (cached per session)


@functools.lru_cache(maxsize=None)
def ou_t10_setup():
    """OU estimator on the T=10 dataset used by criteria 1-3, 9 and 10."""
    cfg = ExperimentConfig(
        kind="estimate-score", model="ou", theta=tuple(OU_THETA), horizon=10,
        N=64, preset="simple", truncation=7, seed=0,
    )
    model = make_model("ou")
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    est = build_estimator_config(cfg, model, OU_THETA, obs, spec)
    return model, obs, est, spec


@functools.lru_cache(maxsize=None)
def ou_t10_oracles():
    _, obs, _, _ = ou_t10_setup()
    ys = obs.values[:, 0]
    s3 = kalman_score(lambda th: ou_euler_ssm(th, level=3), OU_THETA, ys)
    s4 = kalman_score(lambda th: ou_euler_ssm(th, level=4), OU_THETA, ys)
    s9 = kalman_score(lambda th: ou_euler_ssm(th, level=9), OU_THETA, ys)
    return s3, s4, s9


@functools.lru_cache(maxsize=None)
def base_level_pool():
    """2000 replicates of the fixed-level (shift 0) estimator."""
    model, obs, est, spec = ou_t10_setup()
    return level_increments(model, OU_THETA, obs, est, spec.child("c1"), 2000, 0)


@functools.lru_cache(maxsize=None)
def increment_pool():
    """2000 replicates of the level-(3,4) increment estimator."""
    model, obs, est, spec = ou_t10_setup()
    return level_increments(model, OU_THETA, obs, est, spec.child("c2"), 2000, 1)


@functools.lru_cache(maxsize=None)
def truncated_score_pool():
    """5000 replicates of the randomized-level (truncated) estimator."""
    model, obs, est, spec = ou_t10_setup()
    out = replicate_scores(model, OU_THETA, obs, est, spec.child("c3"), 5000)
    values = out["values"]
    ok = ~np.isnan(values).any(axis=1)
    return values[ok]


def mean_within_se(values, target, n_se=4.0):
    m = values.mean(axis=0)
    se = values.std(axis=0) / np.sqrt(len(values))
    return np.abs(m - target) <= n_se * se, (m - target) / se


# ---------------------------------------------------------------------------
# criteria 1-3: exactness against the Kalman oracle


def test_criterion_01_fixed_level_unbiasedness():
    out = base_level_pool()
    assert not out["failed"].any()
    s3, _, _ = ou_t10_oracles()
    ok, z = mean_within_se(out["increments"], s3)
    assert ok.all(), f"z-scores {z}"


def test_criterion_02_increment_unbiasedness():
    out = increment_pool()
    assert not out["failed"].any()
    s3, s4, _ = ou_t10_oracles()
    ok, z = mean_within_se(out["increments"], s4 - s3)
    assert ok.all(), f"z-scores {z}"


def test_criterion_03_truncated_sum_exactness():
    values = truncated_score_pool()
    assert len(values) >= 4990
    _, _, s9 = ou_t10_oracles()
    ok, z = mean_within_se(values, s9)
    assert ok.all(), f"z-scores {z}"


# ---------------------------------------------------------------------------
# criterion 4: increment-variance decay across levels


@functools.lru_cache(maxsize=None)
def ou_t25_setup(iteration_cap):
    cfg = ExperimentConfig(
        kind="increment-variance", model="ou", theta=tuple(OU_THETA),
        horizon=25, N=128, preset="simple", truncation=7, seed=0,
        iteration_cap=iteration_cap,
    )
    model = make_model("ou")
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    est = build_estimator_config(cfg, model, OU_THETA, obs, spec)
    return model, obs, est, spec


def test_criterion_04_variance_decay_and_comparator():
    model, obs, est, spec = ou_t25_setup(300)
    shifted = [2, 3, 4, 5]  # levels 5..8 on the base-3 ladder
    log2_var = []
    for j in shifted:
        out = level_increments(model, OU_THETA, obs, est, spec.child("maximal", j), 500, j)
        assert not out["failed"].any()
        log2_var.append(np.log2(out["increments"].var(axis=0).sum()))
    levels = [j + est.l_min for j in shifted]
    assert np.all(np.diff(log2_var) < 0), f"log2 variance not decreasing: {log2_var}"
    slope = np.polyfit(levels, log2_var, 1)[0]
    assert slope <= -0.5, f"maximal-coupling slope {slope:.3f}"

    # shared-uniform comparator: no decay.  Runs that fail to coalesce by
    # the iteration cap are excluded (they are the norm for this coupling).
    cmp_est = replace(
        est, iteration_cap=100, opts=replace(est.opts, coupling="common-uniform")
    )
    cmp_log2_var, n_ok = [], []
    for j in shifted:
        out = level_increments(model, OU_THETA, obs, cmp_est, spec.child("common", j), 100, j)
        v = out["increments"]
        keep = ~np.isnan(v).any(axis=1)
        n_ok.append(int(keep.sum()))
        assert keep.sum() >= 30
        cmp_log2_var.append(np.log2(v[keep].var(axis=0).sum()))
    cmp_slope = np.polyfit(levels, cmp_log2_var, 1)[0]
    assert cmp_slope >= -0.1, f"comparator slope {cmp_slope:.3f} (n_ok {n_ok})"


# ---------------------------------------------------------------------------
# criterion 5: discretization-bias decay (oracle only)


def test_criterion_05_discretization_bias_halves_per_level():
    _, obs, _, _ = ou_t10_setup()
    ys = obs.values[:, 0]
    exact = kalman_score(ou_exact_ssm, OU_THETA, ys)
    errs = []
    for level in range(3, 10):
        approx = kalman_score(lambda th: ou_euler_ssm(th, level=level), OU_THETA, ys)
        errs.append(np.abs(approx - exact).sum())
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios >= 1.8), f"ratios {np.round(ratios, 3)}"


# ---------------------------------------------------------------------------
# criterion 6: meeting-time behavior


def survival_r2(tau_bar):
    ts = np.arange(1, tau_bar.max())
    surv = np.array([(tau_bar > t).mean() for t in ts])
    mask = (surv > 0) & (surv < 1)
    x, y = ts[mask], np.log(surv[mask])
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    return 1.0 - resid @ resid / ((y - y.mean()) @ (y - y.mean()))


def stopping_times(horizon, n_particles, seed_child, runs, shifted_level):
    cfg = ExperimentConfig(
        kind="stopping-times", model="ou", theta=tuple(OU_THETA),
        horizon=horizon, N=n_particles, b=0, I=0, truncation=7, seed=0,
        iteration_cap=100_000,
    )
    model = make_model("ou")
    obs = load_observations(cfg)
    est = build_estimator_config(cfg, model, OU_THETA, obs, SeedSpec(0))
    out = level_increments(
        model, OU_THETA, obs, est, SeedSpec(0).child(seed_child), runs, shifted_level
    )
    return out["tau"].max(axis=1), out["failed"]


def test_criterion_06_meeting_times():
    # T=25: every run at every level meets, survival curves log-linear
    medians = {}
    for j in range(6):
        tau_bar, failed = stopping_times(25, 128, f"t25-{j}", 200, j)
        assert not failed.any(), f"level {j + 3}: {failed.sum()} runs hit the cap"
        r2 = survival_r2(tau_bar)
        assert r2 > 0.8, f"level {j + 3}: survival R^2 {r2:.3f}"
        medians[j] = np.median(tau_bar)

    # growth with T at fixed N, and its absence when N scales with T
    tau_fixed, failed_fixed = stopping_times(100, 128, "t100-n128", 100, 3)
    assert not failed_fixed.any()
    tau_scaled, failed_scaled = stopping_times(100, 512, "t100-n512", 100, 3)
    assert not failed_scaled.any()
    med_fixed = np.median(tau_fixed)
    med_scaled = np.median(tau_scaled)
    threshold = 3.0 * medians[3]
    assert med_scaled <= threshold, (
        f"N scaled with T: median {med_scaled} > {threshold}"
    )
    if med_fixed <= threshold:
        # Gather the growth curve as evidence before reporting the failure:
        # the qualitative effect (super-linear growth at fixed N, absent
        # when N scales with T) is present, but the factor-3 margin is not
        # reached by T=100 with this implementation's coupling.
        tau_200, _ = stopping_times(200, 128, "t200-n128", 50, 3)
        pytest.fail(
            "median stopping time at fixed N=128 grew from "
            f"{medians[3]} (T=25) to {med_fixed} (T=100), short of the "
            f"required 3x factor ({threshold}); T=200 median "
            f"{np.median(tau_200)} shows the 3x growth arrives later in T "
            f"(N scaled to 512 stays at {med_scaled}). See the decisions "
            "ledger for the full analysis."
        )


# ---------------------------------------------------------------------------
# criterion 7: coupled-resampler laws against enumeration


def chi2_pvalue(counts, probs):
    probs = np.asarray(probs, dtype=float).ravel()
    counts = np.asarray(counts, dtype=float).ravel()
    keep = probs > 0
    assert counts[~keep].sum() == 0, "draw observed in a zero-probability cell"
    return chisquare(counts[keep], counts.sum() * probs[keep] / probs[keep].sum()).pvalue


def test_criterion_07_coupled_resampler_correctness():
    rng = np.random.default_rng(20240820)
    for i in range(20):
        n = [2, 3, 4][i % 3]
        w = rng.gamma(1.0, size=(4, n))
        w /= w.sum(axis=1, keepdims=True)
        w0, wb0, w1, wb1 = w

        a, ab = maximal_couple2_many(derive_stream(SeedSpec(7).child("pair", i)), w0, w1, 100_000)
        counts2 = np.bincount((a * n + ab).ravel(), minlength=n * n)
        p2 = chi2_pvalue(counts2, coupling_pmf(w0, w1))
        assert p2 > 0.001, f"config {i}: pair coupling p={p2:.2e}"

        a0, ab0, a1, ab1 = maximal_couple4_many(
            derive_stream(SeedSpec(7).child("quad", i)), w0, wb0, w1, wb1, 1_000_000
        )
        flat = ((a0 * n + a1) * n * n + (ab0 * n + ab1)).ravel()
        counts4 = np.bincount(flat, minlength=n**4)
        p4 = chi2_pvalue(counts4, bruteforce_coupling4_pmf(w0, wb0, w1, wb1))
        assert p4 > 0.001, f"config {i}: four-way coupling p={p4:.2e}"

    # faithfulness: identical weights must produce identical indices, exactly
    w = rng.gamma(1.0, size=5)
    w /= w.sum()
    a, ab = maximal_couple2_many(derive_stream(SeedSpec(7).child("faith2")), w, w.copy(), 10_000)
    assert np.array_equal(a, ab)
    a0, ab0, a1, ab1 = maximal_couple4_many(
        derive_stream(SeedSpec(7).child("faith4")), w, w.copy(), w.copy(), w.copy(), 10_000
    )
    assert np.array_equal(a0, ab0) and np.array_equal(a0, a1) and np.array_equal(a0, ab1)


# ---------------------------------------------------------------------------
# criterion 8: analytic parameter gradients against central differences


def central_fd(f, theta, h_scale=1e-6):
    theta = np.asarray(theta, dtype=float)
    base = np.asarray(f(theta), dtype=float)
    grad = np.zeros(base.shape + (len(theta),))
    for i in range(len(theta)):
        h = h_scale * max(1.0, abs(theta[i]))
        hi = theta.copy()
        hi[i] += h
        lo = theta.copy()
        lo[i] -= h
        grad[..., i] = (np.asarray(f(hi)) - np.asarray(f(lo))) / (2.0 * h)
    return grad


def rel_close(analytic, fd, tol=1e-5):
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
    return np.abs(analytic - fd) / scale <= tol


def test_criterion_08_gradient_formulas_match_finite_differences():
    rng = np.random.default_rng(88)

    ou = make_model("ou")
    for _ in range(100):
        theta = np.array([rng.uniform(0.5, 4), rng.uniform(-5, 10), rng.uniform(0.3, 3)])
        x = np.array([theta[1] + 2 * rng.standard_normal()])
        y = np.array([x[0] + rng.standard_normal()])
        assert rel_close(ou.drift_jacobian(theta, x),
                         central_fd(lambda th: ou.drift(th, x), theta)).all()
        assert rel_close(ou.obs_score(theta, y, x),
                         central_fd(lambda th: ou.obs_logdensity(th, y, x), theta)).all()

    logistic = make_model("logistic")
    for _ in range(100):
        theta = np.array([
            rng.uniform(0.5, 3), np.exp(rng.uniform(np.log(1e-3), np.log(1e-1))),
            rng.uniform(0.5, 1.5), rng.uniform(1.0, 20.0),
        ])
        x = np.array([5.0 / theta[2] + 2 * rng.standard_normal()])
        y = rng.integers(0, 40, size=2).astype(float)
        assert rel_close(logistic.drift_jacobian(theta, x),
                         central_fd(lambda th: logistic.drift(th, x), theta)).all()
        assert rel_close(logistic.obs_score(theta, y, x),
                         central_fd(lambda th: logistic.obs_logdensity(th, y, x), theta)).all()

        def init_logdensity(th):
            mean, sd = 5.0 / th[2], 10.0 / th[2]
            return -np.log(sd) - 0.5 * ((x[0] - mean) / sd) ** 2
        assert rel_close(logistic.init_score(theta, x),
                         central_fd(init_logdensity, theta)).all()

    gridcell = make_model("gridcell")
    for _ in range(100):
        theta = np.concatenate([
            [rng.uniform(0.5, 2), rng.uniform(-1, 1), rng.uniform(-1, 1),
             rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(-1, 1)],
            [rng.uniform(0.5, 2), rng.uniform(-1, 1), rng.uniform(-1, 1),
             rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(-1, 1)],
        ])
        x = rng.standard_normal(2)
        xs = rng.standard_normal((5, 2))
        y = rng.integers(0, 10, size=2).astype(float)
        dt = 0.05
        assert rel_close(gridcell.drift_jacobian(theta, x),
                         central_fd(lambda th: gridcell.drift(th, x), theta)).all()

        def segment_logdensity(th):
            return gridcell.obs_logdensity_segment(
                th, y, gridcell.intensity(th, xs).sum(axis=0), dt
            )
        rate_sum = gridcell.intensity(theta, xs).sum(axis=0)
        assert rel_close(gridcell.obs_score_segment(theta, y, rate_sum, dt),
                         central_fd(segment_logdensity, theta)).all()


# ---------------------------------------------------------------------------
# criterion 9: Monte Carlo rate of replicate averaging


def test_criterion_09_replicate_averaging_rate():
    values = truncated_score_pool()
    _, _, s9 = ou_t10_oracles()
    r_values = [8, 32, 128, 512]
    errs = []
    for r in r_values:
        groups = len(values) // r
        means = values[: groups * r].reshape(groups, r, -1).mean(axis=1)
        errs.append(np.mean(np.sum((means - s9) ** 2, axis=1)))
    slope = np.polyfit(np.log(r_values), np.log(errs), 1)[0]
    assert -1.25 <= slope <= -0.75, f"slope {slope:.3f}, errors {errs}"


# ---------------------------------------------------------------------------
# criterion 10: closed-form cost accounting


def test_criterion_10_kernel_cost_identities():
    _, _, est, _ = ou_t10_setup()
    ii = est.I

    single = base_level_pool()
    tau = single["tau"][:, 0]
    units = single["kernel_units"][:, 0]
    assert np.array_equal(units, np.maximum(2 * tau - 1, ii + tau - 1))

    pair = increment_pool()
    tau_c, tau_f = pair["tau"][:, 0], pair["tau"][:, 1]
    units_c, units_f = pair["kernel_units"][:, 0], pair["kernel_units"][:, 1]
    assert np.array_equal(units_c, np.maximum(2 * tau_c - 1, ii + tau_c - 1))
    assert np.array_equal(units_f, np.maximum(2 * tau_f - 1, ii + tau_f - 1))
    # combined cost, with the coarse level weighted at half a unit
    combined = units_c / 2.0 + units_f
    closed_form = (
        np.maximum(2 * tau_c - 1, ii + tau_c - 1) / 2.0
        + np.maximum(2 * tau_f - 1, ii + tau_f - 1)
    )
    assert np.array_equal(combined, closed_form)


# ---------------------------------------------------------------------------
# criterion 11: end-to-end inference smoke tests


KANGAROO_THETA = np.array([2.397, 4.429e-3, 0.840, 17.631])


def test_criterion_11_inference_smoke():
    # Langevin-dynamics runs on synthetic count data
    cfg = ExperimentConfig(
        kind="sgld", model="logistic", theta=tuple(KANGAROO_THETA), n_obs=41,
        N=128, l_min=0, truncation=2, b=10, I=10, adaptive=True, seed=11,
        iteration_cap=3000,
    )
    model = make_model("logistic")
    obs = load_observations(cfg)
    est = build_estimator_config(cfg, model, KANGAROO_THETA, obs, SeedSpec(cfg.seed))
    prior = PriorSpec(np.array([0.0, -1.0, -1.0, -1.0]), np.array([25.0, 4.0, 4.0, 4.0]))
    schedule = power_schedule(100.0, 0.6, np.array([1e-2, 1e-2, 1e-4, 1e-2]))
    theta0_working = from_constrained(KANGAROO_THETA, model.transform_spec)
    sgld_good = 0
    for seed in range(10):
        trace = sgld_run(
            model, obs, est, prior, theta0_working, schedule, 300,
            SeedSpec(seed).child("sgld"),
        )
        sgld_good += (
            trace["iterations"] == 300
            and not trace["diverged"]
            and trace["capped"] is None
        )
    assert sgld_good >= 9, f"stable Langevin runs: {sgld_good}/10"

    # gradient-ascent runs on synthetic spike-count data, with ancestor
    # sampling; success = the averaged connectivity estimate for cell 1
    # recovers the generating sign
    cfg = ExperimentConfig(
        kind="sga", model="gridcell", n_obs=64, N=128, truncation=1,
        b=20, I=20, adaptive=True, kernel="caspf", seed=7, iteration_cap=2000,
    )
    model = make_model("gridcell")
    obs = load_observations(cfg)
    theta_gen = np.ones(12)
    est = build_estimator_config(cfg, model, theta_gen, obs, SeedSpec(cfg.seed))
    times = np.concatenate([[0.0], obs.times])
    est = replace(est, grid_builder=lambda j: build_irregular_grid(times, j + 3))
    theta0 = theta_gen.copy()
    theta0[[1, 7]] = 0.0
    theta0_working = from_constrained(theta0, model.transform_spec)
    schedule = constant_schedule(1e-3)
    sga_good = 0
    for seed in range(10):
        trace = sga_run(
            model, obs, est, theta0_working, schedule, 100, SeedSpec(seed).child("sga")
        )
        n = trace["iterations"]
        averaged = polyak_ruppert(trace["constrained"][: n + 1], 0.0)
        sga_good += n == 100 and not trace["diverged"] and averaged[-1][1] > 0
    assert sga_good >= 8, f"sign-recovering ascent runs: {sga_good}/10"
