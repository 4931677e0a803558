"""Gradient loops checked against analytically solvable targets."""

import numpy as np
import pytest

from unbiased_score.drivers import (
    PriorSpec,
    constant_schedule,
    polyak_ruppert,
    power_schedule,
    sga_run,
    sgld_run,
    working_gradient,
)
from unbiased_score.estimators import IterationCapError
from unbiased_score.models import ou_model
from unbiased_score.oracles import kalman_score, ou_exact_ssm
from unbiased_score.rng import SeedSpec, derive_stream


def quad_score_fn(target, weight=1.0):
    """Gradient of -0.5*weight*||theta - target||^2 (identity transforms)."""
    def fn(theta_c, spec):
        return -weight * (np.asarray(theta_c) - target), 1.0
    return fn


def make_model(d=2):
    # identity transform spec so working space == constrained space
    class M:
        transform_spec = ("identity",) * d
    return M()


# --------------------------------------------------------------------------
# schedules / utilities


def test_schedules():
    s = constant_schedule(0.3)
    assert s(1) == s(99) == 0.3
    p = power_schedule(100, 0.6, scale=2.0)
    assert np.isclose(p(0), 2.0 * 100**-0.6)
    assert p(10) < p(0)
    v = constant_schedule([0.1, 0.2])
    assert np.allclose(v(5), [0.1, 0.2])
    with pytest.raises(ValueError):
        constant_schedule(-1.0)(1)


def test_working_gradient_chain_rule():
    g = working_gradient([2.0, 3.0, 4.0], [5.0, 6.0, 7.0],
                         ("log", "identity", "log"))
    assert np.allclose(g, [10.0, 3.0, 28.0])


def test_prior_spec():
    pr = PriorSpec(mean=[0.0, 1.0], var=[4.0, 1.0])
    assert np.allclose(pr.grad_logpdf(np.array([2.0, 0.0])), [-0.5, 1.0])
    with pytest.raises(ValueError):
        PriorSpec(mean=[0.0], var=[0.0])


def test_polyak_ruppert_examples():
    out = polyak_ruppert(np.array([[0.0], [2.0]]))
    assert np.allclose(out, [[0.0], [1.0]])
    const = polyak_ruppert(np.full((7, 2), 3.5))
    assert np.allclose(const, 3.5)
    out = polyak_ruppert(np.arange(10.0)[:, None], burn_fraction=0.5)
    assert out.shape == (5, 1)
    assert np.isclose(out[-1, 0], np.mean([5, 6, 7, 8, 9]))
    with pytest.raises(ValueError):
        polyak_ruppert(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        polyak_ruppert(np.zeros((3, 2)), burn_fraction=1.0)


def test_polyak_ruppert_variance_shrinks():
    rng = np.random.default_rng(50)
    draws = rng.normal(size=(4000, 1))
    avg = polyak_ruppert(draws)
    # running average at step m has variance 1/m
    assert abs(avg[-1, 0]) < 4.0 / np.sqrt(4000)
    assert np.var(avg[-100:, 0]) < np.var(draws[-100:, 0]) / 100


# --------------------------------------------------------------------------
# gradient ascent


def test_sga_fixed_point_of_zero_gradient():
    model = make_model()
    fn = quad_score_fn(np.array([1.5, -2.0]))
    tr = sga_run(model, None, None, [1.5, -2.0], constant_schedule(0.1), 20,
                 SeedSpec(51).child("fp"), score_fn=fn)
    assert np.allclose(tr["working"], np.array([1.5, -2.0]))
    assert not tr["diverged"]
    assert tr["iterations"] == 20


def test_sga_converges_on_quadratic():
    model = make_model()
    target = np.array([3.0, -1.0])
    tr = sga_run(model, None, None, [0.0, 0.0], constant_schedule(0.1), 200,
                 SeedSpec(52).child("q"), score_fn=quad_score_fn(target))
    assert np.allclose(tr["working"][-1], target, atol=1e-6)
    assert np.all(np.diff(tr["score_norm"][1:]) <= 1e-12)


def test_sga_log_transform_targets_constrained_optimum():
    class M:
        transform_spec = ("log",)
    tr = sga_run(M(), None, None, [0.0], constant_schedule(0.05), 400,
                 SeedSpec(53).child("lg"),
                 score_fn=quad_score_fn(np.array([2.0])))
    assert np.isclose(tr["constrained"][-1, 0], 2.0, atol=1e-4)


def test_sga_divergence_guard():
    model = make_model(1)
    # wrong-signed gradient pushes the iterate away until the guard trips
    fn = lambda t, s: (np.asarray(t) * 2.0, 1.0)  # noqa: E731
    tr = sga_run(model, None, None, [1.0], constant_schedule(1.0), 500,
                 SeedSpec(54).child("dv"), score_fn=fn)
    assert tr["diverged"]
    assert tr["iterations"] < 500
    assert np.isnan(tr["working"][tr["iterations"]]).all()


def test_sga_capped_flag():
    model = make_model(1)
    def fn(t, s):
        raise IterationCapError("stub")
    tr = sga_run(model, None, None, [1.0], constant_schedule(0.1), 10,
                 SeedSpec(55).child("cp"), score_fn=fn)
    assert tr["capped"] == 1
    assert tr["iterations"] == 0


def test_sga_with_exact_scores_shrinks_gradient():
    # drive with the exact Kalman score of synthetic data: the gradient norm
    # trend must fall over the run for most seeds
    model = ou_model()
    wins = 0
    for seed in range(10):
        ssm = ou_exact_ssm([2.0, 7.0, 1.0])
        stream = derive_stream(SeedSpec(56).child("data", seed))
        x, ys = ssm.x0, []
        for _ in range(40):
            x = ssm.trans_mult * x + ssm.trans_off + np.sqrt(ssm.trans_var) * stream.standard_normal()
            ys.append(x + np.sqrt(ssm.obs_var) * stream.standard_normal())
        fn = lambda t, s: (kalman_score(ou_exact_ssm, t, ys), 1.0)  # noqa: E731
        theta0_w = np.array([np.log(1.0), 5.0, np.log(2.0)])
        tr = sga_run(model, None, None, theta0_w,
                     power_schedule(50, 0.6, scale=0.05), 60,
                     SeedSpec(56).child("run", seed), score_fn=fn)
        norms = tr["score_norm"][1:tr["iterations"] + 1]
        if not tr["diverged"] and norms[-10:].mean() < norms[:10].mean():
            wins += 1
    assert wins >= 8


# --------------------------------------------------------------------------
# Langevin


def test_sgld_flat_target_is_random_walk():
    model = make_model(3)
    eps = 0.01
    fn = lambda t, s: (np.zeros(3), 1.0)  # noqa: E731
    tr = sgld_run(model, None, None, None, np.zeros(3),
                  constant_schedule(eps), 4000, SeedSpec(57).child("rw"),
                  score_fn=fn)
    steps = np.diff(tr["working"], axis=0)
    assert abs(steps.mean()) < 4 * np.sqrt(eps / steps.size)
    assert np.allclose(steps.var(axis=0), eps, rtol=0.15)


def test_sgld_matches_conjugate_gaussian_posterior():
    # score of a Gaussian likelihood plus Gaussian prior: posterior is
    # Gaussian with precision = sum of precisions
    model = make_model(1)
    prior = PriorSpec(mean=[0.0], var=[1.0])
    data_mean, data_prec = 2.0, 4.0
    fn = lambda t, s: (-data_prec * (np.asarray(t) - data_mean), 1.0)  # noqa: E731
    post_prec = data_prec + 1.0
    post_mean = data_prec * data_mean / post_prec
    tr = sgld_run(model, None, None, prior, [post_mean],
                  constant_schedule(0.02), 20_000, SeedSpec(58).child("cg"),
                  score_fn=fn)
    draws = tr["working"][2000:, 0]
    # autocorrelated chain: generous effective-sample-size deflation
    ess = len(draws) * 0.02 * post_prec / 2
    assert abs(draws.mean() - post_mean) < 3 * np.sqrt(1 / post_prec / ess)
    assert np.isclose(draws.var(), 1 / post_prec, rtol=0.2)


def test_sgld_capped_and_guard():
    model = make_model(1)
    def fn(t, s):
        raise IterationCapError("stub")
    tr = sgld_run(model, None, None, None, [0.0], constant_schedule(0.1), 5,
                  SeedSpec(59).child("cp"), score_fn=fn)
    assert tr["capped"] == 1
    big = lambda t, s: (np.array([1e9]), 1.0)  # noqa: E731
    tr = sgld_run(model, None, None, None, [0.0], constant_schedule(0.1), 5,
                  SeedSpec(59).child("dv"), score_fn=big)
    assert tr["diverged"]
