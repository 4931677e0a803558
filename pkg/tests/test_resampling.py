"""Coupled resampling laws, checked against enumerated PMFs."""

import numpy as np
import pytest
from scipy.stats import chisquare

from unbiased_score.oracles import bruteforce_coupling4_pmf
from unbiased_score.resampling import (
    common_uniform_couple_many,
    coupling_pmf,
    ess,
    maximal_couple2,
    maximal_couple2_many,
    maximal_couple4,
    maximal_couple4_many,
    multinomial,
    multinomial_many,
    normalize,
)
from unbiased_score.rng import SeedSpec, derive_stream


def stream(tag, i=0):
    return derive_stream(SeedSpec(2024).child(tag, i))


def rand_probs(rng, n):
    w = rng.gamma(1.0, size=n)
    return w / w.sum()


def chi2_ok(counts, probs, alpha=1e-3):
    probs = np.asarray(probs, dtype=float).ravel()
    counts = np.asarray(counts, dtype=float).ravel()
    keep = probs > 0
    assert counts[~keep].sum() == 0, "draw with zero probability observed"
    stat = chisquare(counts[keep], counts.sum() * probs[keep] / probs[keep].sum())
    return stat.pvalue > alpha


# --------------------------------------------------------------------------
# weights


def test_normalize_shift_invariance():
    logw = np.array([-1.0, -2.0, -0.5])
    a = normalize(logw).probs
    b = normalize(logw + 123.0).probs
    assert np.allclose(a, b)
    assert np.isclose(a.sum(), 1.0)


def test_normalize_batch_and_degenerate():
    batch = normalize(np.array([[0.0, -np.inf], [-np.inf, 0.0]])).probs
    assert np.allclose(batch, [[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        normalize(np.array([-np.inf, -np.inf]))


def test_ess_bounds():
    assert np.isclose(ess(np.full(8, 0.125)), 8.0)
    assert np.isclose(ess(np.array([1.0, 0, 0, 0])), 1.0)


# --------------------------------------------------------------------------
# multinomial


def test_multinomial_marginal():
    rng = np.random.default_rng(5)
    probs = rand_probs(rng, 5)
    idx = multinomial_many(stream("mn"), probs, 200_000)[0]
    counts = np.bincount(idx, minlength=5)
    assert chi2_ok(counts, probs)


def test_multinomial_rows_independent():
    probs = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    idx = multinomial_many(stream("mn", 1), probs, 50)
    assert np.all(idx[0] == 0)
    assert np.all(idx[1] == 2)
    assert multinomial(stream("mn", 2), [0.0, 1.0]) == 1


# --------------------------------------------------------------------------
# two-way maximal coupling


def test_couple2_faithful_on_equal_weights():
    rng = np.random.default_rng(7)
    w = rand_probs(rng, 6)
    a, b = maximal_couple2_many(stream("c2f"), w, w.copy(), 10_000)
    assert np.array_equal(a, b)


def test_couple2_joint_law():
    rng = np.random.default_rng(11)
    for trial in range(5):
        n = rng.integers(2, 5)
        w0, w1 = rand_probs(rng, n), rand_probs(rng, n)
        a, b = maximal_couple2_many(stream("c2", trial), w0, w1, 100_000)
        counts = np.zeros((n, n))
        np.add.at(counts, (a.ravel(), b.ravel()), 1)
        assert chi2_ok(counts, coupling_pmf(w0, w1)), trial


def test_coupling_pmf_marginals_and_mass():
    rng = np.random.default_rng(13)
    w0, w1 = rand_probs(rng, 7), rand_probs(rng, 7)
    pmf = coupling_pmf(w0, w1)
    assert np.allclose(pmf.sum(axis=1), w0, atol=1e-12)
    assert np.allclose(pmf.sum(axis=0), w1, atol=1e-12)
    # meeting mass equals the total variation overlap
    assert np.isclose(np.trace(pmf), np.minimum(w0, w1).sum())


def test_couple2_scalar_wrapper():
    a, b = maximal_couple2(stream("c2s"), [0.0, 1.0], [0.0, 1.0])
    assert (a, b) == (1, 1)


def test_couple2_common_residuals_still_correct_marginals():
    rng = np.random.default_rng(17)
    w0, w1 = rand_probs(rng, 4), rand_probs(rng, 4)
    a, b = maximal_couple2_many(stream("c2r"), w0, w1, 100_000,
                                common_residuals=True)
    assert chi2_ok(np.bincount(a.ravel(), minlength=4), w0)
    assert chi2_ok(np.bincount(b.ravel(), minlength=4), w1)


# --------------------------------------------------------------------------
# four-way coupling


def draw4_counts(w0, wb0, w1, wb1, n_draws, tag, conditional_redraw="coupled"):
    n = len(w0)
    a0, ab0, a1, ab1 = maximal_couple4_many(
        stream(tag), np.asarray(w0), np.asarray(wb0),
        np.asarray(w1), np.asarray(wb1), n_draws,
        conditional_redraw=conditional_redraw,
    )
    flat = ((a0 * n + a1) * n * n + (ab0 * n + ab1)).ravel()
    return np.bincount(flat, minlength=n**4).reshape(n * n, n * n)


def test_couple4_both_levels_identical_collapses():
    rng = np.random.default_rng(19)
    w0, w1 = rand_probs(rng, 3), rand_probs(rng, 3)
    a0, ab0, a1, ab1 = maximal_couple4_many(
        stream("c4id"), w0, w0.copy(), w1, w1.copy(), 20_000
    )
    assert np.array_equal(a0, ab0)
    assert np.array_equal(a1, ab1)
    counts = np.zeros((3, 3))
    np.add.at(counts, (a0.ravel(), a1.ravel()), 1)
    assert chi2_ok(counts, coupling_pmf(w0, w1))


@pytest.mark.parametrize("redraw", ["coupled", "independent"])
@pytest.mark.parametrize("case", ["coarse-identical", "fine-identical", "generic"])
def test_couple4_joint_law_against_enumeration(case, redraw):
    rng = np.random.default_rng(hash((case, redraw)) % 2**32)
    for trial in range(3):
        n = int(rng.integers(2, 4))
        w0, w1 = rand_probs(rng, n), rand_probs(rng, n)
        wb0 = w0.copy() if case == "coarse-identical" else rand_probs(rng, n)
        wb1 = w1.copy() if case == "fine-identical" else rand_probs(rng, n)
        ref = bruteforce_coupling4_pmf(w0, wb0, w1, wb1, conditional_redraw=redraw)
        counts = draw4_counts(w0, wb0, w1, wb1, 400_000, f"c4-{case}-{redraw}-{trial}",
                              conditional_redraw=redraw)
        assert chi2_ok(counts, ref), (case, redraw, trial)


def test_couple4_independent_redraw_preserves_barred_marginal():
    rng = np.random.default_rng(31)
    w0, w1, wb1 = rand_probs(rng, 3), rand_probs(rng, 3), rand_probs(rng, 3)
    a0, ab0, a1, ab1 = maximal_couple4_many(
        stream("c4ind"), w0, w0.copy(), w1, wb1, 300_000,
        conditional_redraw="independent",
    )
    assert np.array_equal(a0, ab0)
    bar = np.zeros((3, 3))
    np.add.at(bar, (ab0.ravel(), ab1.ravel()), 1)
    assert chi2_ok(bar, coupling_pmf(w0, wb1))


def test_couple4_bad_redraw_mode_raises():
    w = np.ones(3) / 3
    with pytest.raises(ValueError):
        maximal_couple4_many(stream("err2"), w, w, w, w, 1,
                             conditional_redraw="nope")


def test_couple4_marginal_pairs():
    rng = np.random.default_rng(23)
    w0, wb0 = rand_probs(rng, 3), rand_probs(rng, 3)
    w1, wb1 = rand_probs(rng, 3), rand_probs(rng, 3)
    a0, ab0, a1, ab1 = maximal_couple4_many(
        stream("c4m"), w0, wb0, w1, wb1, 300_000
    )
    un = np.zeros((3, 3))
    np.add.at(un, (a0.ravel(), a1.ravel()), 1)
    assert chi2_ok(un, coupling_pmf(w0, w1))
    bar = np.zeros((3, 3))
    np.add.at(bar, (ab0.ravel(), ab1.ravel()), 1)
    assert chi2_ok(bar, coupling_pmf(wb0, wb1))


def test_couple4_scalar_wrapper_all_equal():
    w = np.array([0.25, 0.75])
    out = maximal_couple4(stream("c4s"), w, w, w, w)
    assert out[0] == out[1] and out[2] == out[3]


# --------------------------------------------------------------------------
# comparator coupling


def test_common_uniform_faithful_and_marginal():
    rng = np.random.default_rng(29)
    w = rand_probs(rng, 5)
    idx = common_uniform_couple_many(stream("cu"), [w, w.copy(), w.copy()], 5000)
    assert np.array_equal(idx[0], idx[1])
    assert np.array_equal(idx[0], idx[2])
    w2 = rand_probs(rng, 5)
    idx = common_uniform_couple_many(stream("cu", 1), [w, w2], 100_000)
    assert chi2_ok(np.bincount(idx[0].ravel(), minlength=5), w)
    assert chi2_ok(np.bincount(idx[1].ravel(), minlength=5), w2)


def test_couple4_shape_mismatch():
    with pytest.raises(ValueError):
        maximal_couple4_many(stream("err"), np.ones(3) / 3, np.ones(4) / 4,
                             np.ones(3) / 3, np.ones(3) / 3, 1)
