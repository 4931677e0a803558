"""Weight handling and coupled resampling samplers.

Provides log-weight normalization, effective sample size, multinomial
resampling, the maximal coupling of two categorical distributions, and the
maximal coupling of two across-level maximal couplings (the four-index
sampler used when running coupled particle systems at adjacent resolution
levels). All samplers have vectorized cores drawing an (n_rows, m) array of
indices at once, one independent weight configuration per row.

Indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "WeightVector",
    "normalize",
    "ess",
    "multinomial",
    "multinomial_many",
    "maximal_couple2",
    "maximal_couple2_many",
    "coupling_pmf",
    "maximal_couple4",
    "maximal_couple4_many",
    "common_uniform_couple_many",
]


@dataclass(frozen=True)
class WeightVector:
    """Log-weights with cached normalized probabilities."""

    logw: np.ndarray
    probs: np.ndarray


def normalize(logw):
    """Normalize log-weights by max-subtraction and exponentiation.

    Accepts a single vector or a batch with weights on the last axis.
    """
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("all log-weights are -inf: weights degenerate")
    w = np.exp(logw - m)
    probs = w / w.sum(axis=-1, keepdims=True)
    return WeightVector(logw=logw, probs=probs)


def ess(probs):
    """Effective sample size 1 / sum(w^2) along the last axis."""
    probs = np.asarray(probs, dtype=float)
    return 1.0 / np.sum(probs * probs, axis=-1)


def _rows(probs):
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs = probs[None, :]
    return probs


def _rowwise_categorical(probs, u):
    """Inverse-CDF draw per row: probs (B,N) rows summing to ~1, u (B,m)."""
    n = probs.shape[-1]
    cdf = np.cumsum(probs, axis=-1)
    # rows with zero total mass can reach here as never-used branch output
    # (e.g. the residual draw of an exactly-coupled row); any index will do
    tot = cdf[..., -1:]
    cdf = cdf / np.where(tot > 0, tot, 1.0)
    nrows = cdf.shape[0]
    # offset each row into its own [2r, 2r+1] band so one flat searchsorted
    # resolves all rows at once
    off = 2.0 * np.arange(nrows)[:, None]
    idx = np.searchsorted((cdf + off).ravel(), (u + off).ravel(), side="right")
    idx = idx.reshape(u.shape) - np.arange(nrows)[:, None] * n
    return np.clip(idx, 0, n - 1)


def multinomial_many(stream, probs, m):
    """Draw m categorical indices per row of probs."""
    probs = _rows(probs)
    u = stream.random((probs.shape[0], m))
    return _rowwise_categorical(probs, u)


def multinomial(stream, probs):
    """Draw one categorical index from a single weight vector."""
    return int(multinomial_many(stream, np.asarray(probs)[None, :], 1)[0, 0])


def maximal_couple2_many(stream, w, wbar, m, common_residuals=False):
    """Maximally coupled pair draws, m per row.

    With probability mu = sum(min(w, wbar)) the two indices coincide and are
    drawn from the overlap; otherwise they are drawn from the two residual
    distributions, independently by default or with a shared uniform when
    common_residuals is set.

    Returns (a, abar), each (n_rows, m). Always consumes four uniform blocks
    of shape (n_rows, m), so the draw pattern does not depend on the weights.
    """
    w = _rows(w)
    wbar = _rows(wbar)
    if w.shape != wbar.shape:
        raise ValueError("weight shape mismatch")
    o = np.minimum(w, wbar)
    mu = o.sum(axis=-1, keepdims=True)
    u0 = stream.random((w.shape[0], m))
    uc = stream.random((w.shape[0], m))
    ua = stream.random((w.shape[0], m))
    ub = stream.random((w.shape[0], m))
    same = u0 < mu
    # bitwise-equal rows must coincide with probability one, not 1 - eps
    same |= np.all(w == wbar, axis=-1)[:, None]
    safe_mu = np.where(mu > 0, mu, 1.0)
    a_ov = _rowwise_categorical(o / safe_mu, uc)
    resid = np.maximum(w - o, 0.0)
    resid_bar = np.maximum(wbar - o, 0.0)
    denom = np.where(mu < 1, 1.0 - mu, 1.0)
    a_res = _rowwise_categorical(resid / denom, ua)
    ab_res = _rowwise_categorical(resid_bar / denom, ua if common_residuals else ub)
    a = np.where(same, a_ov, a_res)
    abar = np.where(same, a_ov, ab_res)
    return a, abar


def maximal_couple2(stream, w, wbar, common_residuals=False):
    """Single maximally coupled pair from two weight vectors."""
    a, abar = maximal_couple2_many(
        stream, np.asarray(w)[None, :], np.asarray(wbar)[None, :], 1,
        common_residuals=common_residuals,
    )
    return int(a[0, 0]), int(abar[0, 0])


def coupling_pmf(w, wbar):
    """Joint PMF of the maximal coupling with independent residuals.

    Entry (a, b) carries the overlap min(w_a, wbar_a) on the diagonal plus
    the normalized product of residuals; the residual term is zero when the
    overlap mass is one.
    """
    w = np.asarray(w, dtype=float)
    wbar = np.asarray(wbar, dtype=float)
    o = np.minimum(w, wbar)
    mu = o.sum()
    out = np.diag(o).astype(float)
    if mu < 1.0:
        out = out + np.outer(w - o, wbar - o) / (1.0 - mu)
    return out


def _pmf_at(w0, w1, o, mu, a, b):
    """Evaluate the maximal-coupling PMF at index pairs, vectorized.

    w0, w1, o: (B, N); mu: (B, 1); a, b: (B, m) index arrays.
    """
    rows = np.arange(w0.shape[0])[:, None]
    diag = np.where(a == b, o[rows, a], 0.0)
    denom = np.where(mu < 1, 1.0 - mu, 1.0)
    resid = (w0[rows, a] - o[rows, a]) * (w1[rows, b] - o[rows, b]) / denom
    resid = np.where(mu < 1, resid, 0.0)
    return diag + resid


def maximal_couple4_many(stream, w0, wb0, w1, wb1, m, conditional_redraw="coupled"):
    """Four-index coupled resampling draws across a level pair, m per row.

    Draws (a0, a1) from the maximal coupling of the unbarred weight vectors,
    then draws (ab0, ab1) from the barred coupling so that the pair of pairs
    is itself maximally coupled. Three branches per row, keyed on bitwise
    equality of the barred/unbarred weight vectors within each level:

    * both levels identical: the barred pair is a copy, no randomness used;
    * exactly one level identical: the barred index on that level is copied;
      the barred index on the other level is drawn from its conditional law
      given the copy. With conditional_redraw="coupled" (the default) that
      draw is maximally coupled to the realized unbarred index of the same
      level, so the two systems keep contracting on the level that has not
      yet coalesced; with "independent" it is drawn from the conditional law
      without reference to the unbarred index, which leaves the unmet
      level's agreement to chance;
    * neither identical: accept the unbarred pair with probability
      min(1, pmf_bar/pmf), else draw from the residual of the barred
      coupling PMF against the unbarred one.

    All residual draws are exact inverse-CDF samples (no rejection loops,
    whose acceptance rate would vanish as the two laws approach each other).

    Returns (a0, ab0, a1, ab1), each (n_rows, m).
    """
    w0, wb0 = _rows(w0), _rows(wb0)
    w1, wb1 = _rows(w1), _rows(wb1)
    if not (w0.shape == wb0.shape == w1.shape == wb1.shape):
        raise ValueError("weight shape mismatch")
    nrows = w0.shape[0]

    a0, a1 = maximal_couple2_many(stream, w0, w1, m)
    ab0 = a0.copy()
    ab1 = a1.copy()

    eq0 = np.all(w0 == wb0, axis=-1)
    eq1 = np.all(w1 == wb1, axis=-1)

    case2 = eq0 & ~eq1   # copy coarse index, redraw fine
    case3 = ~eq0 & eq1   # copy fine index, redraw coarse
    case4 = ~eq0 & ~eq1

    if conditional_redraw not in ("coupled", "independent"):
        raise ValueError(f"unknown conditional_redraw {conditional_redraw!r}")
    coupled = conditional_redraw == "coupled"
    if case2.any():
        rows = np.where(case2)[0]
        if coupled:
            ab1[rows] = _conditional_redraw(
                stream, wb0[rows], wb1[rows], w1[rows], ab0[rows], a1[rows]
            )
        else:
            ab1[rows] = _conditional_draw(
                stream, wb0[rows], wb1[rows], ab0[rows]
            )
    if case3.any():
        rows = np.where(case3)[0]
        if coupled:
            ab0[rows] = _conditional_redraw(
                stream, wb1[rows], wb0[rows], w0[rows], ab1[rows], a0[rows]
            )
        else:
            ab0[rows] = _conditional_draw(
                stream, wb1[rows], wb0[rows], ab1[rows]
            )
    if case4.any():
        rows = np.where(case4)[0]
        ab0[rows], ab1[rows] = _joint_redraw(
            stream,
            w0[rows], w1[rows], wb0[rows], wb1[rows],
            a0[rows], a1[rows],
        )
    return a0, ab0, a1, ab1


def _cond_pmf(w_given, w_other, a_given):
    """Conditional of the across-level coupling given its copied coordinate.

    For each (row, draw) with copied index a, returns the length-N law of
    the other level's index under the maximal-coupling PMF built from
    (w_given, w_other), conditioned on the copied coordinate equalling a.
    Shapes: w_* (B, N), a_given (B, m); output (B, m, N).
    """
    o = np.minimum(w_given, w_other)
    mu = o.sum(axis=-1, keepdims=True)
    denom = np.where(mu < 1, 1.0 - mu, 1.0)
    rows = np.arange(w_given.shape[0])[:, None]
    r_at = (w_given - o)[rows, a_given]
    out = r_at[..., None] * (w_other - o)[:, None, :] / denom[..., None]
    b_idx, m_idx = np.meshgrid(
        np.arange(a_given.shape[0]), np.arange(a_given.shape[1]), indexing="ij"
    )
    out[b_idx, m_idx, a_given] += o[rows, a_given]
    wg = w_given[rows, a_given]
    return out / np.where(wg > 0, wg, 1.0)[..., None]


def _conditional_draw(stream, w_given, wb_other, a_given):
    """Draw the non-copied barred index from its conditional law alone.

    Samples the barred maximal-coupling PMF built from (w_given, wb_other)
    conditioned on the copied coordinate equalling a_given, without looking
    at the unbarred index of the level being redrawn. Consumes one uniform
    block regardless of the weights.
    """
    q = _cond_pmf(w_given, wb_other, a_given)
    u = stream.random(a_given.shape)
    B, m, n = q.shape
    return _rowwise_categorical(q.reshape(B * m, n), u.reshape(B * m, 1)).reshape(B, m)


def _conditional_redraw(stream, w_given, wb_other, w_other, a_given, a_other):
    """Redraw the non-copied barred index given the copied one.

    Target law: the barred maximal-coupling PMF conditioned on the copied
    coordinate equalling a_given (w_given is the identical weight vector of
    the copied level, wb_other the barred weights of the level being
    redrawn). The draw is maximally coupled to the realized unbarred index
    a_other of the same level, whose conditional law given a_given uses the
    unbarred weights w_other: the copy a_other is kept with probability
    min(1, q(a_other)/p(a_other)) and otherwise an exact inverse-CDF sample
    from the normalized positive part of q - p is taken. Keeping the copy
    whenever possible lets a level whose two systems have not yet coalesced
    keep contracting after the other level has. Consumes two uniform blocks
    regardless of the weights.
    """
    q = _cond_pmf(w_given, wb_other, a_given)
    p = _cond_pmf(w_given, w_other, a_given)
    q_at = np.take_along_axis(q, a_other[..., None], axis=-1)[..., 0]
    p_at = np.take_along_axis(p, a_other[..., None], axis=-1)[..., 0]
    u = stream.random(a_given.shape)
    ratio = np.where(p_at > 0, q_at / np.where(p_at > 0, p_at, 1.0), np.inf)
    keep = u < np.minimum(ratio, 1.0)
    up = stream.random(a_given.shape)
    resid = np.maximum(q - p, 0.0)
    B, m, n = resid.shape
    drawn = _rowwise_categorical(
        resid.reshape(B * m, n), up.reshape(B * m, 1)
    ).reshape(B, m)
    # a residual with no mass means q == p, in which case keep holds a.s.
    empty = resid.sum(axis=-1) <= 0.0
    return np.where(keep | empty, a_other, drawn)


def _joint_redraw(stream, w0, w1, wb0, wb1, a0, a1):
    """Barred pair when neither level has identical weights.

    Accept the unbarred pair with probability min(1, pmf_bar/pmf); on
    rejection, draw the barred pair from the normalized positive part of
    pmf_bar - pmf over the flattened pair space (the exact residual of the
    maximal coupling between the two pair laws). Consumes two uniform
    blocks regardless of the weights.
    """
    o = np.minimum(w0, w1)
    mu = o.sum(axis=-1, keepdims=True)
    ob = np.minimum(wb0, wb1)
    mub = ob.sum(axis=-1, keepdims=True)

    r = _pmf_at(w0, w1, o, mu, a0, a1)
    rb = _pmf_at(wb0, wb1, ob, mub, a0, a1)
    u = stream.random(a0.shape)
    # r > 0 almost surely since (a0, a1) was drawn from it
    keep = u < np.minimum(np.where(r > 0, rb / np.where(r > 0, r, 1.0), 0.0), 1.0)

    up = stream.random(a0.shape)
    n = w0.shape[-1]
    ab0 = a0.copy()
    ab1 = a1.copy()
    # materialize the two pair PMFs in bounded row slices to cap memory
    step = max(1, int(2**22 / (n * n)))
    for lo in range(0, w0.shape[0], step):
        sl = slice(lo, lo + step)
        pair = _pair_pmf(w0[sl], w1[sl], o[sl], mu[sl])
        pair_b = _pair_pmf(wb0[sl], wb1[sl], ob[sl], mub[sl])
        resid = np.maximum(pair_b - pair, 0.0)
        flat = _rowwise_categorical(resid, up[sl])
        ab0[sl] = np.where(keep[sl], ab0[sl], flat // n)
        ab1[sl] = np.where(keep[sl], ab1[sl], flat % n)
    return ab0, ab1


def _pair_pmf(w0, w1, o, mu, dtype=float):
    """Flattened (B, N*N) maximal-coupling PMFs for batched weight rows."""
    B, n = w0.shape
    denom = np.where(mu < 1, 1.0 - mu, 1.0)
    resid0 = w0 - o
    resid1 = w1 - o
    out = resid0[:, :, None] * resid1[:, None, :] / denom[:, :, None]
    out[:, np.arange(n), np.arange(n)] += o
    return out.reshape(B, n * n)


def maximal_couple4(stream, w0, wb0, w1, wb1, conditional_redraw="coupled"):
    """Single four-index coupled draw."""
    a0, ab0, a1, ab1 = maximal_couple4_many(
        stream,
        np.asarray(w0)[None, :], np.asarray(wb0)[None, :],
        np.asarray(w1)[None, :], np.asarray(wb1)[None, :],
        1,
        conditional_redraw=conditional_redraw,
    )
    return int(a0[0, 0]), int(ab0[0, 0]), int(a1[0, 0]), int(ab1[0, 0])


def common_uniform_couple_many(stream, weight_rows, m):
    """Comparator coupling: one uniform inverts every system's CDF.

    weight_rows is a sequence of (n_rows, N) weight arrays; returns a list
    of (n_rows, m) index arrays, all driven by the same uniforms.
    """
    ws = [_rows(w) for w in weight_rows]
    u = stream.random((ws[0].shape[0], m))
    return [_rowwise_categorical(w, u) for w in ws]
