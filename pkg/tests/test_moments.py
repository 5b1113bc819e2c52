import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from crcbounds.moments import (
    CellPolynomial,
    build_g_highest,
    build_g_pairwise,
    build_moments,
    poisson_mean,
    poisson_variance,
    touchard,
)
from crcbounds.restrictions import HighestOrder, Pairwise, ident_interval


def brute_force(poly: CellPolynomial, means, cutoff=80):
    """Mean and variance by summing the product-Poisson pmf over a box (3 cells)."""
    grids = np.meshgrid(*[np.arange(cutoff)] * 3, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1).astype(float)
    w = np.prod([stats.poisson.pmf(pts[:, i], means[i]) for i in range(3)], axis=0)
    v = poly.evaluate(pts)
    mu = float(w @ v)
    return mu, float(w @ (v - mu) ** 2)


def random_poly(rng, c=3, max_degree=4, n_terms=4):
    terms = {}
    for _ in range(n_terms):
        e = [0] * c
        for _ in range(rng.integers(0, max_degree + 1)):
            e[rng.integers(c)] += 1
        terms[tuple(e)] = terms.get(tuple(e), 0.0) + rng.normal()
    return CellPolynomial(c, terms)


def test_touchard_low_orders():
    m = 3.7
    t = touchard(m, 4)
    assert t[0] == 1 and t[1] == pytest.approx(m)
    assert t[2] == pytest.approx(m**2 + m)
    assert t[3] == pytest.approx(m**3 + 3 * m**2 + m)
    assert t[4] == pytest.approx(m**4 + 6 * m**3 + 7 * m**2 + m)


def test_exact_against_truncated_summation():
    rng = np.random.default_rng(11)
    for _ in range(15):
        poly = random_poly(rng)
        means = rng.uniform(0.5, 8.0, 3)
        mu, var = brute_force(poly, means)
        assert poisson_mean(poly, means) == pytest.approx(mu, rel=1e-6, abs=1e-9)
        assert poisson_variance(poly, means) == pytest.approx(var, rel=1e-6, abs=1e-9)


def test_vectorised_means_match_loop():
    rng = np.random.default_rng(3)
    poly = random_poly(rng, c=7, n_terms=6)
    means = rng.uniform(1, 50, size=(5, 7))
    batch = poisson_mean(poly, means)
    assert np.allclose(batch, [poisson_mean(poly, m) for m in means])


def test_polynomial_algebra():
    c = 3
    a = CellPolynomial.cell(c, 1)
    b = CellPolynomial.cell(c, 2)
    p = (a + b) * (a - b) + 2
    x = np.array([3.0, 5.0, 7.0])
    assert p.evaluate(x) == pytest.approx(9 - 25 + 2)
    assert p.degree == 2
    assert (3 - a).evaluate(x) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        CellPolynomial.cell(c, 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1, 200), min_size=7, max_size=7), st.floats(0, 1.5), st.floats(300, 5000))
def test_highest_mean_matches_closed_form(m, gamma, M):
    m = np.array(m)
    spec = build_g_highest(gamma, 3)
    odd = m[[0, 1, 3, 6]].prod()
    even = m[[2, 4, 5]].prod()
    want = [odd + math.exp(gamma) * even * (m.sum() - M), -odd - math.exp(-gamma) * even * (m.sum() - M)]
    assert np.allclose(spec.mean(m, M), want, rtol=1e-9, atol=1e-6 * abs(odd))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1, 200), min_size=7, max_size=7), st.floats(0.1, 1.0), st.floats(1.01, 6), st.floats(300, 5000))
def test_pairwise_mean_matches_odds_ratio_form(m, eta, xi, M):
    m = np.array(m)
    spec = Pairwise.all_pairs(3, eta, xi)
    mom = build_g_pairwise(spec, 3).mean(m, M)
    from crcbounds.restrictions import pair_means
    for j, c in enumerate(spec.constraints):
        m11, m10, m01, m00 = pair_means(m, 3, c.r, c.t)
        m0 = M - m.sum()
        # E g_j1 = m11 (m00 + m0) - xi m10 m01, E g_j2 = eta m10 m01 - m11 (m00 + m0)
        assert mom[2 * j] == pytest.approx(m11 * (m00 + m0) - xi * m10 * m01, rel=1e-9, abs=1e-6 * m11 * M)
        assert mom[2 * j + 1] == pytest.approx(eta * m10 * m01 - m11 * (m00 + m0), rel=1e-9, abs=1e-6 * m11 * M)


def test_monte_carlo_agreement(pwid_means):
    rng = np.random.default_rng(5)
    N = rng.poisson(pwid_means, size=(200_000, 7)).astype(float)
    for spec in (HighestOrder(0.3), Pairwise.agnostic(3, 3)):
        mom = build_moments(spec, 3)
        for M in (400.0, 900.0):
            vals = np.stack([c.evaluate(N, M) for c in mom.components], axis=-1)
            se = vals.std(axis=0) / math.sqrt(len(N))
            assert np.all(np.abs(vals.mean(axis=0) - mom.mean(pwid_means, M)) <= 4 * se)
            v_mc = vals.var(axis=0)
            assert np.allclose(mom.variance(pwid_means, M), v_mc, rtol=0.03)


def test_sign_flips_at_ident_endpoints(pwid_means):
    for spec in (HighestOrder(0.4), Pairwise.agnostic(3, 3)):
        iv = ident_interval(pwid_means, spec)
        mom = build_moments(spec, 3)
        for M, inside in ((iv.lo - 1, False), (iv.lo + 1, True), (iv.hi - 1, True), (iv.hi + 1, False)):
            assert bool(np.max(mom.mean(pwid_means, M)) <= 0) == inside


def test_parts_consistency(pwid_means):
    mom = build_moments(Pairwise.positive(3, 10), 3)
    parts = mom.parts(pwid_means)
    for M in (310.0, 777.0):
        assert np.allclose(parts.mean(M), mom.mean(pwid_means, M))
        assert np.all(parts.min_variance() <= parts.variance(M) + 1e-6)


def test_monte_carlo_fallback_for_large_k():
    k = 6
    means = np.full(2**k - 1, 5.0)
    spec = build_g_highest(0.2, k)
    parts = spec.parts(means, mc_draws=20_000, rng=1)
    assert parts.mc_se is not None
    assert parts.e0.shape == (2,)
