import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polymotion.errors import ConfigError, SamplingError
from polymotion.sampling import (
    SamplerPolicy,
    draw,
    next_token_distribution,
    pairwise_distance_cache,
    sample_next,
    semantic_weights,
)


def exact_reweighted(logits, emb, t_s, t_w):
    """Closed form, written out longhand with Python floats."""
    k = len(emb)
    m = max(logits)
    p = [math.exp((x - m) / t_s) for x in logits]
    z = sum(p)
    p = [v / z for v in p]
    i_star = max(range(k), key=lambda j: (p[j], -j))
    d = [math.dist(emb[i_star], emb[j]) for j in range(k)]
    w = [math.exp(-dj / t_w) for dj in d]
    zw = sum(w)
    w = [v / zw for v in w]
    q = [p[j] * w[j] for j in range(k)]
    mass = sum(p[:k])
    zq = sum(q)
    return np.array([v * mass / zq for v in q] + p[k:])


def test_weights_two_tokens():
    emb = np.array([[0.0, 0.0], [2.0, 0.0]])
    w = semantic_weights(0, emb, 1.0)
    assert np.round(w, 4).tolist() == [0.8808, 0.1192]
    assert np.round(semantic_weights(1, emb, 1.0), 4).tolist() == [0.1192, 0.8808]


def test_weights_identical_rows_uniform():
    w = semantic_weights(2, np.ones((5, 3)), 0.3)
    assert np.allclose(w, 0.2, atol=1e-15)


def test_weights_large_temperature():
    emb = np.random.default_rng(0).normal(size=(6, 4))
    assert np.abs(semantic_weights(0, emb, 1e9) - 1 / 6).max() < 1e-6


def test_weights_bad_temperature():
    with pytest.raises(ConfigError):
        semantic_weights(0, np.eye(3), 0.0)
    with pytest.raises(ConfigError):
        SamplerPolicy("semantic", reweight_temperature=-1)
    with pytest.raises(ConfigError):
        SamplerPolicy("beam")


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000), st.floats(0.05, 20))
def test_weights_properties(k, seed, t):
    emb = np.random.default_rng(seed).normal(size=(k, 3))
    d = pairwise_distance_cache(emb)
    for i in range(k):
        w = semantic_weights(i, emb, t)
        assert abs(w.sum() - 1) < 1e-12
        assert (w[i] >= w).all()
        order = np.argsort(d[i], kind="stable")
        assert (np.diff(w[order]) <= 1e-15).all()


def test_distance_cache_oracle():
    emb = np.random.default_rng(5).normal(size=(32, 6))
    d = pairwise_distance_cache(emb)
    for i in range(32):
        assert np.allclose(d[i], np.linalg.norm(emb - emb[i], axis=1), rtol=0, atol=1e-12)
    assert not np.diag(d).any()
    assert np.abs(d - d.T).max() <= 1e-12
    assert pairwise_distance_cache(emb) is d
    emb2 = emb.copy()
    emb2[0, 0] += 1
    assert pairwise_distance_cache(emb2) is not d


def test_greedy():
    pol = SamplerPolicy("greedy")
    assert sample_next([1.0, 3.0, 2.0], pol) == 1


def test_all_masked_raises():
    for kind in ("greedy", "multinomial", "semantic"):
        with pytest.raises(SamplingError):
            sample_next([-np.inf] * 4, SamplerPolicy(kind), np.eye(4))


def test_semantic_boosts_argmax_on_dominant_logits():
    emb = np.random.default_rng(1).normal(size=(8, 4))
    logits = np.array([6.0, 0.5, 0.1, -1, 0.3, 0.0, -0.2, 0.4])
    pm = next_token_distribution(logits, SamplerPolicy("multinomial"), emb)
    ps = next_token_distribution(logits, SamplerPolicy("semantic", reweight_temperature=0.5), emb)
    assert ps[0] >= pm[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5), st.integers(0, 3))
def test_distribution_matches_closed_form(seed, t_w, n_special):
    r = np.random.default_rng(seed)
    emb = r.normal(size=(8, 3))
    logits = r.normal(size=8 + n_special) * 2
    got = next_token_distribution(logits, SamplerPolicy("semantic", reweight_temperature=t_w), emb)
    want = exact_reweighted(logits.tolist(), emb.tolist(), 1.0, t_w)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-14)
    # specials keep their softmax probability
    base = next_token_distribution(logits, SamplerPolicy("multinomial"), emb)
    assert np.allclose(got[8:], base[8:], rtol=1e-12)


def test_empirical_frequencies_within_3_sigma():
    r = np.random.default_rng(7)
    emb = r.normal(size=(8, 3))
    logits = r.normal(size=8)
    pol = SamplerPolicy("semantic", reweight_temperature=0.8)
    p = exact_reweighted(logits.tolist(), emb.tolist(), 1.0, 0.8)
    rng = np.random.default_rng(11)
    n = 100_000
    counts = np.bincount([sample_next(logits, pol, emb, rng) for _ in range(n)], minlength=8)
    sigma = np.sqrt(n * p * (1 - p))
    assert (np.abs(counts - n * p) <= 3 * sigma).all()


def test_small_reweight_temperature_is_greedy():
    r = np.random.default_rng(3)
    for _ in range(20):
        emb = r.normal(size=(10, 4))
        logits = r.normal(size=10)
        p = next_token_distribution(logits, SamplerPolicy("semantic", reweight_temperature=1e-6), emb)
        assert p[np.argmax(logits)] > 1 - 1e-12


def test_masked_tokens_stay_dead():
    r = np.random.default_rng(9)
    emb = r.normal(size=(6, 2))
    logits = r.normal(size=9)
    logits[[1, 4, 6, 8]] = -np.inf
    p = next_token_distribution(logits, SamplerPolicy("semantic", reweight_temperature=3.0), emb)
    assert (p[[1, 4, 6, 8]] == 0).all()
    rng = np.random.default_rng(0)
    for _ in range(2000):
        assert sample_next(logits, SamplerPolicy("semantic", reweight_temperature=3.0), emb, rng) not in (1, 4, 6, 8)


def test_draw_edge():
    p = np.array([0.0, 0.5, 0.5, 0.0])

    class Top:
        def random(self):
            return np.nextafter(1.0, 0.0)

    assert draw(p, Top()) == 2


def test_multinomial_temperature():
    logits = np.array([0.0, -2.0])
    p = next_token_distribution(logits, SamplerPolicy("multinomial", temperature=2.0))
    assert np.allclose(p, [1 / (1 + math.exp(-1)), math.exp(-1) / (1 + math.exp(-1))])


def test_seeded_sampling_deterministic():
    emb = np.random.default_rng(0).normal(size=(8, 2))
    logits = np.zeros(11)
    a = [sample_next(logits, SamplerPolicy("semantic"), emb, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_next(logits, SamplerPolicy("semantic"), emb, np.random.default_rng(5)) for _ in range(3)]
    assert a == b
