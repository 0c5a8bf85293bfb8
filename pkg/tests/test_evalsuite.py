import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import sqrtm

from polymotion.conditions import SpeechEncoder, TextEncoder
from polymotion.errors import ConfigError, DimensionError, InputError, VocabularyError
from polymotion.evalsuite import (
    AlignConfig,
    AlignmentModel,
    FeatureExtractor,
    IdConfig,
    beat_alignment,
    beat_alignment_from_times,
    diversity,
    fid,
    id_consistency_scores,
    info_nce,
    multimodality,
    part_array,
    r_precision,
    retrieval_ranks,
    segments,
    train_alignment_model,
    train_id_model,
)
from polymotion.motion import MotionClip, SynthSpec, synth_dataset
from polymotion.seqgen import PriorConfig


def scipy_fid(a, b):
    """Textbook formula with scipy's general matrix square root."""
    m1, m2 = a.mean(0), b.mean(0)
    c1, c2 = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    s = sqrtm(c1 @ c2).real
    return float(((m1 - m2) ** 2).sum() + np.trace(c1 + c2 - 2 * s))


def test_fid_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(200, 6))
    assert abs(fid(x, x)) < 1e-6


def test_fid_gaussian_offset():
    rng = np.random.default_rng(1)
    delta = np.array([0.6, -0.3, 0.2, 0.0])
    a = rng.normal(size=(10_000, 4))
    b = rng.normal(size=(10_000, 4)) + delta
    assert abs(fid(a, b) - delta @ delta) / (delta @ delta) < 0.05


def test_fid_matches_scipy_oracle():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
    b = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5)) + 1.0
    assert np.isclose(fid(a, b), scipy_fid(a, b), rtol=1e-6)


def test_fid_ordering():
    rng = np.random.default_rng(3)
    real = rng.normal(size=(400, 4)) @ np.diag([1, 2, 3, 4])
    noise = rng.uniform(-5, 5, size=(200, 4))
    assert fid(real[:200], real[200:]) < fid(real[:200], noise)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 40), d=st.integers(1, 6))
def test_fid_nonnegative_and_symmetric(seed, n, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(n + 3, d)) * 2
    f1, f2 = fid(a, b), fid(b, a)
    assert f1 >= 0 and abs(f1 - f2) <= 1e-8 * max(1.0, f1)


def test_fid_errors_and_shrinkage():
    with pytest.raises(DimensionError):
        fid(np.zeros((5, 2)), np.zeros((5, 3)))
    rng = np.random.default_rng(4)
    small = fid(rng.normal(size=(4, 10)), rng.normal(size=(4, 10)))
    assert np.isfinite(small) and small >= 0


def test_diversity_cases():
    assert diversity(np.ones((10, 3))) == 0.0
    a = np.zeros((5, 2))
    b = np.full((5, 2), [3.0, 4.0])
    # a permuted-pair construction that is always cross-cluster
    x = np.concatenate([a, b])
    i, j = np.arange(5), np.arange(5, 10)
    assert np.isclose(np.linalg.norm(x[i] - x[j], axis=1).mean(), 5.0)
    rng = np.random.default_rng(0)
    f = rng.normal(size=(12, 3))
    brute = np.mean([np.linalg.norm(f[p] - f[q]) for p, q in itertools.combinations(range(12), 2)])
    assert np.isclose(diversity(f), brute, atol=1e-12)


def test_diversity_permutation_invariant_with_ids():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(20, 4))
    ids = [f"s{k:02d}" for k in range(20)]
    perm = rng.permutation(20)
    a = diversity(f, n_pairs=50, seed=3, ids=ids)
    b = diversity(f[perm], n_pairs=50, seed=3, ids=[ids[k] for k in perm])
    assert a == b


def test_multimodality_skips_small_groups():
    groups = {"a": np.zeros((3, 2)), "b": np.array([[0.0, 0.0], [0.0, 2.0]]), "c": np.ones((1, 2))}
    with pytest.warns(UserWarning):
        mm = multimodality(groups)
    assert np.isclose(mm, 1.0)
    with pytest.raises(InputError), pytest.warns(UserWarning):
        multimodality({"c": np.ones((1, 2))})


def test_r_precision_perfect_and_errors():
    z = np.eye(40)
    res = r_precision(z, z, pool=32)
    assert res == {1: 1.0, 2: 1.0, 3: 1.0}
    with pytest.raises(ConfigError):
        r_precision(z[:10], z[:10], pool=32)
    with pytest.raises(ConfigError):
        r_precision(z, z, pool=2, top_k=3)


def test_r_precision_chance_band():
    rng = np.random.default_rng(7)
    n, pool = 2000, 32
    res = r_precision(rng.normal(size=(n, 8)), rng.normal(size=(n, 8)), pool=pool, top_k=1)
    p = 1 / pool
    sd = np.sqrt(p * (1 - p) / n)
    assert abs(res[1] - p) <= 2.576 * sd


def test_retrieval_ranks_match_r_precision_and_ties():
    rng = np.random.default_rng(2)
    zm, zt = rng.normal(size=(60, 6)), rng.normal(size=(60, 6))
    ranks = retrieval_ranks(zm, zt, pool=8, seed=4)
    assert ranks.min() >= 1 and ranks.max() <= 8
    res = r_precision(zm, zt, pool=8, seed=4)
    assert res == {k: float(np.mean(ranks <= k)) for k in (1, 2, 3)}
    # every candidate ties with the true text, so it ranks last
    same = np.ones((10, 3))
    np.testing.assert_array_equal(retrieval_ranks(same, same, pool=4), 4)


def test_info_nce_closed_form():
    b, tau = 6, 0.07
    z = np.eye(b)
    expected = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + (b - 1)))
    assert np.isclose(float(info_nce(z, z, tau).data), expected, rtol=1e-10)
    assert float(info_nce(z, z, 1e-3).data) < 1e-12
    with pytest.raises(ConfigError):
        info_nce(z, z, 0.0)


def test_id_consistency_exact_cases():
    centers = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    res = id_consistency_scores(centers, [0, 1, 2], centers)
    assert res == {"acc": 1.0, "i2i": 0.0}
    mid = id_consistency_scores(np.array([[1.0, 0.0]]), [0], centers[:2])
    assert np.isclose(mid["i2i"], 1.0)
    with pytest.raises(VocabularyError):
        id_consistency_scores(centers, [0, 1, 3], centers)
    with pytest.raises(ConfigError):
        id_consistency_scores(centers[:1], [0], centers[:1])


def test_id_consistency_brute_force():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(4, 3))
    z = rng.normal(size=(50, 3))
    ids = rng.integers(0, 4, size=50)
    ratios, hits = [], []
    for v, i in zip(z, ids):
        d = [np.sqrt(((v - c) ** 2).sum()) for c in centers]
        ratios.append(d[i] / (sum(d[j] for j in range(4) if j != i) / 3))
        hits.append(int(np.argmin(d)) == i)
    res = id_consistency_scores(z, ids, centers)
    assert np.isclose(res["i2i"], np.mean(ratios), atol=1e-12)
    assert res["acc"] == np.mean(hits)
    shifted = id_consistency_scores(z + 7.5, ids, centers + 7.5)
    assert np.isclose(shifted["i2i"], res["i2i"], atol=1e-12)


def beat_clip(n=100, period=10, first=5, fps=20):
    f = np.arange(n)
    rot = np.cos(np.pi * (f - first) / period)[:, None] * np.ones((1, 6))
    torso = np.concatenate([np.zeros((n, 3)), rot], axis=1)
    return MotionClip(fps, torso, np.zeros((n, 2)), np.zeros((n, 2)))


def test_bas_exact_and_tail():
    clip = beat_clip()
    beats = np.arange(5, 95, 10) / 20.0
    assert np.isclose(beat_alignment(clip, beats), 1.0)
    assert beat_alignment_from_times([0.0], [0.6 + 1.0], sigma=0.1) < 1e-6
    assert beat_alignment_from_times([], [1.0]) == 0.0
    with pytest.raises(InputError):
        beat_alignment_from_times([0.0], [])
    with pytest.raises(InputError):
        beat_alignment(MotionClip(20, np.zeros((1, 9)), np.zeros((1, 2)), np.zeros((1, 2))), [0.1])


def test_bas_generator_beats_shuffled():
    data = synth_dataset(SynthSpec("music", size=4, length_range=(120, 120)), 0)
    rng = np.random.default_rng(0)
    for s in data:
        beats = s.condition["beats"]
        real = beat_alignment(s.clip, beats)
        perm = rng.permutation(s.clip.n_frames)
        shuffled = MotionClip(s.clip.fps, s.clip.torso[perm], s.clip.left_hand, s.clip.right_hand)
        assert real > beat_alignment(shuffled, beats)


def test_segments():
    a = np.arange(250)
    segs = segments(a, fps=20, seconds=5)
    assert [len(s) for s in segs] == [100, 100]
    assert len(segments(a[:30], fps=20, seconds=5, factor=4)[0]) == 28


@pytest.fixture(scope="module")
def text_data():
    data = synth_dataset(SynthSpec("text", size=48, length_range=(32, 48)), 0)
    fx = FeatureExtractor.train([s.clip for s in data], "torso",
                                PriorConfig(dim=16, width=16, steps=150, window=32))
    return data, fx


def test_feature_extractor(text_data):
    data, fx = text_data
    f = fx([s.clip for s in data[:5]])
    assert f.shape == (5, 16) and np.array_equal(f, fx([s.clip for s in data[:5]]))
    assert len(fx.hash) == 16
    with pytest.raises(ConfigError):
        part_array(data[0].clip, "hands")


def test_alignment_training_and_round_trip(text_data, tmp_path):
    data, fx = text_data
    clips, payloads = [s.clip for s in data], [s.condition for s in data]
    before = fx.prior.state_dict()
    model, trace = train_alignment_model(clips, payloads, fx.prior, TextEncoder(dim=16),
                                         AlignConfig(dim=16, steps=120, batch=12, log_every=40))
    assert trace[-1][1] < trace[0][1]
    # the caller's prior is not modified by fine-tuning
    assert all(np.array_equal(before[k], v) for k, v in fx.prior.state_dict().items())
    zm, zt = model.embed_motion(clips), model.embed_condition(payloads)
    assert np.allclose(np.linalg.norm(zm, axis=1), 1.0)
    path = model.save(tmp_path / "align.ckpt")
    loaded, _ = AlignmentModel.load(path)
    assert np.array_equal(loaded.embed_motion(clips), zm)
    assert np.array_equal(loaded.embed_condition(payloads), zt)


def test_untrained_alignment_near_chance(text_data):
    data, fx = text_data
    model, _ = train_alignment_model([s.clip for s in data], [s.condition for s in data], fx.prior,
                                     TextEncoder(dim=16), AlignConfig(dim=16, steps=0))
    res = r_precision(model.embed_motion([s.clip for s in data]),
                      model.embed_condition([s.condition for s in data]), pool=8, top_k=1)
    assert res[1] < 0.6


def test_id_model_learns_speakers():
    data = synth_dataset(SynthSpec("speech", size=24, length_range=(48, 48)), 0)
    fx = FeatureExtractor.train([s.clip for s in data], "body", PriorConfig(dim=16, width=16, steps=150))
    ids = [s.condition["speaker"] for s in data]
    model, _ = train_id_model([s.clip for s in data], ids, [s.condition for s in data], fx.prior,
                              SpeechEncoder(), 4, IdConfig(steps=200))
    res = model.score([s.clip for s in data], ids)
    assert res["acc"] > 0.5 and res["i2i"] < 1.0
    with pytest.raises(VocabularyError):
        model.score([data[0].clip], [4])
