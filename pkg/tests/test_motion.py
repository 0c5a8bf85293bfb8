import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from polymotion.errors import ConfigError, InputError, MotionFormatError, MotionValidationError
from polymotion.motion import (
    MotionClip,
    SynthSpec,
    from_delta,
    read_dataset,
    read_motion,
    synth_dataset,
    to_delta,
    write_dataset,
    write_motion,
)


def _pad_rot(traj, extra=6):
    traj = np.asarray(traj, dtype=float)
    rot = np.arange(traj.shape[0] * extra, dtype=float).reshape(traj.shape[0], extra) * 0.1
    return np.concatenate([traj, rot], axis=1)


def test_delta_example():
    x = _pad_rot([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    d = to_delta(x)
    assert d[:, :3].tolist() == [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
    assert np.array_equal(d[:, 3:], x[:, 3:])


def test_constant_trajectory_zero_deltas():
    x = _pad_rot(np.tile([2.0, 1.0, -4.0], (10, 1)))
    assert not to_delta(x)[:, :3].any()


def test_from_delta_examples():
    z = np.zeros((4, 6))
    assert np.array_equal(from_delta(z, [5, 0, 0])[:, :3], np.tile([5.0, 0, 0], (4, 1)))
    d = _pad_rot([[0, 0, 0], [1, 1, 0]])
    assert from_delta(d)[:, :3].tolist() == [[0, 0, 0], [1, 1, 0]]


def test_delta_errors():
    with pytest.raises(InputError):
        to_delta(np.zeros((0, 6)))
    with pytest.raises(InputError):
        from_delta(np.zeros((3, 2)))
    with pytest.raises(InputError):
        from_delta(np.zeros((3, 6)), origin=[0, 0])


def test_random_round_trip_64():
    x = np.random.default_rng(0).normal(size=(64, 66)) * 3
    y = from_delta(to_delta(x), x[0, :3])
    assert np.abs(y - x).max() < 1e-12


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 200), st.integers(3, 9)), elements=finite))
def test_round_trip_property(x):
    y = from_delta(to_delta(x), x[0, :3])
    assert np.abs(y - x).max() <= 1e-9 * max(1.0, np.abs(x).max())
    assert not to_delta(x)[0, :3].any()


# dyadic grid: every difference and offset below is exactly representable
dyadic = st.integers(-2 ** 20, 2 ** 20).map(lambda k: k / 1024.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 50), st.just(6)), elements=dyadic),
       st.tuples(dyadic, dyadic, dyadic))
def test_translation_invariance_exact(x, off):
    shifted = x.copy()
    shifted[:, :3] += np.asarray(off)
    assert np.array_equal(to_delta(shifted), to_delta(x))


def test_text_forward_fast_moves_forward():
    spec = SynthSpec("text", size=1, vocabulary=["walk forward fast"])
    clip = synth_dataset(spec, 3)[0].clip
    d = to_delta(clip.torso)[1:, :3].mean(axis=0)
    assert d[2] > 0
    assert abs(d[0]) < d[2]


def test_text_directions_and_speeds():
    vocab = ["run backward slow", "run backward fast", "sneak left normal", "sneak right normal"]
    clips = [s.clip for s in synth_dataset(SynthSpec("text", size=4, vocabulary=vocab), 0)]
    v = [to_delta(c.torso)[1:, :3].mean(axis=0) for c in clips]
    assert v[0][2] < 0 and v[1][2] < v[0][2]
    assert v[2][0] > 0 > v[3][0]


def test_determinism():
    spec = SynthSpec("music", size=6, length_range=(40, 80))
    a, b = synth_dataset(spec, 11), synth_dataset(spec, 11)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.clip.torso, sb.clip.torso)
        assert np.array_equal(sa.condition["signal"], sb.condition["signal"])
        assert sa.split == sb.split
    c = synth_dataset(spec, 12)
    assert not np.array_equal(a[0].clip.torso, c[0].clip.torso)


def test_lengths_and_labels_balanced():
    spec = SynthSpec("speech", size=16, length_range=(40, 80))
    data = synth_dataset(spec, 0)
    assert all(40 <= s.clip.n_frames <= 80 and s.clip.n_frames % 4 == 0 for s in data)
    ids = [s.condition["speaker"] for s in data]
    assert np.bincount(ids).tolist() == [4, 4, 4, 4]
    assert {s.split for s in data} == {"train", "test"}


def test_unknown_modality():
    with pytest.raises(ConfigError):
        SynthSpec("video")
    with pytest.raises(ConfigError):
        SynthSpec("music", vocabulary=["polka"])


def _velocity_spectrum(clip):
    v = np.linalg.norm(np.diff(clip.torso[:, 3:], axis=0), axis=1)
    s = np.abs(np.fft.rfft(v - v.mean()))
    return s / np.linalg.norm(s)


def test_genres_separable_by_nearest_centroid():
    data = synth_dataset(SynthSpec("music", size=96, length_range=(128, 128)), 5)
    x = np.array([_velocity_spectrum(s.clip) for s in data])
    y = np.array([s.condition["genre"] for s in data])
    train = np.array([s.split == "train" for s in data])
    centroids = {g: x[train & (y == g)].mean(axis=0) for g in np.unique(y)}
    pred = [min(centroids, key=lambda g: np.linalg.norm(f - centroids[g])) for f in x[~train]]
    assert np.mean(np.array(pred) == y[~train]) >= 0.9


def test_music_velocity_minima_at_beats():
    spec = SynthSpec("music", size=4, length_range=(160, 160), noise_scale=0.0)
    for s in synth_dataset(spec, 2):
        fps = s.clip.fps
        rot = s.clip.torso[:, 3:]
        speed = np.linalg.norm(np.gradient(rot, axis=0), axis=1)
        for b in s.condition["beats"]:
            f = int(round(b * fps))
            if 2 <= f < len(speed) - 2:
                window = speed[f - 2:f + 3]
                assert speed[f] <= np.median(speed) and window.argmin() in (1, 2, 3)


def test_motion_file_round_trip(tmp_path):
    clip = synth_dataset(SynthSpec("speech", size=1), 0)[0].clip
    path = write_motion(clip, tmp_path / "a.mot")
    back = read_motion(path)
    assert back.fps == clip.fps
    for name in ("torso", "left_hand", "right_hand"):
        assert np.array_equal(getattr(back, name), getattr(clip, name))
    assert back.labels == clip.labels


def test_motion_file_keeps_double_precision(tmp_path):
    r = np.random.default_rng(0)
    clip = MotionClip(30, r.normal(size=(5, 9)), r.normal(size=(5, 2)), r.normal(size=(5, 2)))
    back = read_motion(write_motion(clip, tmp_path / "b.mot"))
    assert np.array_equal(back.torso, clip.torso)


def test_truncated_file(tmp_path):
    clip = synth_dataset(SynthSpec("text", size=1), 0)[0].clip
    path = write_motion(clip, tmp_path / "t.mot")
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(MotionFormatError, match="payload"):
        read_motion(path)
    path.write_bytes(raw[:10])
    with pytest.raises(MotionFormatError, match="header"):
        read_motion(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MotionFormatError, match="magic"):
        read_motion(path)


def test_fps_zero_and_channel_mismatch(tmp_path):
    import struct

    clip = MotionClip(20, np.zeros((2, 6)), np.zeros((2, 2)), np.zeros((2, 2)))
    path = write_motion(clip, tmp_path / "z.mot")
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 8, 0)
    path.write_bytes(bytes(raw))
    with pytest.raises(MotionValidationError):
        read_motion(path)
    raw = bytearray(write_motion(clip, path).read_bytes())
    struct.pack_into("<I", raw, 24, 3)
    path.write_bytes(bytes(raw))
    with pytest.raises(MotionFormatError, match="right_hand"):
        read_motion(path)


def test_clip_validation():
    with pytest.raises(MotionValidationError):
        MotionClip(0, np.zeros((2, 6)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(MotionValidationError, match="frame count"):
        MotionClip(20, np.zeros((3, 6)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(MotionValidationError):
        MotionClip(20, np.full((2, 6), np.nan), np.zeros((2, 2)), np.zeros((2, 2)))


def test_dataset_dir_round_trip(tmp_path):
    data = synth_dataset(SynthSpec("music", size=5, length_range=(40, 40)), 0)
    write_dataset(data, tmp_path)
    back = read_dataset(tmp_path)
    assert [s.id for s in back] == [s.id for s in data]
    for a, b in zip(data, back):
        assert np.array_equal(a.clip.torso, b.clip.torso)
        assert np.array_equal(a.condition["signal"], b.condition["signal"])
        assert np.allclose(a.condition["beats"], b.condition["beats"])
    assert all(s.split == "test" for s in read_dataset(tmp_path, split="test"))
