"""Motion clips, the trajectory-delta transform, synthetic data and file I/O.

Axis convention for the root trajectory: x lateral (+x is the performer's
left), y up, z forward.  Rotation channels are per-joint rotation vectors
in radians; hand channels are PCA coefficients.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, MotionFormatError, MotionValidationError

TRAJ_DIMS = 3


@dataclass
class MotionClip:
    fps: int
    torso: np.ndarray
    left_hand: np.ndarray
    right_hand: np.ndarray
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.torso = np.asarray(self.torso, dtype=np.float64)
        self.left_hand = np.asarray(self.left_hand, dtype=np.float64)
        self.right_hand = np.asarray(self.right_hand, dtype=np.float64)
        if int(self.fps) <= 0:
            raise MotionValidationError(f"fps must be positive, got {self.fps}")
        self.fps = int(self.fps)
        for name in ("torso", "left_hand", "right_hand"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise MotionValidationError(f"{name} must be a (T, C) matrix, got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise MotionValidationError(f"{name} contains non-finite values")
        n = {self.torso.shape[0], self.left_hand.shape[0], self.right_hand.shape[0]}
        if len(n) != 1:
            raise MotionValidationError(
                f"parts disagree on frame count: torso {self.torso.shape[0]}, "
                f"left_hand {self.left_hand.shape[0]}, right_hand {self.right_hand.shape[0]}"
            )
        if self.torso.shape[1] < TRAJ_DIMS:
            raise MotionValidationError("torso needs at least the 3 trajectory channels")

    @property
    def n_frames(self):
        return self.torso.shape[0]

    @property
    def duration(self):
        return self.n_frames / self.fps

    def part(self, name):
        return {"torso": self.torso, "lhand": self.left_hand, "rhand": self.right_hand}[name]

    def crop(self, start, stop):
        return MotionClip(self.fps, self.torso[start:stop], self.left_hand[start:stop],
                          self.right_hand[start:stop], dict(self.labels))


# ---------------------------------------------------------------------------
# trajectory delta representation


def to_delta(torso):
    """Replace the root trajectory by per-frame displacements.

    The first frame's displacement is exactly zero; rotation channels pass
    through untouched.
    """
    torso = np.asarray(torso, dtype=np.float64)
    if torso.ndim != 2 or torso.shape[0] == 0:
        raise InputError(f"to_delta needs a non-empty (T, C) sequence, got shape {torso.shape}")
    out = torso.copy()
    out[0, :TRAJ_DIMS] = 0.0
    out[1:, :TRAJ_DIMS] = torso[1:, :TRAJ_DIMS] - torso[:-1, :TRAJ_DIMS]
    return out


def from_delta(delta, origin=(0.0, 0.0, 0.0)):
    """Inverse of :func:`to_delta` given the first-frame root position."""
    delta = np.asarray(delta, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if delta.ndim != 2 or delta.shape[1] < TRAJ_DIMS:
        raise InputError(f"from_delta needs a (T, C>=3) sequence, got shape {delta.shape}")
    if origin.shape != (TRAJ_DIMS,):
        raise InputError(f"origin must be a 3-vector, got shape {origin.shape}")
    out = delta.copy()
    out[:, :TRAJ_DIMS] = np.cumsum(delta[:, :TRAJ_DIMS], axis=0) + origin
    return out


# ---------------------------------------------------------------------------
# motion file format
#
#   header  <4sHBBIIIII: magic "MOTN", version, float width (4 or 8),
#           reserved, fps, frames, torso/left/right channel counts
#   payload frames row-major, each frame = torso | left | right channels
#   sidecar <file>.json with the labels, when any

MAGIC = b"MOTN"
FILE_VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIII")


def write_motion(clip, path):
    path = Path(path)
    frames = np.concatenate([clip.torso, clip.left_hand, clip.right_hand], axis=1)
    as32 = frames.astype(np.float32)
    width = 4 if np.array_equal(as32.astype(np.float64), frames) else 8
    payload = (as32 if width == 4 else frames).astype("<f4" if width == 4 else "<f8")
    header = _HEADER.pack(MAGIC, FILE_VERSION, width, 0, clip.fps, frames.shape[0],
                          clip.torso.shape[1], clip.left_hand.shape[1], clip.right_hand.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    sidecar = path.with_name(path.name + ".json")
    if clip.labels:
        sidecar.write_text(json.dumps(clip.labels, sort_keys=True, default=_json_default))
    elif sidecar.exists():
        sidecar.unlink()
    return path


def read_motion(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise MotionFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, width, _, fps, n, ct, cl, cr = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MotionFormatError(f"{path}: bad magic {magic!r}")
    if version != FILE_VERSION:
        raise MotionFormatError(f"{path}: unsupported version {version}")
    if width not in (4, 8):
        raise MotionFormatError(f"{path}: invalid float width {width}")
    if fps == 0:
        raise MotionValidationError(f"{path}: fps must be positive")
    if cl != cr:
        raise MotionFormatError(f"{path}: right_hand channel count {cr} != left_hand {cl}")
    if ct < TRAJ_DIMS:
        raise MotionFormatError(f"{path}: torso channel count {ct} < 3")
    channels = ct + cl + cr
    expected = n * channels * width
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise MotionFormatError(
            f"{path}: payload has {len(body)} bytes but frames={n} x channels={channels} "
            f"x width={width} needs {expected}"
        )
    frames = np.frombuffer(body, dtype="<f4" if width == 4 else "<f8").astype(np.float64)
    frames = frames.reshape(n, channels)
    sidecar = path.with_name(path.name + ".json")
    labels = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return MotionClip(fps, frames[:, :ct], frames[:, ct:ct + cl], frames[:, ct + cl:], labels)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(type(obj))


# ---------------------------------------------------------------------------
# synthetic datasets

GAITS = {
    # base speed m/s, step Hz, bounce m, swing rad, root height m
    "walk": (1.0, 1.8, 0.03, 0.45, 0.92),
    "run": (2.6, 2.8, 0.08, 0.85, 0.95),
    "hop": (1.2, 1.4, 0.16, 0.30, 0.90),
    "sneak": (0.5, 1.0, 0.01, 0.25, 0.70),
}
DIRECTIONS = {
    "forward": (0.0, 0.0, 1.0),
    "backward": (0.0, 0.0, -1.0),
    "left": (1.0, 0.0, 0.0),
    "right": (-1.0, 0.0, 0.0),
}
SPEEDS = {"slow": 0.6, "normal": 1.0, "fast": 1.5}

GENRES = {
    # bpm, timbre Hz, travel m/s
    "ballet": (72.0, 70.0, 0.35),
    "hiphop": (96.0, 120.0, 0.10),
    "pop": (120.0, 180.0, 0.20),
    "house": (150.0, 260.0, 0.05),
}

# spine-like joints that lean with travel direction
_SPINE = (0, 3, 6, 9)
_ARMS = (13, 14, 16, 17, 18, 19)


def _body_patterns(n_joints, hand_dim):
    """Fixed per-joint motion patterns shared by every clip (the "body")."""
    r = np.random.default_rng(90210)
    gait_amp = r.uniform(0.2, 1.0, size=(n_joints, 3)) * (r.random((n_joints, 3)) < 0.6)
    gait_phase = r.choice([0.0, np.pi], size=(n_joints, 3)) + r.normal(0, 0.2, (n_joints, 3))
    genre_amp = {g: r.uniform(0.0, 1.0, size=(n_joints, 3)) * (r.random((n_joints, 3)) < 0.5)
                 for g in GENRES}
    gait_pose = {g: r.normal(0, 0.15, size=(n_joints, 3)) for g in GAITS}
    gait_pose["sneak"][list(_SPINE[:2])] += np.array([0.5, 0.0, 0.0])
    speaker = []
    for _ in range(16):
        speaker.append({
            "hand_pose": r.normal(0, 0.8, size=hand_dim),
            "hand_amp": r.uniform(0.2, 1.0, size=hand_dim),
            "freq": r.uniform(1.0, 3.5),
            "arm_amp": r.uniform(0.05, 0.4, size=(len(_ARMS), 3)),
            "sway": r.uniform(0.0, 0.08),
        })
    rest_hand = r.normal(0, 0.3, size=hand_dim)
    return gait_amp, gait_phase, genre_amp, gait_pose, speaker, rest_hand


@dataclass
class SynthSpec:
    modality: str
    size: int = 64
    length_range: tuple = (64, 64)
    vocabulary: list = None
    noise_scale: float = 0.01
    fps: int = 20
    n_joints: int = 21
    hand_dim: int = 12
    origin_range: float = 3.0
    sample_rate: int = 800
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.modality not in ("text", "music", "speech"):
            raise ConfigError(f"unknown modality {self.modality!r}; expected text, music or speech")
        self.length_range = tuple(int(v) for v in self.length_range)
        if self.vocabulary is None:
            self.vocabulary = default_vocabulary(self.modality)
        self.vocabulary = list(self.vocabulary)
        if not self.vocabulary:
            raise ConfigError("synthetic vocabulary is empty")
        if self.modality == "music":
            unknown = [g for g in self.vocabulary if g not in GENRES]
            if unknown:
                raise ConfigError(f"unknown music genres {unknown}")
        if self.modality == "speech" and max(int(v) for v in self.vocabulary) >= 16:
            raise ConfigError("speaker ids must be < 16")
        lo, hi = self.length_range
        if lo <= 0 or hi < lo:
            raise ConfigError(f"invalid length range {self.length_range}")

    @property
    def torso_dim(self):
        return TRAJ_DIMS + 3 * self.n_joints

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synth keys {sorted(extra)}")
        return cls(**d)


def default_vocabulary(modality):
    if modality == "text":
        return [f"{g} {d} {s}" for g in GAITS for d in DIRECTIONS for s in SPEEDS]
    if modality == "music":
        return list(GENRES)
    if modality == "speech":
        return [0, 1, 2, 3]
    raise ConfigError(f"unknown modality {modality!r}")


@dataclass
class SynthSample:
    id: str
    condition: dict
    clip: MotionClip
    split: str


def synth_dataset(spec, seed):
    """Generate ``spec.size`` (condition, clip) samples.

    Pure function of ``(spec, seed)``: every sample draws from its own
    ``SeedSequence([seed, index])``.  Conditions cycle through the
    vocabulary so labels are balanced.
    """
    if not isinstance(spec, SynthSpec):
        spec = SynthSpec.from_dict(dict(spec))
    patterns = _body_patterns(spec.n_joints, spec.hand_dim)
    n_labels = len(spec.vocabulary)
    period = max(1, int(round(1.0 / spec.test_fraction))) if spec.test_fraction > 0 else 0
    out = []
    for i in range(spec.size):
        r = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        label = spec.vocabulary[i % n_labels]
        lo, hi = spec.length_range
        n = int(r.integers(lo // 4, hi // 4 + 1)) * 4
        gen = {"text": _gen_text, "music": _gen_music, "speech": _gen_speech}[spec.modality]
        condition, clip = gen(spec, label, n, r, patterns)
        # store at 32-bit precision so the motion files round-trip losslessly
        clip = MotionClip(
            clip.fps,
            clip.torso.astype(np.float32).astype(np.float64),
            clip.left_hand.astype(np.float32).astype(np.float64),
            clip.right_hand.astype(np.float32).astype(np.float64),
            clip.labels,
        )
        # rotate the held-out slot each pass over the vocabulary
        split = "test" if period and (i + i // n_labels) % period == period - 1 else "train"
        out.append(SynthSample(f"{spec.modality}_{i:05d}", condition, clip, split))
    return out


def _rest_hands(spec, n, r, rest):
    lh = rest + spec.noise_scale * r.normal(size=(n, spec.hand_dim))
    rh = -rest + spec.noise_scale * r.normal(size=(n, spec.hand_dim))
    return lh, rh


def _gen_text(spec, sentence, n, r, patterns):
    gait_amp, gait_phase, _, gait_pose, _, rest = patterns
    words = sentence.split()
    if len(words) != 3 or words[0] not in GAITS or words[1] not in DIRECTIONS or words[2] not in SPEEDS:
        raise ConfigError(f"text label {sentence!r} is not '<gait> <direction> <speed>'")
    gait, direction, speed = words
    v0, freq, bounce, swing, height = GAITS[gait]
    s = SPEEDS[speed]
    tau = np.arange(n) / spec.fps
    jitter = 1.0 + 0.05 * r.normal()
    vel = v0 * s * jitter * np.asarray(DIRECTIONS[direction])
    f = freq * (0.75 + 0.25 * s)
    phase0 = r.uniform(0, 2 * np.pi)
    origin = np.array([r.uniform(-1, 1) * spec.origin_range, 0.0, r.uniform(-1, 1) * spec.origin_range])
    traj = origin + tau[:, None] * vel
    traj[:, 1] = height + bounce * np.abs(np.sin(np.pi * f * tau + phase0 / 2))
    osc = np.sin(2 * np.pi * f * tau[:, None, None] + gait_phase[None] + phase0)
    rot = gait_pose[gait][None] + swing * (0.7 + 0.3 * s) * gait_amp[None] * osc
    lean = 0.12 * s * np.asarray(DIRECTIONS[direction])
    for j in _SPINE:
        if j < spec.n_joints:
            # lean toward travel: pitch for z travel, roll for x travel
            rot[:, j, 0] += lean[2]
            rot[:, j, 2] -= lean[0]
    torso = np.concatenate([traj, rot.reshape(n, -1)], axis=1)
    torso += spec.noise_scale * r.normal(size=torso.shape)
    lh, rh = _rest_hands(spec, n, r, rest)
    labels = {"text": sentence, "gait": gait, "direction": direction, "speed": speed}
    return {"modality": "text", "text": sentence}, MotionClip(spec.fps, torso, lh, rh, labels)


def _gen_music(spec, genre, n, r, patterns):
    _, _, genre_amp, _, _, rest = patterns
    bpm, timbre, travel = GENRES[genre]
    beat = 60.0 / (bpm * (1.0 + 0.02 * r.normal()))
    duration = n / spec.fps
    b0 = r.uniform(0, beat)
    beats = np.arange(b0, duration, beat)
    # audio
    sr = spec.sample_rate
    ts = np.arange(int(round(duration * sr))) / sr
    audio = 0.1 * np.sin(2 * np.pi * timbre * 0.5 * ts)
    for b in beats:
        m = ts >= b
        audio[m] += np.exp(-(ts[m] - b) / 0.06) * np.sin(2 * np.pi * timbre * (ts[m] - b))
    audio += 0.02 * r.normal(size=audio.shape)
    # motion: extremes of a two-beat oscillation land on every beat, so the
    # kinetic velocity has its minima there
    tau = np.arange(n) / spec.fps
    phi = np.pi * (tau - b0) / beat
    amp = genre_amp[genre] * (0.8 + 0.2 * r.random())
    base = r.normal(0, 0.05, size=amp.shape)
    rot = base[None] + amp[None] * np.cos(phi)[:, None, None]
    heading = r.uniform(0, 2 * np.pi)
    origin = np.array([r.uniform(-1, 1) * spec.origin_range, 0.0, r.uniform(-1, 1) * spec.origin_range])
    sway = travel * beat * np.cos(phi)
    traj = np.zeros((n, 3))
    traj[:, 0] = origin[0] + sway * np.cos(heading)
    traj[:, 2] = origin[2] + sway * np.sin(heading)
    traj[:, 1] = 0.9 - 0.05 * np.cos(phi) ** 2
    torso = np.concatenate([traj, rot.reshape(n, -1)], axis=1)
    torso += spec.noise_scale * r.normal(size=torso.shape)
    lh, rh = _rest_hands(spec, n, r, rest)
    cond = {"modality": "music", "signal": audio, "sample_rate": sr, "genre": genre,
            "beats": beats}
    labels = {"genre": genre, "beats": beats.tolist()}
    return cond, MotionClip(spec.fps, torso, lh, rh, labels)


def _speech_envelope(duration, sr, r):
    ts = np.arange(int(round(duration * sr))) / sr
    env = np.zeros_like(ts)
    t = r.uniform(0, 0.3)
    while t < duration:
        phrase = r.uniform(0.6, 1.8)
        syll = r.uniform(3.0, 5.0)
        m = (ts >= t) & (ts < t + phrase)
        env[m] = 0.5 + 0.5 * np.sin(2 * np.pi * syll * (ts[m] - t)) ** 2
        t += phrase + r.uniform(0.2, 0.6)
    return ts, env


def _gen_speech(spec, speaker, n, r, patterns):
    _, _, _, _, speakers, rest = patterns
    sp = speakers[int(speaker)]
    duration = n / spec.fps
    ts, env = _speech_envelope(duration, spec.sample_rate, r)
    audio = env * r.normal(size=ts.shape)
    tau = np.arange(n) / spec.fps
    # envelope at motion rate
    env_m = np.interp(tau, ts, env) if len(ts) else np.zeros(n)
    phase = r.uniform(0, 2 * np.pi, size=spec.hand_dim)
    osc = np.sin(2 * np.pi * sp["freq"] * tau[:, None] + phase[None])
    lh = sp["hand_pose"][None] + sp["hand_amp"][None] * env_m[:, None] * osc
    rh = -sp["hand_pose"][None] + sp["hand_amp"][None] * env_m[:, None] * osc[:, ::-1]
    rot = np.zeros((n, spec.n_joints, 3))
    for k, j in enumerate(_ARMS):
        if j < spec.n_joints:
            rot[:, j] = sp["arm_amp"][k][None] * env_m[:, None] * np.sin(
                2 * np.pi * sp["freq"] * 0.5 * tau[:, None] + phase[k % spec.hand_dim])
    rot[:, 0, 1] = sp["sway"] * np.sin(2 * np.pi * 0.3 * tau)
    origin = np.array([r.uniform(-1, 1) * spec.origin_range, 0.0, r.uniform(-1, 1) * spec.origin_range])
    traj = np.tile(origin, (n, 1))
    traj[:, 1] = 0.9
    traj[:, 0] += sp["sway"] * np.sin(2 * np.pi * 0.2 * tau)
    torso = np.concatenate([traj, rot.reshape(n, -1)], axis=1)
    torso += spec.noise_scale * r.normal(size=torso.shape)
    lh = lh + spec.noise_scale * r.normal(size=lh.shape)
    rh = rh + spec.noise_scale * r.normal(size=rh.shape)
    cond = {"modality": "speech", "signal": audio, "sample_rate": spec.sample_rate,
            "speaker": int(speaker)}
    return cond, MotionClip(spec.fps, torso, lh, rh, {"speaker": int(speaker)})


# ---------------------------------------------------------------------------
# dataset directories: manifest.json + motions/*.mot + conditions/*.npy


def write_dataset(samples, root):
    root = Path(root)
    (root / "motions").mkdir(parents=True, exist_ok=True)
    (root / "conditions").mkdir(exist_ok=True)
    entries = []
    for s in samples:
        motion_rel = f"motions/{s.id}.mot"
        write_motion(s.clip, root / motion_rel)
        cond = {}
        for k, v in s.condition.items():
            if isinstance(v, np.ndarray) and k == "signal":
                rel = f"conditions/{s.id}.npy"
                np.save(root / rel, v)
                cond[k] = rel
            else:
                cond[k] = v
        entries.append({"id": s.id, "condition": cond, "motion": motion_rel, "split": s.split})
    manifest = {"version": 1, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, default=_json_default))
    return root / "manifest.json"


def read_dataset(root, split=None):
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise MotionFormatError(f"{root}: no manifest.json")
    manifest = json.loads(path.read_text())
    out = []
    for e in manifest["samples"]:
        if split is not None and e.get("split") != split:
            continue
        cond = dict(e["condition"])
        if isinstance(cond.get("signal"), str):
            cond["signal"] = np.load(root / cond["signal"])
        if "beats" in cond:
            cond["beats"] = np.asarray(cond["beats"], dtype=np.float64)
        out.append(SynthSample(e["id"], cond, read_motion(root / e["motion"]), e.get("split", "train")))
    return out
