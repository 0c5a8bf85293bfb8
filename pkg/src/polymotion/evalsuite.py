"""Generation metrics and the two learned evaluation models.

Distribution metrics (FID, diversity, multimodality) work on feature
vectors from a frozen motion encoder.  Retrieval metrics use the
text-motion alignment model; speaker consistency uses the id model.
"""
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import argrelextrema

from .conditions import build_encoder
from .errors import ConfigError, DimensionError, InputError, TrainingError, VocabularyError
from .motion import to_delta
from .numerics import (
    Adam,
    Linear,
    Module,
    Parameter,
    Tensor,
    clip_grad_norm,
    cross_entropy,
    l2_normalize,
    matmul,
    mse,
    no_grad,
)
from .numerics.checkpoint import load_checkpoint, params_hash, save_checkpoint
from .numerics.tensor import tmean
from .seqgen import MotionPrior, PriorConfig, body_array, pretrain_motion_prior

# ---------------------------------------------------------------------------
# distribution metrics


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"need an (n >= 2, d) feature matrix, got shape {x.shape}")
    return x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def _shrink(cov, n, shrinkage):
    d = cov.shape[0]
    if shrinkage is None:
        # only regularise when the sample covariance is rank deficient
        shrinkage = 0.0 if n > d else min(1.0, d / (n + d))
    if shrinkage == 0.0:
        return cov
    target = np.trace(cov) / d * np.eye(d)
    return (1.0 - shrinkage) * cov + shrinkage * target


def _psd_sqrt(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2):
    s1 = _psd_sqrt(cov1)
    m = s1 @ cov2 @ s1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(max(0.0, diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt))


def fid(real, gen, shrinkage=None):
    """Frechet distance between Gaussian fits of two feature sets.

    With fewer than d+1 samples the covariances are shrunk towards a
    scaled identity (``shrinkage`` overrides the automatic amount).
    """
    real, gen = np.asarray(real, dtype=np.float64), np.asarray(gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise DimensionError(f"fid: feature shapes {real.shape} and {gen.shape} disagree")
    mu1, c1 = _moments(real)
    mu2, c2 = _moments(gen)
    c1 = _shrink(c1, real.shape[0], shrinkage)
    c2 = _shrink(c2, gen.shape[0], shrinkage)
    return frechet_distance(mu1, c1, mu2, c2)


def _pairs(n, n_pairs, rng):
    if n < 2:
        raise InputError("need at least two samples to form pairs")
    if n_pairs is None:
        i, j = np.triu_indices(n, k=1)
        return i, j
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return i, j


def _sorted_by_ids(features, ids):
    features = np.asarray(features, dtype=np.float64)
    if ids is None:
        return features
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    return features[order]


def diversity(features, n_pairs=None, seed=0, ids=None):
    """Mean distance over seeded random pairs (all pairs when ``n_pairs`` is None).

    Passing ``ids`` orders the features first, so the value does not depend
    on the order they were supplied in.
    """
    x = _sorted_by_ids(features, ids)
    i, j = _pairs(len(x), n_pairs, np.random.default_rng(seed))
    return float(np.linalg.norm(x[i] - x[j], axis=1).mean())


def multimodality(groups, n_pairs=None, seed=0):
    """Diversity within same-condition groups, averaged over groups.

    ``groups`` maps a condition key to its (n, d) features.
    """
    vals = []
    for g, key in enumerate(sorted(groups, key=str)):
        x = np.asarray(groups[key], dtype=np.float64)
        if len(x) < 2:
            warnings.warn(f"multimodality: group {key!r} has fewer than 2 samples; skipped")
            continue
        vals.append(diversity(x, n_pairs, seed=[seed, g] if n_pairs else seed))
    if not vals:
        raise InputError("multimodality: no group with at least two samples")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# retrieval


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def retrieval_ranks(z_motion, z_text, pool=32, seed=0, labels=None):
    """Rank (1-based) of each motion's own text among ``pool`` candidates.

    Distractors are drawn (seeded) from other pairs; with ``labels`` they
    are restricted to pairs of a different label.  Ties count against the
    true text.
    """
    zm, zt = _unit(z_motion), _unit(z_text)
    n = len(zm)
    if zt.shape != zm.shape:
        raise DimensionError(f"r_precision: motion {zm.shape} vs text {zt.shape}")
    if pool < 1:
        raise ConfigError(f"pool size must be positive, got {pool}")
    rng = np.random.default_rng(seed)
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        if labels is None:
            cand = np.delete(np.arange(n), i)
        else:
            cand = np.array([j for j in range(n) if labels[j] != labels[i]], dtype=np.int64)
        if len(cand) < pool - 1:
            raise ConfigError(f"pool size {pool} exceeds the {len(cand) + 1} candidates available")
        others = rng.choice(cand, size=pool - 1, replace=False)
        true = zm[i] @ zt[i]
        ranks[i] = 1 + int(np.sum(zt[others] @ zm[i] >= true))
    return ranks


def r_precision(z_motion, z_text, pool=32, top_k=(1, 2, 3), seed=0, labels=None):
    """Fraction of motions whose own text ranks within top-k among ``pool`` candidates."""
    ks = (top_k,) if np.isscalar(top_k) else tuple(top_k)
    if pool < max(ks):
        raise ConfigError(f"pool size {pool} smaller than top-k {max(ks)}")
    ranks = retrieval_ranks(z_motion, z_text, pool, seed, labels)
    return {k: float(np.mean(ranks <= k)) for k in ks}


def info_nce(z_motion, z_text, tau=0.07):
    """Contrastive loss of each motion against the in-batch texts.

    Accepts Tensors (differentiable) or arrays; inputs are L2-normalised.
    """
    if tau <= 0:
        raise ConfigError("infoNCE temperature must be positive")
    zm = l2_normalize(z_motion if isinstance(z_motion, Tensor) else Tensor(z_motion))
    zt = l2_normalize(z_text if isinstance(z_text, Tensor) else Tensor(z_text))
    logits = matmul(zm, zt.transpose(1, 0)) * (1.0 / tau)
    return cross_entropy(logits, np.arange(zm.shape[0]))


# ---------------------------------------------------------------------------
# beat alignment


def motion_beats(velocity, smooth=1.0):
    """Frame indices of local minima of a speed curve."""
    v = np.asarray(velocity, dtype=np.float64)
    if smooth > 0:
        v = gaussian_filter1d(v, smooth, mode="nearest")
    return argrelextrema(v, np.less)[0]


def kinetic_speed(torso):
    """Per-frame joint-rotation speed (rad/frame), trajectory excluded."""
    x = np.asarray(torso, dtype=np.float64)[:, 3:]
    if x.shape[0] < 2:
        raise InputError("clip must have at least two frames to measure velocity")
    # central differences keep extremes of the pose on whole frames
    return np.linalg.norm(np.gradient(x, axis=0), axis=1)


def beat_alignment_from_times(motion_times, beat_times, sigma=0.1):
    beat_times = np.asarray(beat_times, dtype=np.float64)
    if beat_times.size == 0:
        raise InputError("beat alignment needs at least one music beat")
    motion_times = np.asarray(motion_times, dtype=np.float64)
    if motion_times.size == 0:
        return 0.0
    d = np.min(np.abs(beat_times[:, None] - motion_times[None, :]), axis=1)
    return float(np.mean(np.exp(-(d ** 2) / (2 * sigma ** 2))))


def beat_alignment(clip, beat_times, sigma=0.1, smooth=1.0):
    """Mean Gaussian proximity of each music beat to its nearest motion beat."""
    torso = clip.torso if hasattr(clip, "torso") else clip
    fps = clip.fps if hasattr(clip, "fps") else None
    if fps is None:
        raise InputError("beat_alignment needs a MotionClip (for its frame rate)")
    if len(torso) < 1:
        raise InputError("clip has no frames")
    frames = motion_beats(kinetic_speed(torso), smooth)
    return beat_alignment_from_times(frames / fps, beat_times, sigma)


# ---------------------------------------------------------------------------
# segments and features


def segments(array, fps, seconds=5.0, factor=1):
    """Consecutive non-overlapping segments of ``seconds`` (a shorter clip is one segment)."""
    n = max(factor, int(round(seconds * fps)) // factor * factor)
    a = np.asarray(array)
    if len(a) <= n:
        return [a[: len(a) // factor * factor]]
    return [a[s:s + n] for s in range(0, len(a) - n + 1, n)]


def part_array(clip, view):
    """Evaluation view of a clip: torso deltas or whole body."""
    if view == "torso":
        return to_delta(clip.torso)
    if view == "body":
        return body_array(clip)
    raise ConfigError(f"unknown feature view {view!r}; expected 'torso' or 'body'")


class FeatureExtractor:
    """Frozen motion encoder used for FID / diversity / multimodality."""

    def __init__(self, prior, view="torso"):
        self.prior = prior
        self.view = view

    @property
    def dim(self):
        return self.prior.cfg.dim

    @property
    def hash(self):
        return params_hash(self.prior.state_dict())

    def __call__(self, clips):
        return self.prior.embed([part_array(c, self.view) for c in clips])

    @classmethod
    def train(cls, clips, view="torso", cfg=None):
        prior, _ = pretrain_motion_prior([part_array(c, view) for c in clips], cfg or PriorConfig())
        return cls(prior, view)


# ---------------------------------------------------------------------------
# text-motion alignment model


@dataclass
class AlignConfig:
    dim: int = 32
    lr: float = 3e-3
    encoder_lr: float = 3e-4
    tune_encoder: bool = True
    tau: float = 0.07
    recon_weight: float = 1.0
    steps: int = 600
    batch: int = 16
    window: int = 32
    log_every: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown alignment keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _pooled_condition(encoder, payload):
    return encoder.encode(payload).mean(axis=0)


class AlignmentModel(Module):
    """Frozen condition encoder + motion autoencoder, two adapters into a shared space."""

    kind = "alignment"

    def __init__(self, prior, cond_encoder, cfg, rng, view="torso"):
        self.cfg = cfg
        self.view = view
        self.prior = prior
        self._cond = cond_encoder
        self.motion_adapter = Linear(prior.cfg.dim, cfg.dim, rng)
        self.cond_adapter = Linear(cond_encoder.out_dim, cfg.dim, rng)

    def _motion_latent(self, xn):
        return tmean(self.prior.encoder(Tensor(xn)), axis=1)

    def embed_motion_arrays(self, arrays):
        out = []
        with no_grad():
            for a in arrays:
                a = self.prior._crop(np.asarray(a, dtype=np.float64))
                h = self._motion_latent(self.prior._norm(a)[None])
                out.append(self.motion_adapter(h).data[0])
        return _unit(np.stack(out))

    def embed_motion(self, clips):
        return self.embed_motion_arrays([part_array(c, self.view) for c in clips])

    def embed_condition(self, payloads):
        feats = np.stack([_pooled_condition(self._cond, p) for p in payloads])
        with no_grad():
            return _unit(self.cond_adapter(Tensor(feats)).data)

    def losses(self, windows, cond_feats):
        xn = self.prior._norm(windows)
        h = self.prior.encoder(Tensor(xn))
        zm = self.motion_adapter(tmean(h, axis=1))
        zt = self.cond_adapter(Tensor(cond_feats))
        terms = {"nce": info_nce(zm, zt, self.cfg.tau)}
        total = terms["nce"]
        if self.cfg.tune_encoder and self.cfg.recon_weight > 0:
            terms["recon"] = mse(self.prior.decoder(h), Tensor(xn))
            total = total + terms["recon"] * self.cfg.recon_weight
        terms["total"] = total
        return terms

    def save(self, path, extra=None):
        tensors = dict(self.state_dict())
        tensors.update({"prior.norm.mean": self.prior._norm.mean, "prior.norm.std": self.prior._norm.std})
        meta = {"prior": self.prior.cfg.to_dict(), "channels": self.prior.channels, "view": self.view,
                "cond": {"modality": self._cond.modality, **self._cond.config()}}
        meta.update(extra or {})
        return save_checkpoint(path, tensors, kind=self.kind, config=self.cfg.to_dict(),
                               seed=self.cfg.seed, extra=meta)

    @classmethod
    def load(cls, path):
        from .errors import CheckpointFormatError
        from .vqvae import Normalizer

        tensors, manifest = load_checkpoint(path)
        if manifest.get("kind") != cls.kind:
            raise CheckpointFormatError(f"{path}: expected an {cls.kind} checkpoint")
        extra = manifest["extra"]
        rng = np.random.default_rng(0)
        prior = MotionPrior(PriorConfig.from_dict(extra["prior"]), extra["channels"], rng)
        prior._norm = Normalizer(tensors.pop("prior.norm.mean"), tensors.pop("prior.norm.std"))
        cond_cfg = dict(extra["cond"])
        enc = build_encoder(cond_cfg.pop("modality"), cond_cfg)
        model = cls(prior, enc, AlignConfig.from_dict(manifest["config"]), rng, extra["view"])
        model.load_state_dict(tensors)
        model.freeze()
        return model, manifest


def train_alignment_model(clips, payloads, prior, cond_encoder, cfg=None, view="torso", progress=None):
    """Fit the adapters (and optionally fine-tune the motion autoencoder).

    ``prior`` is copied, so the caller's frozen model is untouched.
    """
    cfg = cfg or AlignConfig()
    if len(clips) != len(payloads) or len(clips) < 2:
        raise InputError("alignment training needs at least two paired samples")
    rng = np.random.default_rng([cfg.seed, 3])
    own = MotionPrior(prior.cfg, prior.channels, np.random.default_rng(0))
    own.load_state_dict(prior.state_dict())
    own._norm = prior._norm
    model = AlignmentModel(own, cond_encoder, cfg, rng, view)
    arrays = [part_array(c, view) for c in clips]
    if any(len(a) < cfg.window for a in arrays):
        raise InputError(f"every clip needs at least {cfg.window} frames")
    cond = np.stack([_pooled_condition(cond_encoder, p) for p in payloads])
    adapters = model.motion_adapter.parameters() + model.cond_adapter.parameters()
    own.freeze(not cfg.tune_encoder)
    opt = Adam(adapters, lr=cfg.lr)
    enc_opt = Adam(own.parameters(), lr=cfg.encoder_lr) if cfg.tune_encoder else None
    params = adapters + (own.parameters() if cfg.tune_encoder else [])
    trace = []
    acc = []
    b = min(cfg.batch, len(arrays))
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(arrays), size=b, replace=False)
        win = np.empty((b, cfg.window, arrays[0].shape[1]))
        for r, i in enumerate(idx):
            s = rng.integers(0, len(arrays[i]) - cfg.window + 1)
            win[r] = arrays[i][s:s + cfg.window]
        model.zero_grad()
        terms = model.losses(win, cond[idx])
        if not np.isfinite(terms["total"].data):
            raise TrainingError(f"alignment model diverged at step {step}")
        terms["total"].backward()
        clip_grad_norm(params, 1.0)
        opt.step()
        if enc_opt:
            enc_opt.step(strict=False)
        acc.append(float(terms["nce"].data))
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, float(np.mean(acc))))
            acc = []
            if progress:
                progress(step, trace)
    model.freeze()
    return model, trace


# ---------------------------------------------------------------------------
# speaker-id consistency


def id_consistency_scores(z, ids, centers):
    """``{acc, i2i}`` for embeddings ``z`` against per-id ``centers``."""
    z = np.asarray(z, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    n_ids = centers.shape[0]
    if n_ids < 2:
        raise ConfigError("id consistency needs at least two ids")
    if ids.size and (ids.min() < 0 or ids.max() >= n_ids):
        raise VocabularyError(f"speaker id outside the model's {n_ids} centers")
    d = np.linalg.norm(z[:, None, :] - centers[None, :, :], axis=-1)
    rows = np.arange(len(z))
    intra = d[rows, ids]
    inter = (d.sum(axis=1) - intra) / (n_ids - 1)
    ratio = np.where(inter > 0, intra / np.maximum(inter, 1e-300), np.where(intra > 0, np.inf, 1.0))
    acc = float(np.mean(np.argmin(d, axis=1) == ids))
    return {"acc": acc, "i2i": float(np.mean(ratio))}


@dataclass
class IdConfig:
    dim: int = 16
    lr: float = 3e-3
    steps: int = 400
    batch: int = 16
    window: int = 32
    log_every: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown id-model keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class IdConsistencyModel(Module):
    """Frozen motion and speech encoders, trainable adapters and per-id centers."""

    kind = "idmodel"

    def __init__(self, prior, speech_encoder, n_ids, cfg, rng, view="body"):
        self.cfg = cfg
        self.view = view
        self._prior = prior
        self._speech = speech_encoder
        self.motion_adapter = Linear(prior.cfg.dim, cfg.dim, rng)
        self.speech_adapter = Linear(speech_encoder.out_dim, cfg.dim, rng)
        self.centers = Parameter(rng.normal(0.0, 1.0, size=(n_ids, cfg.dim)))

    @property
    def n_ids(self):
        return self.centers.shape[0]

    def _logits(self, z):
        # negative squared distance to every center
        zz = (z * z).sum(axis=-1, keepdims=True)
        cc = (self.centers * self.centers).sum(axis=-1).reshape(1, self.n_ids)
        return matmul(z, self.centers.transpose(1, 0)) * 2.0 - zz - cc

    def embed_arrays(self, arrays):
        e = self._prior.embed(arrays)
        with no_grad():
            return self.motion_adapter(Tensor(e)).data

    def embed(self, clips):
        return self.embed_arrays([part_array(c, self.view) for c in clips])

    def score(self, clips, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_ids):
            raise VocabularyError(f"speaker id outside the model's {self.n_ids} ids")
        return id_consistency_scores(self.embed(clips), ids, self.centers.data)


def train_id_model(clips, ids, payloads, prior, speech_encoder, n_ids, cfg=None, view="body"):
    cfg = cfg or IdConfig()
    ids = np.asarray(ids, dtype=np.int64)
    if len(set(ids.tolist())) < 2:
        raise InputError("id model needs samples from at least two ids")
    rng = np.random.default_rng([cfg.seed, 4])
    model = IdConsistencyModel(prior, speech_encoder, n_ids, cfg, rng, view)
    arrays = [part_array(c, view) for c in clips]
    # windowed motion embeddings are fixed, so precompute a pool of them
    pool, pool_ids = [], []
    for a, i in zip(arrays, ids):
        for s in range(0, len(a) - cfg.window + 1, cfg.window // 2):
            pool.append(a[s:s + cfg.window])
            pool_ids.append(i)
    if not pool:
        raise InputError(f"every clip needs at least {cfg.window} frames")
    em = prior.embed(pool)
    pool_ids = np.asarray(pool_ids)
    speech = np.stack([_pooled_condition(speech_encoder, p) for p in payloads])
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    trace, acc = [], []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(em), size=min(cfg.batch, len(em)), replace=False)
        sidx = rng.choice(len(speech), size=min(cfg.batch, len(speech)), replace=False)
        model.zero_grad()
        loss = cross_entropy(model._logits(model.motion_adapter(Tensor(em[idx]))), pool_ids[idx])
        loss = loss + cross_entropy(model._logits(model.speech_adapter(Tensor(speech[sidx]))), ids[sidx])
        if not np.isfinite(loss.data):
            raise TrainingError(f"id model diverged at step {step}")
        loss.backward()
        clip_grad_norm(params, 1.0)
        opt.step()
        acc.append(float(loss.data))
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, float(np.mean(acc))))
            acc = []
    model.freeze()
    return model, trace


# ---------------------------------------------------------------------------
# reporting


def summarize(values):
    """Mean and standard deviation over seeds."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
