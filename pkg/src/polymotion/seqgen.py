"""Condition-to-token transformer with a shared trunk and per-(part, modality) heads.

Every (part, modality) pair owns a vocabulary: its codebook ids ``0..K-1``
followed by BOS, EOS and PAD.  Token embeddings and output projections
live in the pair's head, so ids are only ever interpreted under their own
key.  The trunk (condition adapters, condition encoder, base decoder) is
shared by every pair.
"""
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .conditions import ConditionModule, build_encoder
from .errors import ConfigError, InputError, RegistryError, TrainingError
from .motion import to_delta
from .numerics import (
    Adam,
    DecoderLayer,
    Embedding,
    EncoderLayer,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    causal_mask,
    clip_grad_norm,
    cosine_similarity,
    cross_entropy,
    key_padding_mask,
    l2_normalize,
    matmul,
    mse,
    no_grad,
)
from .numerics.checkpoint import load_checkpoint, params_hash, save_checkpoint
from .numerics.tensor import getitem, tsum
from .sampling import SamplerPolicy, draw, next_token_distribution
from .vqvae import ConvDecoder, ConvEncoder, Normalizer

MODALITY_PARTS = {"text": ("torso",), "music": ("torso",), "speech": ("torso", "lhand", "rhand")}
N_SPECIAL = 3


def pair_key(part, modality):
    return f"{part}_{modality}"


# ---------------------------------------------------------------------------
# vocabularies


@dataclass
class VocabEntry:
    part: str
    modality: str
    codebook: np.ndarray

    @property
    def k(self):
        return self.codebook.shape[0]

    @property
    def bos(self):
        return self.k

    @property
    def eos(self):
        return self.k + 1

    @property
    def pad(self):
        return self.k + 2

    @property
    def size(self):
        return self.k + N_SPECIAL


class VocabularyRegistry:
    def __init__(self):
        self._entries = {}

    def register(self, part, modality, codebook):
        key = (part, modality)
        if key in self._entries:
            raise RegistryError(f"vocabulary ({part}, {modality}) already registered")
        if hasattr(codebook, "embeddings"):
            codebook = codebook.embeddings.data
        cb = np.asarray(codebook, dtype=np.float64)
        if cb.ndim != 2 or cb.shape[0] < 1:
            raise InputError(f"codebook must be a non-empty (K, d) array, got shape {cb.shape}")
        self._entries[key] = VocabEntry(part, modality, cb.copy())
        return self._entries[key]

    def get(self, part, modality):
        try:
            return self._entries[(part, modality)]
        except KeyError:
            known = ", ".join(f"({b}, {p})" for b, p in self._entries) or "none"
            raise RegistryError(f"no vocabulary for ({part}, {modality}); registered: {known}") from None

    def __contains__(self, key):
        return tuple(key) in self._entries

    def pairs(self):
        return list(self._entries)

    def parts_for(self, modality):
        return [b for b in MODALITY_PARTS.get(modality, ()) if (b, modality) in self._entries]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SeqConfig:
    dim: int = 128
    heads: int = 4
    ffn: int = 512
    enc_layers: int = 8
    base_layers: int = 6
    head_layers: int = 2
    max_len: int = 64
    max_cond: int = 128
    lambda_sem: float = 0.1
    sem_mode: str = "cosine"
    interleave: bool = False
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 8
    clip_norm: float = 1.0
    replay: float = 0.5
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.sem_mode not in ("cosine", "pairwise"):
            raise ConfigError(f"sem_mode must be 'cosine' or 'pairwise', got {self.sem_mode!r}")
        if self.lambda_sem < 0:
            raise ConfigError("lambda_sem must be nonnegative")
        if not 0.0 <= self.replay <= 1.0:
            raise ConfigError("replay must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown seqgen keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# motion prior


def body_array(clip):
    """Whole-body frame features used by the prior: torso deltas plus hands."""
    return np.concatenate([to_delta(clip.torso), clip.left_hand, clip.right_hand], axis=1)


@dataclass
class PriorConfig:
    dim: int = 128
    width: int = 64
    levels: int = 1
    depth: int = 1
    lr: float = 2e-3
    steps: int = 1500
    batch: int = 8
    window: int = 32
    log_every: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown prior keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class MotionPrior(Module):
    """Convolutional motion autoencoder; ``embed`` pools encoder features
    over time into one d-dimensional vector."""

    kind = "prior"

    def __init__(self, cfg, channels, rng):
        self.cfg = cfg
        self.channels = channels
        self.encoder = ConvEncoder(channels, cfg.width, cfg.dim, cfg.levels, cfg.depth, rng)
        self.decoder = ConvDecoder(cfg.dim, cfg.width, channels, cfg.levels, cfg.depth, rng)
        self._norm = Normalizer()

    @property
    def factor(self):
        return 2 ** self.cfg.levels

    def _crop(self, x):
        n = (x.shape[-2] // self.factor) * self.factor
        if n == 0:
            raise InputError(f"clip of {x.shape[-2]} frames is shorter than the prior stride {self.factor}")
        return x[..., :n, :]

    def recon_loss(self, x):
        xn = Tensor(self._norm(x))
        return mse(self.decoder(self.encoder(xn)), xn)

    def embed(self, arrays):
        """(d,) embedding per (T, c) array; pure function of the input."""
        out = []
        with no_grad():
            for a in arrays:
                a = self._crop(np.asarray(a, dtype=np.float64))
                h = self.encoder(Tensor(self._norm(a)[None]))
                out.append(h.data[0].mean(axis=0))
        return np.stack(out)

    def reconstruct(self, a):
        a = self._crop(np.asarray(a, dtype=np.float64))
        with no_grad():
            y = self.decoder(self.encoder(Tensor(self._norm(a)[None])))
        return self._norm.inverse(y.data[0])

    def recon_error(self, arrays):
        """Mean per-channel MSE in standardised units."""
        errs = []
        for a in arrays:
            a = self._crop(np.asarray(a, dtype=np.float64))
            errs.append(((self._norm(self.reconstruct(a)) - self._norm(a)) ** 2).mean())
        return float(np.mean(errs))

    def save(self, path, extra=None):
        tensors = dict(self.state_dict())
        tensors.update({"norm.mean": self._norm.mean, "norm.std": self._norm.std})
        return save_checkpoint(path, tensors, kind=self.kind, config=self.cfg.to_dict(),
                               seed=self.cfg.seed, extra={"channels": self.channels, **(extra or {})})

    @classmethod
    def load(cls, path):
        tensors, manifest = load_checkpoint(path)
        if manifest.get("kind") != cls.kind:
            from .errors import CheckpointFormatError

            raise CheckpointFormatError(f"{path}: expected a {cls.kind} checkpoint, found {manifest.get('kind')!r}")
        model = cls(PriorConfig.from_dict(manifest["config"]), manifest["extra"]["channels"],
                    np.random.default_rng(0))
        model._norm = Normalizer(tensors.pop("norm.mean"), tensors.pop("norm.std"))
        model.load_state_dict(tensors)
        model.freeze()
        return model, manifest


def pretrain_motion_prior(arrays, cfg, progress=None):
    """Train a :class:`MotionPrior` on raw (T, c) arrays and freeze it."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if not arrays:
        raise InputError("cannot pretrain the motion prior on an empty dataset")
    if any(a.shape[0] < cfg.window for a in arrays):
        raise InputError(f"every clip must have at least {cfg.window} frames")
    rng = np.random.default_rng(cfg.seed)
    prior = MotionPrior(cfg, arrays[0].shape[1], rng)
    prior._norm.fit(arrays)
    params = prior.parameters()
    opt = Adam(params, lr=cfg.lr)
    trace = []
    window = []
    for step in range(1, cfg.steps + 1):
        batch = np.empty((cfg.batch, cfg.window, prior.channels))
        for b in range(cfg.batch):
            a = arrays[rng.integers(len(arrays))]
            s = rng.integers(0, a.shape[0] - cfg.window + 1)
            batch[b] = a[s:s + cfg.window]
        prior.zero_grad()
        loss = prior.recon_loss(batch)
        if not np.isfinite(loss.data):
            raise TrainingError(f"motion prior diverged at step {step} (loss={float(loss.data)})")
        loss.backward()
        clip_grad_norm(params, 1.0)
        opt.step()
        window.append(float(loss.data))
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append((step, float(np.mean(window))))
            window = []
            if progress:
                progress(step, trace)
    prior.freeze()
    return prior, trace


# ---------------------------------------------------------------------------
# model


class HeadDecoder(Module):
    def __init__(self, vocab_size, dim, heads, ffn, layers, rng):
        self.tokens = Embedding(vocab_size, dim, rng)
        self.layers = [DecoderLayer(dim, heads, ffn, rng) for _ in range(layers)]
        self.ln = LayerNorm(dim)
        self.out = Linear(dim, vocab_size, rng)

    def forward(self, h, memory, self_mask, memory_mask):
        for layer in self.layers:
            h = layer(h, memory, self_mask, memory_mask)
        return self.out(self.ln(h))


class SeqModel(Module):
    kind = "seqgen"

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self._rng = rng
        self.cond = ConditionModule(cfg.dim, rng)
        self.cond_pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_cond, cfg.dim)))
        self.encoder = [EncoderLayer(cfg.dim, cfg.heads, cfg.ffn, rng) for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(cfg.dim)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(self._seq_cap, cfg.dim)))
        self.base = [DecoderLayer(cfg.dim, cfg.heads, cfg.ffn, rng) for _ in range(cfg.base_layers)]
        self.heads = {}
        self.registry = VocabularyRegistry()
        self._enc_cfg = {}

    @property
    def _seq_cap(self):
        # interleaved sequences hold up to three parts per step
        return 3 * self.cfg.max_len + 2

    # registration ---------------------------------------------------------

    def add_modality(self, modality, encoder_cfg=None, aux_size=None):
        enc = build_encoder(modality, encoder_cfg)
        self.cond.add_modality(modality, enc, self._rng, aux_size)
        self._enc_cfg[modality] = {"encoder": dict(encoder_cfg or {}), "aux_size": aux_size}

    def add_head(self, part, modality, codebook):
        if modality not in self.cond.modalities:
            raise RegistryError(f"register modality {modality!r} before adding its heads")
        if part not in MODALITY_PARTS.get(modality, ()):
            raise RegistryError(f"part {part!r} is not generated for modality {modality!r}")
        entry = self.registry.register(part, modality, codebook)
        c = self.cfg
        self.heads[pair_key(part, modality)] = HeadDecoder(entry.size, c.dim, c.heads, c.ffn,
                                                          c.head_layers, self._rng)
        self.assign_names()
        return entry

    def head(self, part, modality):
        self.registry.get(part, modality)
        return self.heads[pair_key(part, modality)]

    def head_hash(self, part, modality):
        h = self.head(part, modality)
        return params_hash({n: p.data for n, p in h.named_parameters()})

    def trunk_parameters(self):
        skip = {id(p) for h in self.heads.values() for p in h.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    # forward pieces --------------------------------------------------------

    def encode(self, modality, feats_list, aux_ids=None):
        """Condition features -> encoder memory (B, L, d) and its validity mask."""
        e, valid = self.cond.batch(modality, feats_list, aux_ids)
        length = e.shape[1]
        if length > self.cfg.max_cond:
            raise InputError(f"condition length {length} exceeds max_cond {self.cfg.max_cond}")
        h = e + getitem(self.cond_pos, slice(0, length))
        mask = key_padding_mask(valid)
        for layer in self.encoder:
            h = layer(h, mask)
        return self.enc_ln(h), valid

    def _trunk(self, x, memory, valid):
        t = x.shape[1]
        if t > self.pos.shape[0]:
            raise InputError(f"token prefix of length {t} exceeds the positional table")
        h = x + getitem(self.pos, slice(0, t))
        self_mask = causal_mask(t)
        mem_mask = key_padding_mask(valid)
        for layer in self.base:
            h = layer(h, memory, self_mask, mem_mask)
        return h, self_mask, mem_mask

    def forward_logits(self, memory, valid, prefix, part, modality):
        """Next-token logits (B, L, |vocab|+3) for token prefixes (B, L)."""
        entry = self.registry.get(part, modality)
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None]
        if prefix.size and (prefix.min() < 0 or prefix.max() >= entry.size):
            raise InputError(f"prefix ids outside vocabulary ({part}, {modality}) of size {entry.size}")
        head = self.heads[pair_key(part, modality)]
        h, self_mask, mem_mask = self._trunk(head.tokens(prefix), memory, valid)
        return head(h, memory, self_mask, mem_mask)

    def _interleaved_logits(self, memory, valid, joint, owner, parts, modality):
        """Joint sequence over several parts.

        ``joint`` holds ids, ``owner`` the index into ``parts`` of the head
        whose embedding each position uses.  Returns per-part logits over the
        whole sequence.
        """
        x = None
        for j, part in enumerate(parts):
            head = self.heads[pair_key(part, modality)]
            ids = np.where(owner == j, joint, self.registry.get(part, modality).pad)
            emb = head.tokens(ids) * (owner == j)[..., None].astype(np.float64)
            x = emb if x is None else x + emb
        h, self_mask, mem_mask = self._trunk(x, memory, valid)
        return [self.heads[pair_key(p, modality)](h, memory, self_mask, mem_mask) for p in parts]

    def pooled(self, memory, valid):
        """Masked temporal mean of the encoder output (e_c)."""
        w = valid.astype(np.float64) / valid.sum(axis=1, keepdims=True)
        return tsum(memory * w[..., None], axis=1)

    # checkpoint ------------------------------------------------------------

    def save(self, path, extra=None):
        tensors = dict(self.state_dict())
        for b, p in self.registry.pairs():
            tensors[f"vocab.{pair_key(b, p)}"] = self.registry.get(b, p).codebook
        meta = {
            "modalities": self._enc_cfg,
            "modality_order": self.cond.modalities,
            "pairs": [list(k) for k in self.registry.pairs()],
            "head_hashes": {pair_key(b, p): self.head_hash(b, p) for b, p in self.registry.pairs()},
        }
        meta.update(extra or {})
        return save_checkpoint(path, tensors, kind=self.kind, config=self.cfg.to_dict(),
                               seed=self.cfg.seed, extra=meta)

    @classmethod
    def load(cls, path):
        tensors, manifest = load_checkpoint(path)
        if manifest.get("kind") != cls.kind:
            from .errors import CheckpointFormatError

            raise CheckpointFormatError(f"{path}: expected a {cls.kind} checkpoint, found {manifest.get('kind')!r}")
        model = cls(SeqConfig.from_dict(manifest["config"]))
        extra = manifest["extra"]
        for m in extra["modality_order"]:
            spec = extra["modalities"][m]
            model.add_modality(m, spec["encoder"], spec["aux_size"])
        for b, p in extra["pairs"]:
            model.add_head(b, p, tensors.pop(f"vocab.{pair_key(b, p)}"))
        model.load_state_dict(tensors)
        return model, manifest


def build_seq_model(cfg, modalities):
    """``modalities``: {name: {"encoder": {...}, "aux_size": n or None}}."""
    model = SeqModel(cfg)
    for m, spec in modalities.items():
        model.add_modality(m, spec.get("encoder"), spec.get("aux_size"))
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class SeqSample:
    modality: str
    feats: np.ndarray
    tokens: dict
    aux_id: int = None
    prior_embedding: np.ndarray = None
    label: str = None


def _pad_rows(rows, pad, length=None):
    length = length or max(len(r) for r in rows)
    out = np.full((len(rows), length), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def semantic_loss(e_c, e_m, mode="cosine"):
    """1 - cos(e_c, e_m) averaged over the batch; ``pairwise`` compares the
    rows of the two in-batch similarity matrices instead."""
    if mode == "cosine":
        return (1.0 - cosine_similarity(e_c, e_m)).mean()
    zc = l2_normalize(e_c)
    zm = l2_normalize(Tensor(e_m))
    sc = matmul(zc, zc.transpose(1, 0))
    sm = matmul(zm, zm.transpose(1, 0))
    return (1.0 - cosine_similarity(sc, sm)).mean()


def seq_losses(model, batch, lambda_sem=None, sem_mode=None):
    """Loss terms for a single-modality batch of :class:`SeqSample`."""
    cfg = model.cfg
    lambda_sem = cfg.lambda_sem if lambda_sem is None else lambda_sem
    sem_mode = sem_mode or cfg.sem_mode
    modality = batch[0].modality
    if any(s.modality != modality for s in batch):
        raise InputError("a training batch must hold a single modality")
    aux = [s.aux_id for s in batch] if model.cond.aux.get(modality) else None
    memory, valid = model.encode(modality, [s.feats for s in batch], aux)
    parts = [b for b in model.registry.parts_for(modality) if all(b in s.tokens for s in batch)]
    if not parts:
        raise RegistryError(f"no registered heads for modality {modality!r}")
    terms = {}
    total = None
    if cfg.interleave and len(parts) > 1:
        ce = _interleaved_ce(model, memory, valid, batch, parts, modality)
        terms[f"ce_{modality}_joint"] = ce
        total = ce
    else:
        for part in parts:
            v = model.registry.get(part, modality)
            seqs = [np.asarray(s.tokens[part], dtype=np.int64) for s in batch]
            if max(len(s) for s in seqs) + 1 > model.pos.shape[0]:
                raise InputError("token sequence longer than the model's positional table")
            inp = _pad_rows([np.concatenate([[v.bos], s]) for s in seqs], v.pad)
            tgt = _pad_rows([np.concatenate([s, [v.eos]]) for s in seqs], v.pad)
            logits = model.forward_logits(memory, valid, inp, part, modality)
            ce = cross_entropy(logits, tgt, ignore_index=v.pad)
            terms[f"ce_{pair_key(part, modality)}"] = ce
            total = ce if total is None else total + ce
    if lambda_sem > 0:
        if any(s.prior_embedding is None for s in batch):
            raise ConfigError("semantic enhancement needs prior embeddings; train or load the motion prior")
        e_m = np.stack([s.prior_embedding for s in batch])
        sem = semantic_loss(model.pooled(memory, valid), e_m, sem_mode)
        terms["sem"] = sem
        total = total + sem * lambda_sem
    terms["total"] = total
    return terms


def _joint_sequences(batch, parts, registry, modality):
    """Round-robin joint sequences: BOS, t0, l0, r0, t1, ... ; EOS closes."""
    first = registry.get(parts[0], modality)
    inputs, owners, targets, tgt_owner = [], [], [], []
    for s in batch:
        n = min(len(s.tokens[p]) for p in parts)
        ids, own = [first.bos], [0]
        for i in range(n):
            for j, p in enumerate(parts):
                ids.append(int(s.tokens[p][i]))
                own.append(j)
        tgt = ids[1:] + [first.eos]
        town = own[1:] + [0]
        inputs.append(ids)
        owners.append(own)
        targets.append(tgt)
        tgt_owner.append(town)
    length = max(len(r) for r in inputs)
    return (
        _pad_rows(inputs, 0, length),
        _pad_rows(owners, -1, length),
        _pad_rows(targets, -1, length),
        _pad_rows(tgt_owner, -1, length),
    )


def _interleaved_ce(model, memory, valid, batch, parts, modality):
    joint, owner, targets, tgt_owner = _joint_sequences(batch, parts, model.registry, modality)
    owner_in = np.where(owner < 0, 0, owner)
    logits = model._interleaved_logits(memory, valid, joint, owner_in, parts, modality)
    total = None
    n = (tgt_owner >= 0).sum()
    for j, part in enumerate(parts):
        v = model.registry.get(part, modality)
        sel = tgt_owner == j
        tgt = np.where(sel, targets, v.pad)
        ce = cross_entropy(logits[j], tgt, ignore_index=v.pad) * (sel.sum() / n)
        total = ce if total is None else total + ce
    return total


@dataclass
class SeqTrace:
    steps: list = field(default_factory=list)
    terms: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def train_seq(model, samples, cfg=None, pairs=None, replay_samples=None, progress=None, steps=None):
    """Train on ``samples`` (any mix of modalities).

    ``pairs`` lists the (part, modality) heads being trained in this stage;
    other heads are frozen so their parameters stay bit-identical.
    ``replay_samples`` (earlier-stage data) are mixed in with probability
    ``cfg.replay`` and only update the shared trunk.
    """
    cfg = cfg or model.cfg
    steps = cfg.steps if steps is None else steps
    if not samples:
        raise InputError("cannot train on an empty dataset")
    pairs = [tuple(p) for p in (pairs or model.registry.pairs())]
    for b, p in pairs:
        model.registry.get(b, p)
    for key, head in model.heads.items():
        active = any(pair_key(b, p) == key for b, p in pairs)
        head.freeze(not active)
    params = model.trunk_parameters() + [p for k, h in model.heads.items() for p in h.parameters()
                                         if not p.frozen]
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    by_mod = {}
    for s in samples:
        by_mod.setdefault(s.modality, []).append(s)
    mods = sorted(by_mod)
    replay = {}
    for s in replay_samples or []:
        replay.setdefault(s.modality, []).append(s)
    replay_mods = sorted(replay)
    trace = SeqTrace()
    acc = {}
    for step in range(1, steps + 1):
        if replay_mods and rng.random() < cfg.replay:
            pool = replay[replay_mods[rng.integers(len(replay_mods))]]
        else:
            pool = by_mod[mods[rng.integers(len(mods))]]
        idx = rng.choice(len(pool), size=min(cfg.batch, len(pool)), replace=False)
        batch = [pool[i] for i in idx]
        model.zero_grad()
        terms = seq_losses(model, batch)
        total = terms["total"]
        if not np.isfinite(total.data):
            detail = ", ".join(f"{k}={float(v.data):.4g}" for k, v in terms.items())
            raise TrainingError(f"sequence model diverged at step {step} ({detail})")
        total.backward()
        clip_grad_norm(params, cfg.clip_norm)
        opt.step(strict=False)
        for k, v in terms.items():
            acc.setdefault(k, []).append(float(v.data))
        if step % cfg.log_every == 0 or step == steps:
            trace.steps.append(step)
            for k in set(acc) | set(trace.terms):
                trace.terms.setdefault(k, [])
                vals = acc.get(k)
                trace.terms[k].append(float(np.mean(vals)) if vals else float("nan"))
            acc = {}
            if progress:
                progress(step, trace)
    for head in model.heads.values():
        head.freeze(False)
    return trace


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerationRequest:
    modality: str
    payload: object = None
    length: int = 16
    policy: SamplerPolicy = field(default_factory=lambda: SamplerPolicy("greedy"))
    aux_id: int = None
    feats: np.ndarray = None
    min_length: int = 1


def _step_distribution(logits_row, entry, policy, step, min_length):
    logits = np.array(logits_row, dtype=np.float64)
    logits[entry.bos] = -np.inf
    logits[entry.pad] = -np.inf
    if step < min_length:
        logits[entry.eos] = -np.inf
    return next_token_distribution(logits, policy, entry.codebook)


def generate(model, req, rng=None):
    """Autoregressive decoding; returns ``{part: token array}``."""
    return generate_batch(model, [req], rng)[0]


def generate_batch(model, reqs, rng=None):
    """Decode several same-modality requests together.

    Rows draw from one generator in row order, so results depend only on
    the request list and the seed.
    """
    if not reqs:
        return []
    modality = reqs[0].modality
    if any(r.modality != modality for r in reqs):
        raise InputError("generate_batch needs requests of a single modality")
    for r in reqs:
        if r.length <= 0:
            raise InputError(f"generation length cap must be positive, got {r.length}")
        if r.length > model.cfg.max_len:
            raise InputError(f"length cap {r.length} exceeds the model's max_len {model.cfg.max_len}")
    model.cond.encoder(modality)
    parts = model.registry.parts_for(modality)
    if not parts:
        raise RegistryError(f"no heads registered for modality {modality!r}")
    rng = np.random.default_rng(reqs[0].policy.seed) if rng is None else rng
    feats = [r.feats if r.feats is not None else model.cond.features(modality, r.payload) for r in reqs]
    aux = [r.aux_id for r in reqs] if model.cond.aux.get(modality) else None
    with no_grad():
        memory, valid = model.encode(modality, feats, aux)
        if model.cfg.interleave and len(parts) > 1:
            out = _generate_interleaved(model, memory, valid, reqs, parts, modality, rng)
        else:
            out = [dict() for _ in reqs]
            for part in parts:
                seqs = _generate_part(model, memory, valid, reqs, part, modality, rng)
                for o, s in zip(out, seqs):
                    o[part] = s
    return out


def _generate_part(model, memory, valid, reqs, part, modality, rng):
    entry = model.registry.get(part, modality)
    n = len(reqs)
    cap = max(r.length for r in reqs)
    prefix = np.full((n, 1), entry.bos, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    out = [[] for _ in range(n)]
    for step in range(cap):
        logits = model.forward_logits(memory, valid, prefix, part, modality).data[:, -1]
        nxt = np.full(n, entry.pad, dtype=np.int64)
        for i, r in enumerate(reqs):
            if done[i] or step >= r.length:
                done[i] = True
                continue
            p = _step_distribution(logits[i], entry, r.policy, step, r.min_length)
            tok = int(np.argmax(p)) if r.policy.kind == "greedy" else draw(p, rng)
            if tok == entry.eos:
                done[i] = True
                continue
            out[i].append(tok)
            nxt[i] = tok
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return [np.array(o, dtype=np.int64) for o in out]


def _generate_interleaved(model, memory, valid, reqs, parts, modality, rng):
    n = len(reqs)
    entries = [model.registry.get(p, modality) for p in parts]
    joint = np.full((n, 1), entries[0].bos, dtype=np.int64)
    owner = np.zeros((n, 1), dtype=np.int64)
    out = [{p: [] for p in parts} for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    cap = max(r.length for r in reqs)
    for step in range(cap):
        for j, part in enumerate(parts):
            logits = model._interleaved_logits(memory, valid, joint, owner, parts, modality)[j].data[:, -1]
            nxt = np.zeros(n, dtype=np.int64)
            for i, r in enumerate(reqs):
                if done[i] or step >= r.length:
                    done[i] = True
                    continue
                p = _step_distribution(logits[i], entries[j], r.policy, step, r.min_length)
                if j:
                    # only the first part may close the sequence
                    p = p.copy()
                    p[entries[j].eos] = 0.0
                    p = p / p.sum()
                tok = int(np.argmax(p)) if r.policy.kind == "greedy" else draw(p, rng)
                if tok == entries[j].eos:
                    done[i] = True
                    continue
                out[i][part].append(tok)
                nxt[i] = tok
            joint = np.concatenate([joint, nxt[:, None]], axis=1)
            owner = np.concatenate([owner, np.full((n, 1), j)], axis=1)
            if done.all():
                break
        if done.all():
            break
    result = []
    for o in out:
        m = min(len(v) for v in o.values())
        result.append({p: np.array(v[:m], dtype=np.int64) for p, v in o.items()})
    return result
