"""Modality encoders, adapters, auxiliary-id fusion and padding.

The encoders are frozen, deterministic stand-ins for large pretrained
models.  They only produce numpy features; everything trainable lives in
:class:`ConditionModule`.
"""
import json
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, MissingArtifactError, VocabularyError
from .numerics import Embedding, Linear, Module, Parameter, Tensor, concat
from .numerics.tensor import reshape

MODALITIES = ("text", "music", "speech")


class ModalityEncoder:
    modality = None
    out_dim = None

    def encode(self, payload):
        raise NotImplementedError

    def config(self):
        return {}


class TextEncoder(ModalityEncoder):
    """One fixed random row per whitespace-separated word.

    Rows are seeded from the word itself, so any word has an embedding.
    ``blur`` in [0, 1) mixes a direction shared by every word into each
    row, which makes all words look alike the way anisotropic pretrained
    sentence encoders do.
    """

    modality = "text"

    def __init__(self, dim=32, seed=0, blur=0.0):
        if not 0.0 <= blur < 1.0:
            raise ConfigError(f"text encoder blur must lie in [0, 1), got {blur}")
        self.out_dim = int(dim)
        self.seed = int(seed)
        self.blur = float(blur)
        self._shared = self._row("<shared>")
        self._cache = {}

    def _row(self, word):
        r = np.random.default_rng([self.seed, zlib.crc32(word.encode())])
        v = r.normal(size=self.out_dim)
        return v / np.linalg.norm(v)

    def word(self, w):
        row = self._cache.get(w)
        if row is None:
            own = self._row(w)
            row = np.sqrt(1.0 - self.blur ** 2) * own + self.blur * self._shared
            self._cache[w] = row
        return row

    def encode(self, payload):
        text = payload["text"] if isinstance(payload, dict) else payload
        words = str(text).split()
        if not words:
            raise InputError("empty text payload")
        return np.stack([self.word(w) for w in words])

    def config(self):
        return {"dim": self.out_dim, "seed": self.seed, "blur": self.blur}


def _frames(signal, hop):
    s = np.asarray(signal, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InputError(f"audio payload must be a non-empty 1D signal, got shape {s.shape}")
    n = -(-s.size // hop)
    padded = np.zeros(n * hop)
    padded[: s.size] = s
    return padded.reshape(n, hop)


class MusicEncoder(ModalityEncoder):
    """Per-hop log energy, onset strength, zero-crossing rate and band energies."""

    modality = "music"

    def __init__(self, hop=80, bands=8):
        self.hop = int(hop)
        self.bands = int(bands)
        self.out_dim = 3 + self.bands

    def encode(self, payload):
        fr = _frames(payload["signal"], self.hop)
        energy = np.log1p((fr ** 2).mean(axis=1) * 100.0)
        onset = np.maximum(np.diff(energy, prepend=energy[0]), 0.0)
        zcr = (np.diff(np.signbit(fr), axis=1) != 0).mean(axis=1)
        spec = np.abs(np.fft.rfft(fr, axis=1))[:, 1:]
        edges = np.linspace(0, spec.shape[1], self.bands + 1).astype(int)
        bands = np.stack([spec[:, a:b].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1)
        bands = np.log1p(bands)
        return np.concatenate([energy[:, None], onset[:, None], zcr[:, None], bands], axis=1)

    def config(self):
        return {"hop": self.hop, "bands": self.bands}


class SpeechEncoder(ModalityEncoder):
    """Envelope statistics per hop: mean, std, peak and slope of |signal|."""

    modality = "speech"

    def __init__(self, hop=80):
        self.hop = int(hop)
        self.out_dim = 4

    def encode(self, payload):
        fr = np.abs(_frames(payload["signal"], self.hop))
        mean = fr.mean(axis=1)
        slope = np.diff(mean, prepend=mean[0])
        return np.stack([mean, fr.std(axis=1), fr.max(axis=1), slope], axis=1)

    def config(self):
        return {"hop": self.hop}


class PrecomputedEncoder(ModalityEncoder):
    """Looks up externally computed embeddings by sample id.

    The store is a directory with ``index.json`` (id -> row offset and
    shape) and ``rows.bin`` (little-endian float64 rows).
    """

    def __init__(self, root, modality):
        root = Path(root)
        index = root / "index.json"
        if not index.exists():
            raise MissingArtifactError(f"{root}: no index.json for precomputed embeddings")
        meta = json.loads(index.read_text())
        self.modality = modality
        self.out_dim = int(meta["dim"])
        self.entries = meta["entries"]
        self.rows = np.fromfile(root / "rows.bin", dtype="<f8").reshape(-1, self.out_dim)
        self.root = str(root)

    def encode(self, payload):
        key = payload["id"] if isinstance(payload, dict) else payload
        if key not in self.entries:
            raise InputError(f"no precomputed embedding for sample {key!r}")
        off, n = self.entries[key]
        return self.rows[off:off + n].copy()

    def config(self):
        return {"root": self.root}


def write_precomputed(root, embeddings):
    """Store ``{id: (T', c') array}`` in the precomputed-embedding layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dims = {np.shape(v)[1] for v in embeddings.values()}
    if len(dims) != 1:
        raise InputError(f"precomputed embeddings disagree on width: {sorted(dims)}")
    entries, off, chunks = {}, 0, []
    for key in sorted(embeddings):
        a = np.asarray(embeddings[key], dtype="<f8")
        entries[key] = [off, a.shape[0]]
        off += a.shape[0]
        chunks.append(a)
    np.concatenate(chunks).tofile(root / "rows.bin")
    (root / "index.json").write_text(json.dumps({"dim": dims.pop(), "entries": entries}))
    return root


def build_encoder(modality, cfg=None):
    cfg = dict(cfg or {})
    kind = cfg.pop("kind", "synthetic")
    if kind == "precomputed":
        return PrecomputedEncoder(cfg["root"], modality)
    cls = {"text": TextEncoder, "music": MusicEncoder, "speech": SpeechEncoder}.get(modality)
    if cls is None:
        raise ConfigError(f"no encoder registered for modality {modality!r}")
    try:
        return cls(**cfg)
    except TypeError as exc:
        raise ConfigError(f"bad {modality} encoder config: {exc}") from None


class AuxiliaryVocabulary(Module):
    def __init__(self, n, dim, rng):
        if n < 1:
            raise ConfigError("auxiliary vocabulary needs at least one id")
        self.table = Embedding(n, dim, rng)

    @property
    def size(self):
        return self.table.weight.shape[0]

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise VocabularyError(f"auxiliary id out of range [0, {self.size}): {ids.tolist()}")
        return self.table(ids)


def fuse_auxiliary(e, aux):
    """Append auxiliary rows along time.

    ``aux`` is a single (d,) row or an (n, d) block; ``None`` leaves ``e``
    unchanged.
    """
    if aux is None:
        return e
    if aux.ndim == e.ndim - 1:
        aux = reshape(aux, aux.shape[:-1] + (1, aux.shape[-1]))
    return concat([e, aux], axis=-2)


def pad_to_length(e, length, pad_embedding):
    """Pad a (T', d) sequence to ``length`` rows; returns ``(padded, mask)``."""
    t = e.shape[0]
    if t > length:
        raise InputError(f"condition of length {t} does not fit in {length}; refusing to truncate")
    mask = np.zeros(length, dtype=bool)
    mask[:t] = True
    if t == length:
        return e, mask
    d = pad_embedding.shape[-1]
    pad = reshape(pad_embedding, (1, d))
    rows = concat([pad] * (length - t), axis=0)
    return concat([e, rows], axis=0), mask


class ConditionModule(Module):
    """Frozen encoder features -> adapter -> optional auxiliary row -> padding."""

    def __init__(self, dim, rng, encoders=None, aux_sizes=None):
        self.dim = dim
        self._encoders = {}
        self.adapters = {}
        self.aux = {}
        self.pad = Parameter(rng.normal(0.0, 0.02, size=dim))
        for m, enc in (encoders or {}).items():
            self.add_modality(m, enc, rng, (aux_sizes or {}).get(m))

    def add_modality(self, modality, encoder, rng, aux_size=None):
        if modality in self._encoders:
            raise ConfigError(f"modality {modality!r} already registered")
        self._encoders[modality] = encoder
        self.adapters[modality] = Linear(encoder.out_dim, self.dim, rng)
        if aux_size:
            self.aux[modality] = AuxiliaryVocabulary(aux_size, self.dim, rng)

    @property
    def modalities(self):
        return list(self._encoders)

    def encoder(self, modality):
        enc = self._encoders.get(modality)
        if enc is None:
            raise ConfigError(
                f"unknown modality {modality!r}; registered: {', '.join(self._encoders) or 'none'}"
            )
        return enc

    def features(self, modality, payload):
        return self.encoder(modality).encode(payload)

    def embed(self, modality, feats, aux_id=None):
        """One sample: (T', c') features -> (T' [+1], d) Tensor."""
        self.encoder(modality)
        e = self.adapters[modality](Tensor(np.asarray(feats, dtype=np.float64)))
        if aux_id is not None:
            table = self.aux.get(modality)
            if table is None:
                raise ConfigError(f"modality {modality!r} has no auxiliary vocabulary")
            e = fuse_auxiliary(e, table([aux_id]))
        return e

    def batch(self, modality, feats_list, aux_ids=None, length=None):
        """Embed, fuse and pad a batch; returns ``(B, L, d)`` and a validity mask."""
        aux_ids = aux_ids if aux_ids is not None else [None] * len(feats_list)
        seqs = [self.embed(modality, f, a) for f, a in zip(feats_list, aux_ids)]
        length = length or max(s.shape[0] for s in seqs)
        padded, masks = zip(*(pad_to_length(s, length, self.pad) for s in seqs))
        stacked = concat([reshape(p, (1,) + p.shape) for p in padded], axis=0)
        return stacked, np.stack(masks)

    def encode_condition(self, modality, payload, aux_id=None):
        return self.embed(modality, self.features(modality, payload), aux_id)

    def encoder_config(self):
        return {m: {"kind": "synthetic", **e.config()} if not isinstance(e, PrecomputedEncoder)
                else {"kind": "precomputed", **e.config()} for m, e in self._encoders.items()}
