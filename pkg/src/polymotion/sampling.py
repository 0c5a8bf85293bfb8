"""Next-token distribution shaping: greedy, multinomial and semantic-aware."""
import hashlib
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import ConfigError, SamplingError

KINDS = ("greedy", "multinomial", "semantic")
_ALIASES = {"semantic_aware": "semantic", "sas": "semantic"}


@dataclass(frozen=True)
class SamplerPolicy:
    """``temperature`` scales the logits; ``reweight_temperature`` is the
    temperature of the embedding-distance softmax."""

    kind: str = "multinomial"
    temperature: float = 1.0
    reweight_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown sampler {self.kind!r}; expected one of {', '.join(KINDS)}")
        object.__setattr__(self, "kind", kind)
        for name in ("temperature", "reweight_temperature"):
            t = getattr(self, name)
            if not (np.isfinite(t) and t > 0):
                raise ConfigError(f"{name} must be finite and positive, got {t}")


def _embeddings(cb):
    if hasattr(cb, "embeddings"):
        return np.ascontiguousarray(cb.embeddings.data)
    return np.ascontiguousarray(cb, dtype=np.float64)


_CACHE = {}
_CACHE_LIMIT = 32


def pairwise_distance_cache(cb):
    """K x K Euclidean distances between codebook rows.

    Keyed by a hash of the embedding bytes, so a codebook that changes gets
    a fresh matrix and an unchanged one is computed once.
    """
    e = _embeddings(cb)
    key = hashlib.sha1(e.tobytes() + str(e.shape).encode()).hexdigest()
    d = _CACHE.get(key)
    if d is None:
        d = _accel.pairwise_l2(e)
        d.setflags(write=False)
        if len(_CACHE) >= _CACHE_LIMIT:
            _CACHE.pop(next(iter(_CACHE)))
        _CACHE[key] = d
    return d


def _stable_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x)
    if not np.isfinite(m):
        raise SamplingError("no finite logits to sample from")
    e = np.exp(x - m)
    return e / e.sum()


def semantic_weights(i_star, cb, t):
    """softmax over j of ``-d(i_star, j) / t``."""
    if not (np.isfinite(t) and t > 0):
        raise ConfigError(f"reweighting temperature must be positive, got {t}")
    d = pairwise_distance_cache(cb)
    if not 0 <= i_star < d.shape[0]:
        raise SamplingError(f"i_star {i_star} outside codebook of size {d.shape[0]}")
    return _stable_softmax(-d[i_star] / t)


def next_token_distribution(logits, policy, cb=None):
    """Exact categorical distribution ``sample_next`` draws from.

    Entries past the codebook size are special tokens: they keep their
    softmax probability under semantic reweighting while the codebook mass
    is redistributed.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any():
        raise SamplingError("NaN in logits")
    if not np.isfinite(logits).any():
        raise SamplingError("all logits are -inf; nothing can be sampled")
    if policy.kind == "greedy":
        p = np.zeros_like(logits)
        p[int(np.argmax(logits))] = 1.0
        return p
    p = _stable_softmax(logits / policy.temperature)
    if policy.kind == "multinomial":
        return p
    if cb is None:
        raise ConfigError("semantic sampling needs the codebook")
    k = _embeddings(cb).shape[0]
    if logits.shape[0] < k:
        raise SamplingError(f"logits width {logits.shape[0]} smaller than codebook size {k}")
    codes = p[:k]
    mass = codes.sum()
    if mass <= 0:
        return p
    i_star = int(np.argmax(codes))
    q = codes * semantic_weights(i_star, cb, policy.reweight_temperature)
    if q.sum() <= 0:
        # weights underflowed everywhere the model has mass
        q = np.zeros_like(codes)
        q[i_star] = 1.0
    out = p.copy()
    out[:k] = q * (mass / q.sum())
    return out / out.sum()


def draw(p, rng):
    """Inverse-CDF draw; never lands on a zero-probability entry."""
    c = np.cumsum(p)
    u = rng.random() * c[-1]
    i = int(np.searchsorted(c, u, side="right"))
    if i >= len(p) or p[i] == 0:
        # rounding at the top of the cdf: fall back to the last live entry
        i = int(np.flatnonzero(p[: i + 1])[-1])
    return i


def sample_next(logits, policy, cb=None, rng=None):
    p = next_token_distribution(logits, policy, cb)
    if policy.kind == "greedy":
        return int(np.argmax(p))
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    return draw(p, rng)
