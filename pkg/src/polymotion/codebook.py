"""Vector quantisation with activation counters and dead-token re-initialisation."""
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import ConfigError, DimensionError, VocabularyError
from .numerics import Module, Parameter, Tensor, stop_gradient, straight_through
from .numerics.tensor import getitem, tmean


@dataclass
class QuantizeResult:
    indices: np.ndarray
    quantized: Tensor
    commit_term: Tensor
    codebook_term: Tensor


class Codebook(Module):
    """K learned embeddings plus usage telemetry.

    ``reinit_every`` is the re-initialisation cadence in optimiser steps
    (0 disables it); ``tau`` defaults to ``1 / (4K)``.
    """

    def __init__(self, k, dim, rng, *, std=0.02, reinit_every=50, tau=None, sigma=1e-3):
        if k < 2:
            raise ConfigError(f"codebook needs K >= 2, got {k}")
        self.embeddings = Parameter(rng.normal(0.0, std, size=(k, dim)))
        self.reinit_every = int(reinit_every)
        self.tau = 1.0 / (4 * k) if tau is None else float(tau)
        _check_tau(self.tau)
        self.sigma = float(sigma)
        self._counts = np.zeros(k, dtype=np.int64)
        self._steps = 0
        self._history = []

    @property
    def size(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    @property
    def activation_counts(self):
        return self._counts

    @property
    def steps_since_reinit(self):
        return self._steps

    @property
    def history(self):
        return list(self._history)

    def lookup(self, indices):
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise VocabularyError(
                f"token ids must lie in [0, {self.size}), got range "
                f"[{indices.min()}, {indices.max()}]"
            )
        return self.embeddings.data[indices]

    def nearest(self, z):
        """Nearest-row indices for an array ``(..., d)``; no side effects."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise DimensionError(f"latent dim {z.shape[-1]} does not match codebook dim {self.dim}")
        flat = np.ascontiguousarray(z.reshape(-1, self.dim))
        return _accel.nearest_code(flat, self.embeddings.data).reshape(z.shape[:-1])

    def quantize(self, z, count=True):
        if not isinstance(z, Tensor):
            z = Tensor(z)
        idx = self.nearest(z.data)
        if count:
            self._counts += np.bincount(idx.reshape(-1), minlength=self.size)
        rows = getitem(self.embeddings, idx)
        quantized = straight_through(z, rows.data)
        diff_commit = z - stop_gradient(rows)
        diff_book = stop_gradient(z) - rows
        return QuantizeResult(
            idx,
            quantized,
            tmean(diff_commit * diff_commit),
            tmean(diff_book * diff_book),
        )

    forward = quantize

    def after_step(self, optimizer=None, rng=None, step=None):
        """Advance the cadence counter; re-initialise when it is due."""
        self._steps += 1
        if self.reinit_every and self._steps >= self.reinit_every:
            return reinitialize(self, self.tau, self.sigma, rng, optimizer=optimizer, step=step)
        return 0

    def telemetry(self):
        return {
            "counts": self._counts.tolist(),
            "steps_since_reinit": self._steps,
            "history": [list(h) for h in self._history],
            "reinit_every": self.reinit_every,
            "tau": self.tau,
            "sigma": self.sigma,
        }

    def load_telemetry(self, state):
        counts = np.asarray(state.get("counts", np.zeros(self.size)), dtype=np.int64)
        if counts.shape != (self.size,):
            raise DimensionError(f"counter length {counts.shape} does not match K={self.size}")
        self._counts = counts
        self._steps = int(state.get("steps_since_reinit", 0))
        self._history = [tuple(h) for h in state.get("history", [])]


def _check_tau(tau):
    if not 0.0 <= tau <= 1.0 or not np.isfinite(tau):
        raise ConfigError(f"activation threshold tau must lie in [0, 1], got {tau}")


def activation_rates(cb):
    total = cb.activation_counts.sum()
    if total == 0:
        return np.zeros(cb.size)
    return cb.activation_counts / total


def reinitialize(cb, tau, sigma, rng, optimizer=None, step=None):
    """Overwrite under-used embeddings with noisy copies of popular ones.

    Tokens are ranked by activation rate (descending, ties by index).  The
    token at sorted position k (0-based) whose rate is below ``tau`` takes
    the pre-update embedding at position ``n - 1 - k`` plus N(0, sigma^2)
    noise.  Counters reset afterwards; optimiser moments of the rewritten
    rows are zeroed.  Returns the number of rewritten rows.
    """
    _check_tau(tau)
    if sigma < 0:
        raise ConfigError(f"noise scale must be nonnegative, got {sigma}")
    rates = activation_rates(cb)
    n = cb.size
    order = np.argsort(-rates, kind="stable")
    snapshot = cb.embeddings.data.copy()
    rewritten = []
    for k in range(n):
        tok = order[k]
        if rates[tok] < tau:
            src = order[n - 1 - k]
            noise = rng.normal(0.0, sigma, size=cb.dim) if sigma > 0 else 0.0
            cb.embeddings.data[tok] = snapshot[src] + noise
            rewritten.append(int(tok))
    if rewritten and optimizer is not None:
        optimizer.reset_rows(cb.embeddings, np.array(rewritten))
    cb._counts[:] = 0
    cb._steps = 0
    cb._history.append((int(step) if step is not None else len(cb._history), len(rewritten)))
    return len(rewritten)


def activation_report(cb):
    """``[(token, rate), ...]`` sorted by rate, descending, ties by token id."""
    rates = activation_rates(cb)
    order = np.argsort(-rates, kind="stable")
    return [(int(t), float(rates[t])) for t in order]


def activated_tokens(indices):
    """Number of distinct tokens selected at least once."""
    return int(np.unique(np.asarray(indices).reshape(-1)).size)
