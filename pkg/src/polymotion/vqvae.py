"""Part tokenizers: single-stage hand VQ-VAE and two-stage torso VQ-VAE.

The torso model encodes the delta representation, decodes local motion,
integrates the trajectory back to global coordinates from a known origin
and refines the result with a small 1D U-net.  Losses are mean squared
errors in per-channel standardised units.
"""
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codebook import Codebook
from .errors import CheckpointFormatError, ConfigError, InputError, TrainingError
from .motion import TRAJ_DIMS, from_delta, to_delta
from .numerics import (
    Adam,
    Conv1d,
    ConvTranspose1d,
    Module,
    ResBlock1d,
    Tensor,
    clip_grad_norm,
    concat,
    gelu,
    matmul,
    mse,
    no_grad,
    upsample_repeat,
)
from .numerics.checkpoint import load_checkpoint, save_checkpoint

PARTS = ("torso", "lhand", "rhand")


@dataclass
class VQConfig:
    part: str = "lhand"
    k: int = 512
    dim: int = 64
    width: int = 64
    levels: int = 2
    depth: int = 1
    two_stage: bool = True
    unet_width: int = 64
    alpha: tuple = (1.0, 1.0, 1.0)
    beta1: float = 1.0
    beta2: float = 0.25
    lr: float = 2e-3
    steps: int = 2000
    batch: int = 8
    window: int = 64
    clip_norm: float = 1.0
    reinit_every: int = 50
    tau: float = None
    sigma: float = 1e-3
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.part not in PARTS:
            raise ConfigError(f"unknown part {self.part!r}; expected one of {', '.join(PARTS)}")
        self.alpha = tuple(float(a) for a in self.alpha)
        if len(self.alpha) != 3 or min(self.alpha) < 0:
            raise ConfigError(f"alpha must be three nonnegative weights, got {self.alpha}")
        if self.window % self.factor:
            raise ConfigError(f"window {self.window} not divisible by downsample factor {self.factor}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")

    @property
    def factor(self):
        return 2 ** self.levels

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown vqvae keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class Normalizer:
    def __init__(self, mean=None, std=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    def fit(self, arrays):
        cat = np.concatenate([np.asarray(a).reshape(-1, np.shape(a)[-1]) for a in arrays])
        self.mean = cat.mean(axis=0)
        self.std = np.maximum(cat.std(axis=0), 1e-3)
        return self

    @property
    def fitted(self):
        return self.mean is not None

    def __call__(self, x):
        return (x - self.mean) / self.std

    def inverse(self, x):
        return x * self.std + self.mean


class ConvEncoder(Module):
    """(B, T, c) -> (B, T / 2**levels, d)"""

    def __init__(self, c_in, width, dim, levels, depth, rng):
        self.stem = Conv1d(c_in, width, 3, rng)
        self.down = [Conv1d(width, width, 4, rng, stride=2, padding=1) for _ in range(levels)]
        self.blocks = [[ResBlock1d(width, rng) for _ in range(depth)] for _ in range(levels)]
        self.head = Conv1d(width, dim, 3, rng)

    def forward(self, x):
        h = self.stem(x)
        for down, blocks in zip(self.down, self.blocks):
            h = down(gelu(h))
            for blk in blocks:
                h = blk(h)
        return self.head(gelu(h))


class ConvDecoder(Module):
    """(B, T', d) -> (B, T' * 2**levels, c)"""

    def __init__(self, dim, width, c_out, levels, depth, rng):
        self.stem = Conv1d(dim, width, 3, rng)
        self.blocks = [[ResBlock1d(width, rng) for _ in range(depth)] for _ in range(levels)]
        self.up = [Conv1d(width, width, 3, rng) for _ in range(levels)]
        self.head = Conv1d(width, c_out, 3, rng)

    def forward(self, z):
        h = self.stem(z)
        for blocks, conv in zip(self.blocks, self.up):
            for blk in blocks:
                h = blk(h)
            h = conv(upsample_repeat(gelu(h), 2))
        return self.head(gelu(h))


class UNet1d(Module):
    """Two-level 1D U-net with skip connections; length and channels preserved.

    The output layer starts at zero so the refiner begins as the identity
    when used residually.
    """

    def __init__(self, channels, width, rng):
        self.inp = Conv1d(channels, width, 3, rng)
        self.down1 = Conv1d(width, width, 4, rng, stride=2, padding=1)
        self.down2 = Conv1d(width, width, 4, rng, stride=2, padding=1)
        self.up2 = ConvTranspose1d(width, width, 4, rng, stride=2, padding=1)
        self.merge2 = Conv1d(2 * width, width, 3, rng)
        self.up1 = ConvTranspose1d(width, width, 4, rng, stride=2, padding=1)
        self.merge1 = Conv1d(2 * width, width, 3, rng)
        self.out = Conv1d(width, channels, 3, rng)
        self.out.weight.data[:] = 0.0

    def forward(self, x):
        if x.shape[1] % 4:
            raise InputError(f"U-net input length {x.shape[1]} must be divisible by 4")
        h0 = self.inp(x)
        h1 = self.down1(gelu(h0))
        h2 = self.down2(gelu(h1))
        u1 = self.merge2(concat([gelu(self.up2(gelu(h2))), h1], axis=-1))
        u0 = self.merge1(concat([gelu(self.up1(gelu(u1))), h0], axis=-1))
        return self.out(gelu(u0))


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


class _VqvaeBase(Module):
    kind = "vqvae"

    def __init__(self, cfg, channels, rng):
        self.cfg = cfg
        self.channels = channels
        self.encoder = ConvEncoder(channels, cfg.width, cfg.dim, cfg.levels, cfg.depth, rng)
        self.decoder = ConvDecoder(cfg.dim, cfg.width, channels, cfg.levels, cfg.depth, rng)
        self.codebook = Codebook(cfg.k, cfg.dim, rng, reinit_every=cfg.reinit_every,
                                 tau=cfg.tau, sigma=cfg.sigma)
        self._norm = Normalizer()

    @property
    def factor(self):
        return self.cfg.factor

    def _check_length(self, t):
        if t == 0 or t % self.factor:
            raise InputError(
                f"clip length {t} is not a positive multiple of the downsample factor "
                f"{self.factor}; pad or crop it first"
            )

    def _encoder_input(self, x):
        return self._norm(x)

    def encode_tokens(self, x):
        """Token ids for a (T, c) array or a (B, T, c) batch."""
        single = np.ndim(x) == 2
        xb = _as_batch(x)
        self._check_length(xb.shape[1])
        with no_grad():
            z = self.encoder(Tensor(self._encoder_input(xb)))
        idx = self.codebook.nearest(z.data)
        return idx[0] if single else idx

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.shape[-1] == 0:
            raise InputError("cannot decode an empty token sequence")
        self.codebook.lookup(tokens)
        return tokens

    # checkpointing

    def buffers(self):
        return {"norm.mean": self._norm.mean, "norm.std": self._norm.std}

    def save(self, path, extra=None):
        tensors = dict(self.state_dict())
        tensors.update(self.buffers())
        ex = {"codebook": self.codebook.telemetry(), "channels": self.channels}
        ex.update(extra or {})
        return save_checkpoint(path, tensors, kind=self.kind, config=self.cfg.to_dict(),
                               seed=self.cfg.seed, extra=ex)

    @classmethod
    def load(cls, path):
        tensors, manifest = load_checkpoint(path)
        cfg = VQConfig.from_dict(manifest["config"])
        model = cls(cfg, manifest["extra"]["channels"], np.random.default_rng(0))
        model._norm = Normalizer(tensors.pop("norm.mean"), tensors.pop("norm.std"))
        model.load_state_dict(tensors)
        model.codebook.load_telemetry(manifest["extra"]["codebook"])
        return model, manifest


class HandVqvae(_VqvaeBase):
    kind = "vq_hand"

    def fit_normalizer(self, arrays):
        self._norm.fit(arrays)

    def losses(self, x):
        """Loss terms for a raw (B, T, c) batch."""
        xn = Tensor(self._norm(_as_batch(x)))
        z = self.encoder(xn)
        q = self.codebook.quantize(z)
        y = self.decoder(q.quantized)
        rec = mse(y, xn)
        terms = {
            "rec": rec,
            "codebook": q.codebook_term,
            "commit": q.commit_term,
        }
        terms["total"] = rec + q.codebook_term * self.cfg.beta1 + q.commit_term * self.cfg.beta2
        return terms, q.indices

    def decode_tokens(self, tokens, origin=None):
        tokens = self._check_tokens(tokens)
        single = tokens.ndim == 1
        tb = tokens[None] if single else tokens
        with no_grad():
            y = self.decoder(Tensor(self.codebook.lookup(tb)))
        out = self._norm.inverse(y.data)
        return out[0] if single else out

    def reconstruct(self, x, origin=None):
        return self.decode_tokens(self.encode_tokens(x))


def _integration_matrix(t):
    """t_i = sum_{1 <= j <= i} delta_j; the first-frame delta is ignored."""
    m = np.tril(np.ones((t, t)))
    m[:, 0] = 0.0
    return m


class TorsoVqvae(_VqvaeBase):
    """Two-stage torso tokenizer; ``cfg.two_stage=False`` gives the
    conventional single-stage ablation that encodes global poses directly."""

    kind = "vq_torso"

    def __init__(self, cfg, channels, rng):
        super().__init__(cfg, channels, rng)
        self._gnorm = Normalizer()
        if cfg.two_stage:
            self.refiner = UNet1d(channels, cfg.unet_width, rng)

    def fit_normalizer(self, arrays):
        arrays = [np.asarray(a) for a in arrays]
        self._gnorm.fit(arrays)
        if self.cfg.two_stage:
            self._norm.fit([to_delta(a) for a in arrays])
        else:
            self._norm = self._gnorm

    def _encoder_input(self, x):
        if self.cfg.two_stage:
            x = np.stack([to_delta(a) for a in x])
        return self._norm(x)

    def buffers(self):
        out = super().buffers()
        out.update({"gnorm.mean": self._gnorm.mean, "gnorm.std": self._gnorm.std})
        return out

    @classmethod
    def load(cls, path):
        tensors, manifest = load_checkpoint(path)
        cfg = VQConfig.from_dict(manifest["config"])
        model = cls(cfg, manifest["extra"]["channels"], np.random.default_rng(0))
        model._gnorm = Normalizer(tensors.pop("gnorm.mean"), tensors.pop("gnorm.std"))
        mean, std = tensors.pop("norm.mean"), tensors.pop("norm.std")
        model._norm = Normalizer(mean, std) if cfg.two_stage else model._gnorm
        model.load_state_dict(tensors)
        model.codebook.load_telemetry(manifest["extra"]["codebook"])
        return model, manifest

    def _refine(self, y_tilde):
        """y = y~ + s * U((y~ - mu) / s), all in global coordinates."""
        g = self._gnorm
        return y_tilde + self.refiner((y_tilde - g.mean) * (1.0 / g.std)) * g.std

    def losses(self, x):
        """Loss terms for a raw global torso batch (B, T, c)."""
        x = _as_batch(x)
        cfg = self.cfg
        if not cfg.two_stage:
            xn = Tensor(self._norm(x))
            q = self.codebook.quantize(self.encoder(xn))
            rec = mse(self.decoder(q.quantized), xn)
            terms = {"rec": rec, "local": rec, "codebook": q.codebook_term, "commit": q.commit_term}
            terms["total"] = rec + q.codebook_term * cfg.beta1 + q.commit_term * cfg.beta2
            return terms, q.indices

        b, t, c = x.shape
        xbar_n = Tensor(self._encoder_input(x))
        q = self.codebook.quantize(self.encoder(xbar_n))
        ybar_n = self.decoder(q.quantized)
        local = mse(ybar_n, xbar_n)

        # R(.): integrate decoded deltas from the ground-truth origin
        ybar = self._norm.inverse(ybar_n)
        traj = matmul(_integration_matrix(t), ybar[:, :, :TRAJ_DIMS]) + x[:, :1, :TRAJ_DIMS]
        y_tilde = concat([traj, ybar[:, :, TRAJ_DIMS:]], axis=-1)
        y = self._refine(y_tilde)

        g = self._gnorm
        xg = Tensor(g(x))
        coarse = mse((y_tilde - g.mean) * (1.0 / g.std), xg)
        glob = mse((y - g.mean) * (1.0 / g.std), xg)
        a1, a2, a3 = cfg.alpha
        rec = local * a1 + coarse * a2 + glob * a3
        terms = {
            "rec": rec,
            "local": local,
            "coarse": coarse,
            "global": glob,
            "codebook": q.codebook_term,
            "commit": q.commit_term,
        }
        terms["total"] = rec + q.codebook_term * cfg.beta1 + q.commit_term * cfg.beta2
        return terms, q.indices

    def decode_stages(self, tokens, origin=(0.0, 0.0, 0.0)):
        """``(y_bar, y_tilde, y)`` for one token sequence: local decode,
        integrated coarse pose, refined pose."""
        tokens = self._check_tokens(tokens)
        if tokens.ndim != 1:
            raise InputError("decode_stages takes a single token sequence")
        with no_grad():
            yn = self.decoder(Tensor(self.codebook.lookup(tokens[None])))
        ybar = self._norm.inverse(yn.data[0])
        if not self.cfg.two_stage:
            return ybar, ybar, ybar
        ybar = ybar.copy()
        ybar[0, :TRAJ_DIMS] = 0.0
        y_tilde = from_delta(ybar, origin)
        # the refiner halves twice; edge-pad odd lengths and crop back
        n = len(y_tilde)
        padded = np.pad(y_tilde, ((0, -n % 4), (0, 0)), mode="edge")
        with no_grad():
            y = self._refine(Tensor(padded[None])).data[0, :n]
        return ybar, y_tilde, y

    def decode_tokens(self, tokens, origin=(0.0, 0.0, 0.0)):
        tokens = np.asarray(tokens)
        if tokens.ndim == 2:
            origins = np.broadcast_to(np.asarray(origin, dtype=np.float64), (len(tokens), 3))
            return np.stack([self.decode_stages(tk, o)[2] for tk, o in zip(tokens, origins)])
        return self.decode_stages(tokens, origin)[2]

    def reconstruct(self, x, origin=None):
        origin = np.asarray(x)[0, :TRAJ_DIMS] if origin is None else origin
        return self.decode_tokens(self.encode_tokens(x), origin)


def build_vqvae(cfg, channels, rng=None):
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if cfg.part == "torso":
        return TorsoVqvae(cfg, channels, rng)
    return HandVqvae(cfg, channels, rng)


def load_vqvae(path):
    _, manifest = load_checkpoint(path)
    cls = {"vq_torso": TorsoVqvae, "vq_hand": HandVqvae}.get(manifest.get("kind"))
    if cls is None:
        raise CheckpointFormatError(f"{path}: not a VQ-VAE checkpoint (kind={manifest.get('kind')!r})")
    return cls.load(path)


# ---------------------------------------------------------------------------
# training


def _crop_batch(arrays, window, batch, rng):
    out = np.empty((batch, window, arrays[0].shape[1]))
    for b in range(batch):
        a = arrays[rng.integers(len(arrays))]
        s = rng.integers(0, a.shape[0] - window + 1)
        out[b] = a[s:s + window]
    return out


def _crop_to_factor(a, factor):
    n = (a.shape[0] // factor) * factor
    return a[:n]


def evaluate_vqvae(model, arrays):
    """Held-out parameter-space reconstruction MSE and the set of tokens used."""
    errs, used = [], set()
    for a in arrays:
        a = _crop_to_factor(np.asarray(a), model.factor)
        if not len(a):
            continue
        tokens = model.encode_tokens(a)
        used.update(np.unique(tokens).tolist())
        rec = model.decode_tokens(tokens, a[0, :TRAJ_DIMS]) if isinstance(model, TorsoVqvae) \
            else model.decode_tokens(tokens)
        errs.append(((rec - a) ** 2).mean())
    return {"mse": float(np.mean(errs)) if errs else float("nan"), "activated": len(used)}


@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)
    terms: dict = field(default_factory=dict)
    activation_rate: list = field(default_factory=list)
    held_out: list = field(default_factory=list)
    reinit: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def train_vqvae(model, arrays, cfg=None, held_out=None, progress=None):
    """Train on a list of raw (T, c) arrays for ``cfg.steps`` steps.

    Every ``cfg.log_every`` steps the trace records mean loss terms, the
    fraction of codebook entries selected in that window and, when
    ``held_out`` arrays are given, their reconstruction error.
    """
    cfg = cfg or model.cfg
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if not arrays:
        raise InputError("cannot train a VQ-VAE on an empty dataset")
    short = [a.shape[0] for a in arrays if a.shape[0] < cfg.window]
    if short:
        raise InputError(f"{len(short)} clips are shorter than the training window {cfg.window}")
    if not model._norm.fitted:
        model.fit_normalizer(arrays)
    rng = np.random.default_rng([cfg.seed, 1])
    params = model.trainable_parameters()
    opt = Adam(params, lr=cfg.lr)
    trace = TrainTrace()
    window_terms, seen = {}, np.zeros(model.codebook.size, dtype=bool)
    for step in range(1, cfg.steps + 1):
        batch = _crop_batch(arrays, cfg.window, cfg.batch, rng)
        model.zero_grad()
        terms, idx = model.losses(batch)
        total = terms["total"]
        if not np.isfinite(total.data):
            detail = ", ".join(f"{k}={float(v.data):.4g}" for k, v in terms.items())
            raise TrainingError(f"VQ-VAE loss diverged at step {step} ({detail})")
        total.backward()
        clip_grad_norm(params, cfg.clip_norm)
        opt.step(strict=False)
        seen[np.unique(idx)] = True
        before = len(model.codebook.history)
        n = model.codebook.after_step(opt, rng, step)
        if len(model.codebook.history) > before:
            trace.reinit.append((step, n))
        for k, v in terms.items():
            window_terms.setdefault(k, []).append(float(v.data))
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.steps.append(step)
            for k, v in window_terms.items():
                trace.terms.setdefault(k, []).append(float(np.mean(v)))
            trace.activation_rate.append(float(seen.mean()))
            if held_out:
                trace.held_out.append(evaluate_vqvae(model, held_out))
            window_terms, seen = {}, np.zeros(model.codebook.size, dtype=bool)
            if progress:
                progress(step, trace)
    return trace
