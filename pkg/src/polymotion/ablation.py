"""Desk-scale ablation harnesses shared by the CLI and the acceptance tests.

Each harness trains the models it compares from the same data and seed and
returns plain dictionaries of per-seed results.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .conditions import TextEncoder
from .evalsuite import (
    AlignConfig,
    FeatureExtractor,
    diversity,
    fid,
    multimodality,
    r_precision,
    train_alignment_model,
)
from .motion import MotionClip, SynthSpec, synth_dataset
from .sampling import SamplerPolicy
from .seqgen import (
    GenerationRequest,
    PriorConfig,
    SeqConfig,
    SeqSample,
    body_array,
    build_seq_model,
    generate_batch,
    pretrain_motion_prior,
    train_seq,
)
from .vqvae import VQConfig, build_vqvae, train_vqvae


def _median(values):
    return float(np.median(np.asarray(values, dtype=np.float64)))


# ---------------------------------------------------------------------------
# tokenizer ablations


def torso_split(size=96, length_range=(64, 96), data_seed=0):
    data = synth_dataset(SynthSpec("text", size=size, length_range=length_range), data_seed)
    train = [s.clip.torso for s in data if s.split == "train"]
    test = [s.clip.torso for s in data if s.split == "test"]
    return train, test


REINIT_BENCH = dict(part="torso", k=64, dim=32, width=32, unet_width=32, two_stage=False,
                    steps=5000, batch=8, window=32, lr=5e-4, log_every=1000)


def reinit_ablation(seeds=(0, 1, 2), overrides=None, progress=None):
    """Held-out activated-token counts with and without codebook re-initialization."""
    train, test = torso_split()
    base = {**REINIT_BENCH, **(overrides or {})}
    every = base.pop("reinit_every", 50) or 50
    out = {"with": [], "without": []}
    for seed in seeds:
        for key, cadence in (("with", every), ("without", 0)):
            cfg = VQConfig(**{**base, "seed": seed, "reinit_every": cadence})
            model = build_vqvae(cfg, train[0].shape[1])
            trace = train_vqvae(model, train, held_out=test)
            out[key].append(trace.held_out[-1]["activated"])
            if progress:
                progress(f"seed {seed} {key} re-init: {out[key][-1]} tokens")
    out["median_with"] = _median(out["with"])
    out["median_without"] = _median(out["without"])
    out["ratio"] = out["median_with"] / max(out["median_without"], 1e-12)
    return out


TWO_STAGE_BENCH = dict(part="torso", k=64, dim=32, width=32, unet_width=32, steps=1500,
                       batch=8, window=32, lr=2e-3, log_every=500)


def two_stage_ablation(seeds=(0, 1, 2), overrides=None, progress=None):
    """Held-out reconstruction MSE of the two-stage torso model vs the single-stage one."""
    train, test = torso_split()
    base = {**TWO_STAGE_BENCH, **(overrides or {})}
    out = {"two_stage": [], "single_stage": []}
    for seed in seeds:
        for key, flag in (("two_stage", True), ("single_stage", False)):
            cfg = VQConfig(**{**base, "seed": seed, "two_stage": flag})
            model = build_vqvae(cfg, train[0].shape[1])
            trace = train_vqvae(model, train, held_out=test)
            out[key].append(trace.held_out[-1]["mse"])
            if progress:
                progress(f"seed {seed} {key}: mse {out[key][-1]:.4f}")
    out["median_two_stage"] = _median(out["two_stage"])
    out["median_single_stage"] = _median(out["single_stage"])
    return out


# ---------------------------------------------------------------------------
# text-to-motion benchmark


@dataclass
class T2MBench:
    size: int = 144
    length_range: tuple = (48, 96)
    data_seed: int = 0
    text_blur: float = 0.6
    text_dim: int = 32
    vq: dict = field(default_factory=lambda: dict(part="torso", k=256, dim=32, width=32, unet_width=32,
                                                  steps=5000, batch=8, window=32, lr=2e-3,
                                                  log_every=500))
    prior: dict = field(default_factory=lambda: dict(dim=32, width=32, steps=800, window=32))
    align: dict = field(default_factory=lambda: dict(steps=600))
    seq: dict = field(default_factory=lambda: dict(dim=32, heads=2, ffn=64, enc_layers=2, base_layers=2,
                                                   head_layers=1, max_len=24, max_cond=8, lr=2e-3,
                                                   sem_mode="pairwise", steps=1500, batch=16, log_every=250))
    repeats: int = 8
    pool: int = 32
    reweight_temperature: float = 12.0

    def to_dict(self):
        return asdict(self)


class T2MAssets:
    """Data, tokenizer, semantic prior and evaluation models for one benchmark config."""

    def __init__(self, bench=None, progress=None):
        self.bench = bench = bench or T2MBench()
        say = progress or (lambda msg: None)
        data = synth_dataset(SynthSpec("text", size=bench.size, length_range=bench.length_range),
                             bench.data_seed)
        self.train = [s for s in data if s.split == "train"]
        self.test = [s for s in data if s.split == "test"]
        self.labels = sorted({s.condition["text"] for s in data})
        self.encoder_cfg = {"dim": bench.text_dim, "blur": bench.text_blur}
        torso = [s.clip.torso for s in self.train]
        vq_cfg = VQConfig(**{**bench.vq, "seed": bench.data_seed})
        self.vq = build_vqvae(vq_cfg, torso[0].shape[1])
        train_vqvae(self.vq, torso)
        say("tokenizer trained")
        self.tokens = [self.vq.encode_tokens(t[: len(t) // self.vq.factor * self.vq.factor]) for t in torso]
        prior_cfg = PriorConfig(**{**bench.prior, "dim": bench.seq["dim"], "seed": bench.data_seed})
        self.prior, _ = pretrain_motion_prior([body_array(s.clip) for s in self.train], prior_cfg)
        self.prior_embeddings = self.prior.embed([body_array(s.clip) for s in self.train])
        say("semantic prior trained")
        self.features = FeatureExtractor.train([s.clip for s in self.train], "torso",
                                               PriorConfig(**{**bench.prior, "seed": bench.data_seed}))
        # the evaluator sees a sharp text encoder: it is independent of the generator's
        self.eval_text = TextEncoder(dim=bench.text_dim, seed=1)
        self.align, _ = train_alignment_model(
            [s.clip for s in self.train], [s.condition for s in self.train], self.features.prior,
            self.eval_text, AlignConfig(**{**bench.align, "seed": bench.data_seed}))
        say("evaluation models trained")
        self.real_features = self.features([s.clip for s in self.test])
        self.label_text = self.align.embed_condition(self.labels)

    def samples(self, model):
        return [SeqSample("text", model.cond.features("text", s.condition), {"torso": tok},
                          prior_embedding=e)
                for s, tok, e in zip(self.train, self.tokens, self.prior_embeddings)]


def train_t2m(assets, seed, lambda_sem=None, steps=None, progress=None):
    over = {"seed": seed}
    if lambda_sem is not None:
        over["lambda_sem"] = lambda_sem
    cfg = SeqConfig(**{**assets.bench.seq, **over})
    model = build_seq_model(cfg, {"text": {"encoder": assets.encoder_cfg}})
    model.add_head("torso", "text", assets.vq.codebook)
    trace = train_seq(model, assets.samples(model), steps=steps, progress=progress)
    return model, trace


def decode_clip(vq, tokens, fps=20):
    if len(tokens) == 0:
        tokens = np.zeros(1, dtype=np.int64)
    torso = vq.decode_tokens(tokens)
    zeros = np.zeros((len(torso), 0))
    return MotionClip(fps, torso, zeros, zeros)


def evaluate_t2m(assets, model, policy_kind, seed, repeats=None):
    """Generate ``repeats`` motions per label and score them."""
    repeats = repeats or assets.bench.repeats
    reqs, owners = [], []
    for r in range(repeats):
        for li, label in enumerate(assets.labels):
            pol = SamplerPolicy(policy_kind, reweight_temperature=assets.bench.reweight_temperature)
            reqs.append(GenerationRequest("text", payload=label, length=model.cfg.max_len,
                                          policy=pol, min_length=4))
            owners.append(li)
    rng = np.random.default_rng([seed, 7])
    out = generate_batch(model, reqs, rng)
    clips = [decode_clip(assets.vq, o["torso"]) for o in out]
    owners = np.asarray(owners)
    zm = assets.align.embed_motion(clips)
    zt = assets.label_text[owners]
    top = []
    for r in range(repeats):
        sel = slice(r * len(assets.labels), (r + 1) * len(assets.labels))
        top.append(r_precision(zm[sel], zt[sel], pool=assets.bench.pool, seed=[seed, r]))
    feats = assets.features(clips)
    groups = {li: feats[owners == li] for li in range(len(assets.labels))}
    return {
        "top1": float(np.mean([t[1] for t in top])),
        "top3": float(np.mean([t[3] for t in top])),
        "mm": multimodality(groups),
        "div": diversity(feats, n_pairs=300, seed=seed),
        "fid": fid(assets.real_features, feats),
    }


def sas_ablation(seeds=(0, 1, 2), bench=None, assets=None, progress=None):
    """Semantic-aware vs plain multinomial sampling on one trained text model per seed."""
    assets = assets or T2MAssets(bench, progress)
    out = {"semantic": [], "multinomial": []}
    for seed in seeds:
        model, _ = train_t2m(assets, seed)
        for kind in ("semantic", "multinomial"):
            out[kind].append(evaluate_t2m(assets, model, kind, seed))
            if progress:
                progress(f"seed {seed} {kind}: {out[kind][-1]}")
    for kind in ("semantic", "multinomial"):
        out[f"median_{kind}_top1"] = _median([r["top1"] for r in out[kind]])
        out[f"median_{kind}_mm"] = _median([r["mm"] for r in out[kind]])
    return out


def seme_ablation(seeds=(0, 1, 2), bench=None, assets=None, lam=0.1, progress=None):
    """Text model trained with and without the semantic-enhancement term."""
    assets = assets or T2MAssets(bench, progress)
    out = {"with": [], "without": []}
    for seed in seeds:
        for key, value in (("with", lam), ("without", 0.0)):
            model, _ = train_t2m(assets, seed, lambda_sem=value)
            out[key].append(evaluate_t2m(assets, model, "multinomial", seed))
            if progress:
                progress(f"seed {seed} lambda_sem={value}: {out[key][-1]}")
    for key in ("with", "without"):
        out[f"median_{key}_top1"] = _median([r["top1"] for r in out[key]])
    return out
