"""Command line pipeline: data -> tokenizers -> prior -> sequence model -> generate -> eval.

Every stage reads a TOML (or JSON) run config, writes its artifacts under
``run.out`` and records a manifest with the config hash, the seed and
content hashes of its inputs.
"""
import argparse
import copy
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MissingArtifactError, PolymotionError
from .numerics.checkpoint import config_hash

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("polymotion")

MODALITIES = ("text", "music", "speech")
STAGE_ORDER = ("text", "music", "speech")
PARTS_FOR = {"text": ("torso",), "music": ("torso",), "speech": ("torso", "lhand", "rhand")}
TASKS = {"t2m": "text", "m2m": "music", "s2m": "speech"}

# ---------------------------------------------------------------------------
# config


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def profile_path(name):
    return resources.files("polymotion") / "profiles" / f"{name}.toml"


def load_config(path=None, profile=None):
    """Parse a run config; ``profile`` names a bundled base it is merged onto."""
    cfg = {}
    if profile:
        p = profile_path(profile)
        if not p.is_file():
            raise ConfigError(f"unknown profile {profile!r}")
        cfg = tomllib.loads(p.read_text())
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        try:
            user = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: cannot parse config ({exc})") from None
        if "profile" in user and not profile:
            cfg = load_config(profile=user.pop("profile"))
        cfg = _merge(cfg, user)
    if not cfg:
        raise ConfigError("no config given; pass --config <file> or --profile smoke")
    run = cfg.get("run", {})
    if "seed" not in run:
        raise ConfigError("run.seed is mandatory")
    if "out" not in run:
        raise ConfigError("run.out (output directory) is mandatory")
    return cfg


def _section(cfg, *keys):
    cur = cfg
    for k in keys:
        cur = cur.get(k, {}) if isinstance(cur, dict) else {}
    return dict(cur)


def vq_config(cfg, part, modality):
    from .vqvae import VQConfig

    body = {k: v for k, v in _section(cfg, "vqvae").items() if not isinstance(v, dict)}
    body = _merge(body, _section(cfg, "vqvae", part))
    body = _merge(body, _section(cfg, "vqvae", f"{part}_{modality}"))
    body.setdefault("seed", cfg["run"]["seed"])
    return VQConfig.from_dict({**body, "part": part})


def seq_config(cfg):
    from .seqgen import SeqConfig

    body = {k: v for k, v in _section(cfg, "seqgen").items() if not isinstance(v, dict)}
    body.setdefault("seed", cfg["run"]["seed"])
    return SeqConfig.from_dict(body)


def prior_config(cfg, dim):
    from .seqgen import PriorConfig

    body = _section(cfg, "prior")
    body.setdefault("seed", cfg["run"]["seed"])
    body["dim"] = dim
    return PriorConfig.from_dict(body)


def encoder_config(cfg, modality):
    return _section(cfg, "encoders", modality)


def policy_for(cfg, modality, kind, seed):
    from .sampling import SamplerPolicy

    s = _section(cfg, "sampling")
    per = _section(cfg, "sampling", modality)
    temp = per.get("temperature", s.get("temperature", 1.0))
    rw = per.get("reweight_temperature", s.get("reweight_temperature", 1.0))
    return SamplerPolicy(kind, temperature=temp, reweight_temperature=rw, seed=seed)


# ---------------------------------------------------------------------------
# paths and manifests


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg["run"]["out"])
        self.seed = int(cfg["run"]["seed"])

    def data_dir(self, modality):
        return self.out / "data" / modality

    def vq_path(self, part, modality):
        return self.out / f"vq_{part}_{modality}.ckpt"

    @property
    def prior_path(self):
        return self.out / "prior.ckpt"

    @property
    def seq_path(self):
        return self.out / "seq.ckpt"

    def gen_dir(self, modality):
        return self.out / "gen" / modality

    @property
    def eval_dir(self):
        return self.out / "eval_models"

    def manifest_path(self, stage):
        return self.out / "manifests" / f"{stage}.json"

    def require(self, path, stage_hint):
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"{path} is missing; run `polymotion {stage_hint}` first")
        return path

    def write_manifest(self, stage, section, inputs, outputs, extra=None):
        body = {
            "stage": stage,
            "version": __version__,
            "seed": self.seed,
            "config_hash": config_hash(section),
            "inputs": {str(p): content_hash(p) for p in inputs},
            "outputs": [str(p) for p in outputs],
        }
        body.update(extra or {})
        path = self.manifest_path(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=1, sort_keys=True))
        return path


def content_hash(path):
    """sha256 over a file, or over every file below a directory."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        if f.suffix == ".ckpt":
            # archives embed timestamps; hash their payload instead
            from .numerics.checkpoint import load_checkpoint, params_hash

            tensors, manifest = load_checkpoint(f)
            h.update(params_hash(tensors).encode())
            h.update(manifest.get("config_hash", "").encode())
        else:
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# stages


def cmd_synth_data(run, args):
    from .motion import SynthSpec, synth_dataset, write_dataset

    mods = [args.modality] if args.modality else list(_section(run.cfg, "data"))
    if not mods:
        raise ConfigError("config has no [data.<modality>] sections")
    for m in mods:
        spec_cfg = _section(run.cfg, "data", m)
        if not spec_cfg:
            raise ConfigError(f"config has no [data.{m}] section")
        spec = SynthSpec.from_dict({"modality": m, **spec_cfg})
        samples = synth_dataset(spec, run.seed)
        root = run.data_dir(m)
        write_dataset(samples, root)
        run.write_manifest(f"synth-data-{m}", spec_cfg, [], [root], {"samples": len(samples)})
        print(f"{m}: wrote {len(samples)} samples to {root}")
    return 0


def _load_split(run, modality, split):
    from .motion import read_dataset

    root = run.require(run.data_dir(modality) / "manifest.json", f"synth-data --modality {modality}").parent
    return read_dataset(root, split)


def part_arrays(samples, part):
    return [s.clip.part(part) for s in samples]


def cmd_train_vq(run, args):
    from .vqvae import build_vqvae, train_vqvae

    part, m = args.part, args.modality
    if part not in PARTS_FOR[m]:
        raise ConfigError(f"modality {m!r} does not generate part {part!r}")
    cfg = vq_config(run.cfg, part, m)
    train = _load_split(run, m, "train")
    test = _load_split(run, m, "test")
    arrays = part_arrays(train, part)
    model = build_vqvae(cfg, arrays[0].shape[1])

    def progress(step, trace):
        held = trace.held_out[-1] if trace.held_out else {}
        log.info("vq %s/%s step %d total %.4f act %.2f held-out %s", part, m, step,
                 trace.terms["total"][-1], trace.activation_rate[-1], held)

    trace = train_vqvae(model, arrays, held_out=part_arrays(test, part) or None, progress=progress)
    path = run.vq_path(part, m)
    model.save(path, extra={"trace": trace.to_dict()})
    run.write_manifest(f"train-vq-{part}-{m}", cfg.to_dict(), [run.data_dir(m)], [path])
    final = trace.held_out[-1] if trace.held_out else {}
    print(f"vq {part}/{m}: saved {path}; held-out {final}")
    return 0


def cmd_train_prior(run, args):
    from .seqgen import body_array, pretrain_motion_prior

    mods = [m for m in MODALITIES if run.data_dir(m).exists()]
    if not mods:
        raise MissingArtifactError("no datasets found; run `polymotion synth-data` first")
    arrays = [body_array(s.clip) for m in mods for s in _load_split(run, m, "train")]
    cfg = prior_config(run.cfg, seq_config(run.cfg).dim)
    prior, trace = pretrain_motion_prior(arrays, cfg,
                                         progress=lambda step, tr: log.info("prior step %d loss %.5f", *tr[-1]))
    prior.save(run.prior_path, extra={"trace": trace})
    run.write_manifest("train-prior", cfg.to_dict(), [run.data_dir(m) for m in mods], [run.prior_path])
    print(f"prior: saved {run.prior_path}; train recon {prior.recon_error(arrays):.5f}")
    return 0


def _seq_samples(run, model, modality, prior):
    from .seqgen import SeqSample, body_array
    from .vqvae import load_vqvae

    train = _load_split(run, modality, "train")
    vqs = {b: load_vqvae(run.require(run.vq_path(b, modality), f"train-vq --part {b} --modality {modality}"))[0]
           for b in PARTS_FOR[modality]}
    aux = _section(run.cfg, "encoders", modality).get("aux_size") if modality == "speech" else None
    emb = prior.embed([body_array(s.clip) for s in train]) if prior is not None else [None] * len(train)
    out = []
    for s, e in zip(train, emb):
        tokens = {}
        for b, vq in vqs.items():
            a = part_arrays([s], b)[0]
            a = a[: len(a) // vq.factor * vq.factor]
            tokens[b] = vq.encode_tokens(a)[: model.cfg.max_len]
        aux_id = s.condition.get("speaker") if aux else None
        feats = model.cond.features(modality, s.condition)
        out.append(SeqSample(modality, feats, tokens, aux_id=aux_id, prior_embedding=e))
    return out, vqs


def _modality_spec(run, modality):
    enc = encoder_config(run.cfg, modality)
    aux = enc.pop("aux_size", None)
    return enc, aux


def cmd_train_seq(run, args):
    from .seqgen import MotionPrior, SeqModel, build_seq_model, train_seq

    stage = args.stage
    cfg = seq_config(run.cfg)
    done = []
    if run.seq_path.exists():
        model, manifest = SeqModel.load(run.seq_path)
        done = manifest["extra"].get("stages", [])
    else:
        if stage != STAGE_ORDER[0]:
            raise MissingArtifactError(f"{run.seq_path} is missing; run `polymotion train-seq --stage "
                                       f"{STAGE_ORDER[0]}` first")
        model = build_seq_model(cfg, {})
    if stage in done:
        raise ConfigError(f"stage {stage!r} already trained into {run.seq_path}")
    expected = STAGE_ORDER[len(done)]
    if stage != expected:
        raise ConfigError(f"stage {stage!r} out of order; next stage is {expected!r}")
    prior = None
    if cfg.lambda_sem > 0:
        prior, _ = MotionPrior.load(run.require(run.prior_path, "train-prior"))
    enc, aux = _modality_spec(run, stage)
    model.add_modality(stage, enc, aux)
    samples, vqs = _seq_samples(run, model, stage, prior)
    for b, vq in vqs.items():
        model.add_head(b, stage, vq.codebook)
    replay = []
    for m in done:
        replay += _seq_samples(run, model, m, prior)[0]
    steps = _section(run.cfg, "seqgen", "stages").get(stage)
    hashes_before = {f"{b}_{p}": model.head_hash(b, p) for b, p in model.registry.pairs() if p != stage}

    def progress(step, trace):
        log.info("seq %s step %d %s", stage, step, {k: round(v[-1], 4) for k, v in trace.terms.items()})

    trace = train_seq(model, samples, cfg, pairs=[(b, stage) for b in vqs], replay_samples=replay,
                      steps=steps, progress=progress)
    for key, h in hashes_before.items():
        b, p = key.split("_", 1)
        if model.head_hash(b, p) != h:
            raise PolymotionError(f"head {key} changed during stage {stage}")
    model.save(run.seq_path, extra={"stages": done + [stage], "trace_" + stage: trace.to_dict()})
    hashes = {f"{b}_{p}": model.head_hash(b, p) for b, p in model.registry.pairs()}
    inputs = [run.data_dir(stage)] + [run.vq_path(b, stage) for b in vqs]
    if prior is not None:
        inputs.append(run.prior_path)
    run.write_manifest(f"train-seq-{stage}", cfg.to_dict(), inputs, [run.seq_path], {"head_hashes": hashes})
    final = {k: round(v[-1], 4) for k, v in trace.terms.items()}
    print(f"seq stage {stage}: {final}; head hashes {hashes}")
    return 0


def _payload(modality, value):
    if modality == "text":
        return value
    p = Path(value)
    if not p.exists():
        raise MissingArtifactError(f"condition file {p} does not exist")
    return {"signal": np.load(p)}


def _decode(run, modality, tokens, vqs, hand_dim, fps):
    from .motion import MotionClip

    parts = {}
    for b, vq in vqs.items():
        tk = tokens.get(b)
        if tk is None or len(tk) == 0:
            tk = np.zeros(1, dtype=np.int64)
        parts[b] = vq.decode_tokens(tk)
    n = min(len(v) for v in parts.values())
    torso = parts["torso"][:n]
    lh = parts.get("lhand", np.zeros((n, hand_dim)))[:n]
    rh = parts.get("rhand", np.zeros((n, hand_dim)))[:n]
    return MotionClip(fps, torso, lh, rh)


def _generation_setup(run, modality):
    from .seqgen import SeqModel
    from .vqvae import load_vqvae

    model, _ = SeqModel.load(run.require(run.seq_path, f"train-seq --stage {modality}"))
    if modality not in model.cond.modalities:
        raise MissingArtifactError(f"sequence model has no {modality} stage; "
                                   f"run `polymotion train-seq --stage {modality}` first")
    vqs = {b: load_vqvae(run.require(run.vq_path(b, modality), f"train-vq --part {b} --modality {modality}"))[0]
           for b in PARTS_FOR[modality]}
    data = _section(run.cfg, "data", modality)
    return model, vqs, data.get("hand_dim", 12), data.get("fps", 20)


def _tokens_for(vq, frames):
    return max(1, -(-int(frames) // vq.factor))


def cmd_generate(run, args):
    from .motion import SynthSample, write_dataset, write_motion
    from .seqgen import GenerationRequest, generate_batch

    m = args.modality
    model, vqs, hand_dim, fps = _generation_setup(run, m)
    factor = vqs["torso"].factor
    if args.from_data:
        test = _load_split(run, m, "test")
        repeats = args.repeats or _section(run.cfg, "eval").get("repeats", 8)
        policy = policy_for(run.cfg, m, args.sampler, args.seed)
        reqs, owners = [], []
        for s in test:
            cap = min(model.cfg.max_len, _tokens_for(vqs["torso"], s.clip.n_frames))
            feats = model.cond.features(m, s.condition)
            for _ in range(repeats):
                reqs.append(GenerationRequest(m, length=cap, policy=policy, feats=feats,
                                              aux_id=s.condition.get("speaker") if m == "speech" and
                                              model.cond.aux.get(m) else None,
                                              min_length=max(1, cap // 2)))
                owners.append(s)
        rng = np.random.default_rng([args.seed, 11])
        outs = generate_batch(model, reqs, rng)
        samples = []
        for k, (o, s) in enumerate(zip(outs, owners)):
            clip = _decode(run, m, o, vqs, hand_dim, fps)
            cond = {key: v for key, v in s.condition.items()}
            cond["source"] = s.id
            samples.append(SynthSample(f"{s.id}_g{k % repeats}", cond, clip, "test"))
        out = Path(args.out) if args.out else run.gen_dir(m)
        write_dataset(samples, out)
        run.write_manifest(f"generate-{m}", {"sampler": args.sampler, "seed": args.seed, "repeats": repeats},
                           [run.seq_path] + [run.vq_path(b, m) for b in vqs], [out])
        print(f"{m}: generated {len(samples)} clips into {out}")
        return 0
    if args.input is None:
        raise ConfigError("generate needs --input (or --from-data)")
    if args.len <= 0:
        from .errors import InputError

        raise InputError("--len must be positive")
    cap = min(model.cfg.max_len, _tokens_for(vqs["torso"], args.len))
    req = GenerationRequest(m, payload=_payload(m, args.input), length=cap,
                            policy=policy_for(run.cfg, m, args.sampler, args.seed), aux_id=args.aux_id)
    out = generate_batch(model, [req], np.random.default_rng([args.seed, 11]))[0]
    clip = _decode(run, m, out, vqs, hand_dim, fps)
    target = Path(args.out or run.out / f"generated_{m}.mot")
    write_motion(clip, target)
    lengths = {b: len(v) for b, v in out.items()}
    print(f"wrote {target}: {clip.n_frames} frames ({clip.n_frames // factor} tokens requested cap {cap}); "
          f"tokens {lengths}")
    return 0


# evaluation


def _evaluators(run, task, ref_train):
    """Train (or load cached) evaluation models on the reference training split."""
    from .conditions import SpeechEncoder, TextEncoder
    from .evalsuite import (AlignConfig, AlignmentModel, FeatureExtractor, IdConfig, train_alignment_model,
                            train_id_model)
    from .seqgen import MotionPrior, PriorConfig

    ev = _section(run.cfg, "eval")
    view = "body" if task == "s2m" else "torso"
    prior_cfg = PriorConfig.from_dict({**_section(run.cfg, "eval", "features"), "seed": run.seed})
    key = config_hash({"task": task, "ref": [s.id for s in ref_train], "prior": prior_cfg.to_dict(),
                       "align": _section(run.cfg, "eval", "align"), "id": _section(run.cfg, "eval", "id")})
    cache = run.eval_dir / f"{task}_{key}"
    cache.mkdir(parents=True, exist_ok=True)
    fx_path = cache / "features.ckpt"
    if fx_path.exists():
        fx = FeatureExtractor(MotionPrior.load(fx_path)[0], view)
    else:
        fx = FeatureExtractor.train([s.clip for s in ref_train], view, prior_cfg)
        fx.prior.save(fx_path)
    models = {"features": fx}
    if task == "t2m":
        path = cache / "align.ckpt"
        if path.exists():
            models["align"] = AlignmentModel.load(path)[0]
        else:
            enc = TextEncoder(**{"dim": 32, "seed": 1, **_section(run.cfg, "eval", "text_encoder")})
            acfg = AlignConfig.from_dict({**_section(run.cfg, "eval", "align"), "seed": run.seed})
            models["align"], _ = train_alignment_model([s.clip for s in ref_train],
                                                       [s.condition for s in ref_train], fx.prior, enc, acfg)
            models["align"].save(path)
    if task == "s2m":
        icfg = IdConfig.from_dict({**_section(run.cfg, "eval", "id"), "seed": run.seed})
        ids = [int(s.condition["speaker"]) for s in ref_train]
        n_ids = int(ev.get("n_ids", max(ids) + 1))
        models["id"], _ = train_id_model([s.clip for s in ref_train], ids, [s.condition for s in ref_train],
                                         fx.prior, SpeechEncoder(), n_ids, icfg)
    return models


def _condition_key(task, cond):
    if task == "t2m":
        return cond["text"]
    if task == "m2m":
        return cond.get("source", cond.get("genre"))
    return cond.get("source", cond.get("speaker"))


def evaluate_task(run, task, gen_dir, ref_dir):
    from .evalsuite import beat_alignment, diversity, fid, multimodality, r_precision
    from .motion import read_dataset

    ev = _section(run.cfg, "eval")
    seeds = ev.get("seeds", [0, 1, 2])
    ref_train = read_dataset(ref_dir, "train")
    ref_test = read_dataset(ref_dir, "test")
    gen = read_dataset(gen_dir)
    if not gen:
        raise MissingArtifactError(f"{gen_dir}: no generated samples")
    models = _evaluators(run, task, ref_train)
    fx = models["features"]
    real_f = fx([s.clip for s in ref_test])
    gen_f = fx([s.clip for s in gen])
    keys = [_condition_key(task, s.condition) for s in gen]
    groups = {}
    for k, f in zip(keys, gen_f):
        groups.setdefault(str(k), []).append(f)
    per_seed = {}

    def add(name, value):
        per_seed.setdefault(name, []).append(float(value))

    n_pairs = ev.get("div_pairs", 300)
    for seed in seeds:
        add("fid", fid(real_f, gen_f))
        add("diversity", diversity(gen_f, n_pairs=n_pairs, seed=seed, ids=[s.id for s in gen]))
        if any(len(v) > 1 for v in groups.values()):
            add("mm", multimodality({k: np.stack(v) for k, v in groups.items()},
                                    n_pairs=ev.get("mm_pairs", 20), seed=seed))
        if task == "t2m":
            align = models["align"]
            pool = ev.get("pool", 32)
            labels = sorted({s.condition["text"] for s in gen})
            zl = align.embed_condition(labels)
            zm = align.embed_motion([s.clip for s in gen])
            # one generated clip per distinct label per draw
            rng = np.random.default_rng([seed, 5])
            pick = []
            for lab in labels:
                idx = [i for i, s in enumerate(gen) if s.condition["text"] == lab]
                pick.append(idx[rng.integers(len(idx))])
            res = r_precision(zm[pick], zl, pool=min(pool, len(labels)), seed=seed)
            for k, v in res.items():
                add(f"r_precision_top{k}", v)
        if task == "m2m":
            sigma = ev.get("bas_sigma", 0.1)
            add("bas", np.mean([beat_alignment(s.clip, s.condition["beats"][s.condition["beats"] <
                                                                              s.clip.duration], sigma)
                                for s in gen if len(s.condition["beats"])]))
        if task == "s2m":
            ids = [int(s.condition["speaker"]) for s in gen]
            res = models["id"].score([s.clip for s in gen], ids)
            add("id_acc", res["acc"])
            add("i2i", res["i2i"])
    chash = config_hash(_section(run.cfg, "eval"))
    report = {}
    for name, vals in per_seed.items():
        report[f"{task}.{name}"] = {"value": float(np.mean(vals)), "std": float(np.std(vals)),
                                    "config_hash": chash}
    report[f"{task}.features_hash"] = {"value": fx.hash, "std": 0.0, "config_hash": chash}
    return report


def cmd_eval(run, args):
    m = TASKS[args.task]
    gen = Path(args.gen) if args.gen else run.gen_dir(m)
    ref = Path(args.ref) if args.ref else run.data_dir(m)
    run.require(gen / "manifest.json", f"generate --modality {m} --from-data")
    run.require(ref / "manifest.json", f"synth-data --modality {m}")
    report = evaluate_task(run, args.task, gen, ref)
    path = Path(args.report) if args.report else run.out / "report.json"
    existing = json.loads(path.read_text()) if path.exists() else {}
    existing.update(report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(existing, indent=1, sort_keys=True))
    run.write_manifest(f"eval-{args.task}", _section(run.cfg, "eval"), [gen, ref], [path])
    for k, v in sorted(report.items()):
        val = v["value"]
        print(f"{k:28s} {val:.4f} ± {v['std']:.4f}" if isinstance(val, float) else f"{k:28s} {val}")
    return 0


# ---------------------------------------------------------------------------
# inspect and ablate


def inspect_checkpoint(path):
    from .numerics.checkpoint import load_checkpoint

    tensors, manifest = load_checkpoint(path)
    lines = [f"{path}: kind={manifest.get('kind')} version={manifest.get('version')} "
             f"seed={manifest.get('seed')} config_hash={manifest.get('config_hash')}"]
    total = 0
    for name in sorted(tensors):
        arr = tensors[name]
        total += arr.size
        lines.append(f"  {name:48s} {str(tuple(arr.shape)):>14s}")
    lines.append(f"  {len(tensors)} tensors, {total} values")
    extra = manifest.get("extra", {})
    cb = extra.get("codebook")
    if cb:
        counts = np.asarray(cb["counts"], dtype=np.int64)
        rates = counts / counts.sum() if counts.sum() else np.zeros(len(counts))
        lines.append(f"  codebook: K={len(counts)} active={int((counts > 0).sum())} "
                     f"selections={int(counts.sum())} steps_since_reinit={cb.get('steps_since_reinit', 0)}")
        order = np.argsort(-rates, kind="stable")[:5]
        lines.append("  top tokens: " + ", ".join(f"{t}:{rates[t]:.3f}" for t in order))
        lines.append(f"  max rate {rates.max() if len(rates) else 0:.4f}")
        hist = cb.get("history", [])
        lines.append(f"  re-init history: {len(hist)} passes" +
                     (f", last {hist[-3:]}" if hist else ""))
    if "head_hashes" in extra:
        for k, v in sorted(extra["head_hashes"].items()):
            lines.append(f"  head {k}: {v}")
    return "\n".join(lines)


def cmd_inspect(run, args):
    print(inspect_checkpoint(args.checkpoint))
    return 0


def cmd_ablate(run, args):
    from . import ablation

    seeds = tuple(args.seeds)
    say = (lambda msg: print("  " + msg, flush=True))
    if args.which == "reinit":
        res = ablation.reinit_ablation(seeds, progress=say)
        verdict = res["ratio"] >= 1.5
        line = f"activated tokens with/without re-init: {res['median_with']} / {res['median_without']}"
    elif args.which == "two-stage":
        res = ablation.two_stage_ablation(seeds, progress=say)
        verdict = res["median_two_stage"] < res["median_single_stage"]
        line = f"held-out mse two-stage/single-stage: {res['median_two_stage']:.4f} / {res['median_single_stage']:.4f}"
    elif args.which == "sas":
        res = ablation.sas_ablation(seeds, progress=say)
        verdict = res["median_semantic_top1"] >= res["median_multinomial_top1"]
        line = (f"R-top1 semantic/multinomial: {res['median_semantic_top1']:.3f} / "
                f"{res['median_multinomial_top1']:.3f}; MM {res['median_semantic_mm']:.4f} / "
                f"{res['median_multinomial_mm']:.4f}")
    else:
        res = ablation.seme_ablation(seeds, progress=say)
        verdict = res["median_with_top1"] >= res["median_without_top1"]
        line = f"R-top1 with/without SemE: {res['median_with_top1']:.3f} / {res['median_without_top1']:.3f}"
    print(f"{args.which}: {line} -> {'expected direction' if verdict else 'direction NOT reproduced'}")
    if args.json:
        Path(args.json).write_text(json.dumps(res, indent=1, default=float))
    return 0


def cmd_pipeline(run, args):
    """Every stage in order for the modalities configured under [data]."""
    mods = [m for m in STAGE_ORDER if m in _section(run.cfg, "data")]
    ns = argparse.Namespace
    cmd_synth_data(run, ns(modality=None))
    for m in mods:
        for b in PARTS_FOR[m]:
            cmd_train_vq(run, ns(part=b, modality=m))
    if seq_config(run.cfg).lambda_sem > 0:
        cmd_train_prior(run, ns())
    if run.seq_path.exists():
        run.seq_path.unlink()
    for m in mods:
        cmd_train_seq(run, ns(stage=m))
    report = run.out / "report.json"
    if report.exists():
        report.unlink()
    sampler = _section(run.cfg, "sampling").get("kind", "semantic")
    for m in mods:
        cmd_generate(run, ns(modality=m, from_data=True, repeats=None, sampler=sampler, seed=run.seed,
                             out=None, input=None, len=0, aux_id=None))
        task = {v: k for k, v in TASKS.items()}[m]
        cmd_eval(run, ns(task=task, gen=None, ref=None, report=str(report)))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="polymotion", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", help="TOML or JSON run config")
        sp.add_argument("--profile", help="bundled base profile (smoke, desk)")
        sp.set_defaults(needs_config=required)
        return sp

    sp = with_config(sub.add_parser("synth-data", help="generate synthetic datasets"))
    sp.add_argument("--modality", choices=MODALITIES)
    sp.set_defaults(func=cmd_synth_data)

    sp = with_config(sub.add_parser("train-vq", help="train one part tokenizer"))
    sp.add_argument("--part", choices=("torso", "lhand", "rhand"), required=True)
    sp.add_argument("--modality", choices=MODALITIES, required=True)
    sp.set_defaults(func=cmd_train_vq)

    sp = with_config(sub.add_parser("train-prior", help="pretrain the motion autoencoder prior"))
    sp.set_defaults(func=cmd_train_prior)

    sp = with_config(sub.add_parser("train-seq", help="train one domain stage of the sequence model"))
    sp.add_argument("--stage", choices=STAGE_ORDER, required=True)
    sp.set_defaults(func=cmd_train_seq)

    sp = with_config(sub.add_parser("generate", help="sample motion for a condition"))
    sp.add_argument("--modality", choices=MODALITIES, required=True)
    sp.add_argument("--input", help="text, or a .npy audio signal for music/speech")
    sp.add_argument("--len", type=int, default=120, help="target length in frames")
    sp.add_argument("--sampler", choices=("greedy", "multinomial", "semantic"), default="semantic")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--aux-id", type=int, dest="aux_id", help="speaker id for speech")
    sp.add_argument("--out", help="output .mot file (or directory with --from-data)")
    sp.add_argument("--from-data", action="store_true", dest="from_data",
                    help="generate for every test condition of the dataset")
    sp.add_argument("--repeats", type=int, help="clips per condition with --from-data")
    sp.set_defaults(func=cmd_generate)

    sp = with_config(sub.add_parser("eval", help="score generated motion against reference data"))
    sp.add_argument("--task", choices=tuple(TASKS), required=True)
    sp.add_argument("--gen", help="generated dataset directory")
    sp.add_argument("--ref", help="reference dataset directory")
    sp.add_argument("--report", help="report JSON (merged if it exists)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="summarise a checkpoint")
    sp.add_argument("checkpoint")
    sp.set_defaults(func=cmd_inspect, needs_config=False)

    sp = sub.add_parser("ablate", help="desk-scale ablation harnesses")
    sp.add_argument("which", choices=("reinit", "two-stage", "seme", "sas"))
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--json", help="write raw results here")
    sp.set_defaults(func=cmd_ablate, needs_config=False)

    sp = with_config(sub.add_parser("pipeline", help="run every stage end to end"))
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        run = None
        if args.needs_config:
            cfg = load_config(args.config, args.profile)
            run = Run(cfg)
            run.out.mkdir(parents=True, exist_ok=True)
        return args.func(run, args)
    except PolymotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
