import json
import zipfile

import numpy as np
import pytest

from polymotion import cli
from polymotion.codebook import activation_report
from polymotion.errors import MissingArtifactError, VersionError
from polymotion.motion import SynthSpec, synth_dataset
from polymotion.numerics.checkpoint import load_checkpoint
from polymotion.vqvae import VQConfig, build_vqvae, load_vqvae, train_vqvae


def write_cfg(tmp_path, body, name="run.toml"):
    path = tmp_path / name
    path.write_text(body)
    return str(path)


TINY = """
profile = "smoke"
[run]
seed = 3
out = "{out}"
"""


@pytest.fixture
def tiny(tmp_path):
    return write_cfg(tmp_path, TINY.format(out=tmp_path / "run"))


def test_missing_seed_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, '[run]\nout = "x"\n')
    assert cli.main(["synth-data", "--config", cfg]) == 2
    assert "run.seed" in capsys.readouterr().err


def test_bad_toml_and_missing_file(tmp_path):
    assert cli.main(["synth-data", "--config", write_cfg(tmp_path, "[run\nseed=")]) == 2
    assert cli.main(["synth-data", "--config", str(tmp_path / "nope.toml")]) == 2
    assert cli.main(["synth-data", "--profile", "nope"]) == 2


def test_json_config_equivalent(tmp_path):
    toml = cli.load_config(write_cfg(tmp_path, TINY.format(out="o")))
    body = {"profile": "smoke", "run": {"seed": 3, "out": "o"}}
    js = cli.load_config(write_cfg(tmp_path, json.dumps(body), "run.json"))
    assert toml == js


def test_per_pair_vq_overrides():
    cfg = cli.load_config(profile="smoke")
    cfg["vqvae"]["lhand"] = {"k": 8}
    cfg["vqvae"]["lhand_speech"] = {"steps": 7}
    c = cli.vq_config(cfg, "lhand", "speech")
    assert (c.part, c.k, c.steps, c.dim) == ("lhand", 8, 7, cfg["vqvae"]["dim"])
    assert cli.vq_config(cfg, "torso", "text").k == cfg["vqvae"]["k"]


def test_missing_upstream_names_stage(tiny, capsys):
    assert cli.main(["train-vq", "--part", "torso", "--modality", "text", "--config", tiny]) == 3
    assert "synth-data --modality text" in capsys.readouterr().err
    assert cli.main(["train-seq", "--stage", "music", "--config", tiny]) == 3
    assert "train-seq --stage text" in capsys.readouterr().err
    assert cli.main(["eval", "--task", "t2m", "--config", tiny]) == 3
    assert "generate --modality text" in capsys.readouterr().err


def test_part_modality_mismatch(tiny):
    assert cli.main(["train-vq", "--part", "lhand", "--modality", "text", "--config", tiny]) == 2


def test_stage_manifest_records_hashes(tiny, tmp_path):
    assert cli.main(["synth-data", "--modality", "text", "--config", tiny]) == 0
    assert cli.main(["train-vq", "--part", "torso", "--modality", "text", "--config", tiny]) == 0
    out = tmp_path / "run"
    man = json.loads((out / "manifests" / "train-vq-torso-text.json").read_text())
    assert man["seed"] == 3 and len(man["config_hash"]) == 16
    data_key = str(out / "data" / "text")
    assert man["inputs"][data_key] == cli.content_hash(out / "data" / "text")
    assert (out / "vq_torso_text.ckpt").exists()
    # regenerating the same data leaves the content hash unchanged
    before = cli.content_hash(out / "data" / "text")
    assert cli.main(["synth-data", "--modality", "text", "--config", tiny]) == 0
    assert cli.content_hash(out / "data" / "text") == before
    # the vq manifest hash survives a rewrite of the archive
    h = cli.content_hash(out / "vq_torso_text.ckpt")
    model, _ = load_vqvae(out / "vq_torso_text.ckpt")
    model.save(out / "vq_torso_text.ckpt")
    assert cli.content_hash(out / "vq_torso_text.ckpt") == h


def test_staging_out_of_order(tiny):
    for m in ("text", "music"):
        assert cli.main(["synth-data", "--modality", m, "--config", tiny]) == 0
        assert cli.main(["train-vq", "--part", "torso", "--modality", m, "--config", tiny]) == 0
    assert cli.main(["train-prior", "--config", tiny]) == 0
    assert cli.main(["train-seq", "--stage", "text", "--config", tiny]) == 0
    assert cli.main(["train-seq", "--stage", "text", "--config", tiny]) == 2
    assert cli.main(["train-seq", "--stage", "speech", "--config", tiny]) == 2


def _vq(tmp_path, steps):
    data = synth_dataset(SynthSpec("text", size=4, length_range=(32, 32)), 0)
    cfg = VQConfig(part="torso", k=16, dim=8, width=8, unet_width=8, levels=1, steps=steps, batch=2,
                   window=16, log_every=10)
    model = build_vqvae(cfg, data[0].clip.torso.shape[1])
    if steps:
        train_vqvae(model, [s.clip.torso for s in data])
    path = tmp_path / f"vq{steps}.ckpt"
    model.save(path)
    return model, path


def test_inspect_fresh_codebook(tmp_path, capsys):
    _, path = _vq(tmp_path, 0)
    assert cli.main(["inspect", str(path)]) == 0
    text = capsys.readouterr().out
    assert "active=0" in text and "selections=0" in text and "max rate 0.0000" in text
    assert "codebook.embeddings" in text and "(16, 8)" in text


def test_inspect_matches_activation_report(tmp_path):
    model, path = _vq(tmp_path, 25)
    text = cli.inspect_checkpoint(path)
    top = activation_report(model.codebook)[:5]
    assert "top tokens: " + ", ".join(f"{t}:{r:.3f}" for t, r in top) in text
    assert f"re-init history: {len(model.codebook.history)} passes" in text


def test_inspect_unknown_version(tmp_path, capsys):
    _, path = _vq(tmp_path, 0)
    with zipfile.ZipFile(path) as zf:
        items = {n: zf.read(n) for n in zf.namelist()}
    man = json.loads(items["manifest.json"])
    man["version"] = 99
    items["manifest.json"] = json.dumps(man).encode()
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        for n, b in items.items():
            zf.writestr(n, b)
    with pytest.raises(VersionError):
        load_checkpoint(bad)
    assert cli.main(["inspect", str(bad)]) == 3
    assert "version" in capsys.readouterr().err
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    assert cli.main(["inspect", str(tmp_path / "junk.ckpt")]) == 3


def test_generate_single_clip(tiny, tmp_path):
    for b in ("text",):
        assert cli.main(["synth-data", "--modality", b, "--config", tiny]) == 0
    assert cli.main(["train-vq", "--part", "torso", "--modality", "text", "--config", tiny]) == 0
    assert cli.main(["train-prior", "--config", tiny]) == 0
    assert cli.main(["train-seq", "--stage", "text", "--config", tiny]) == 0
    out = tmp_path / "clip.mot"
    args = ["generate", "--modality", "text", "--input", "walk forward normal", "--len", "24",
            "--sampler", "multinomial", "--seed", "5", "--out", str(out), "--config", tiny]
    assert cli.main(args) == 0
    from polymotion.motion import read_motion

    clip = read_motion(out)
    first = clip.torso.copy()
    assert 1 <= clip.n_frames <= 24
    assert cli.main(args) == 0
    np.testing.assert_array_equal(read_motion(out).torso, first)
    assert cli.main(args[:5] + ["--len", "0"] + args[7:]) == 3


def test_missing_artifact_is_data_error():
    assert issubclass(MissingArtifactError, FileNotFoundError)
    assert MissingArtifactError("x").exit_code == 3
