"""Checkpoint archive.

A checkpoint is a zip archive holding ``manifest.json`` and one raw
little-endian float64 payload per parameter under ``tensors/<name>``.
The manifest records the format version, a hash of the model config, the
RNG seed, each tensor's shape, and arbitrary JSON-serialisable extra state
(codebook counters, vocabularies, training traces).
"""
import hashlib
import json
import zipfile

import numpy as np

from ..errors import CheckpointFormatError, VersionError

FORMAT_VERSION = 1


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def params_hash(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, tensors, *, kind, config=None, seed=None, extra=None):
    manifest = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "seed": seed,
        "tensors": {},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            manifest["tensors"][name] = {"shape": list(arr.shape)}
            zf.writestr(f"tensors/{name}", arr.tobytes())
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path):
    """Return ``(tensors, manifest)``."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointFormatError(f"{path}: not a checkpoint archive ({exc})") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointFormatError(f"{path}: missing manifest.json") from None
        except (ValueError, zipfile.BadZipFile) as exc:
            raise CheckpointFormatError(f"{path}: unreadable manifest ({exc})") from None
        version = manifest.get("version")
        if version != FORMAT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version!r}")
        tensors = {}
        for name, meta in manifest.get("tensors", {}).items():
            shape = tuple(meta["shape"])
            try:
                raw = zf.read(f"tensors/{name}")
            except (KeyError, zipfile.BadZipFile) as exc:
                raise CheckpointFormatError(f"{path}: tensor {name} unreadable ({exc})") from None
            expected = int(np.prod(shape, dtype=np.int64)) * 8
            if len(raw) != expected:
                raise CheckpointFormatError(
                    f"{path}: tensor {name} has {len(raw)} bytes, expected {expected}"
                )
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return tensors, manifest
