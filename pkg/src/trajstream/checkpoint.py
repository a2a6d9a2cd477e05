"""Versioned parameter archives.

A checkpoint is a zip holding `manifest.json` (format version, model kind,
config snapshot, training step, ordered parameter records with shapes and
dtypes) and `params.bin`, the raw little-endian parameter bytes concatenated
in manifest order. Loading rebuilds the model from the config and validates
every parameter shape.
"""
from __future__ import annotations

import dataclasses
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, model_config_from_dict

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: torch.nn.Module, cfg: ModelConfig,
                    step: int, kind: str = "single") -> None:
    entries = []
    chunks = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported parameter dtype {dtype} for {name}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        chunks.append(arr.astype(_DTYPES[dtype]).tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "step": step,
        "config": dataclasses.asdict(cfg),
        "params": entries,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("params.bin", b"".join(chunks))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("params.bin")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')}")
    params = {}
    offset = 0
    for entry in manifest["params"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError("params.bin length does not match the manifest")
    return manifest, params


def _load_into(model: torch.nn.Module, params: dict[str, np.ndarray], where: str) -> None:
    state = model.state_dict()
    diffs = []
    for name, tensor in state.items():
        if name not in params:
            diffs.append(f"missing parameter {name}")
        elif tuple(params[name].shape) != tuple(tensor.shape):
            diffs.append(f"{name}: checkpoint {list(params[name].shape)} "
                         f"vs model {list(tensor.shape)}")
    extra = set(params) - set(state)
    diffs.extend(f"unexpected parameter {n}" for n in sorted(extra))
    if diffs:
        raise CheckpointError(f"{where}: manifest diff:\n  " + "\n  ".join(diffs))
    model.load_state_dict({n: torch.as_tensor(a.copy()) for n, a in params.items()})


def load_model(path: str | Path):
    """Rebuild the checkpointed model. Returns (model, manifest)."""
    from .model import StreamingPredictor
    from .multiagent import WorldModel

    manifest, params = read_checkpoint(path)
    cfg = model_config_from_dict(manifest["config"])
    if manifest["kind"] == "single":
        model = StreamingPredictor(cfg)
    elif manifest["kind"] == "world":
        model = WorldModel(StreamingPredictor(cfg), cfg)
    else:
        raise CheckpointError(f"unknown checkpoint kind {manifest['kind']!r}")
    _load_into(model, params, str(path))
    model.eval()
    return model, manifest


def init_world_from_single(path: str | Path):
    """A WorldModel whose predictor is initialized from a single-agent
    checkpoint; the consistency module starts fresh."""
    from .model import StreamingPredictor
    from .multiagent import WorldModel

    manifest, params = read_checkpoint(path)
    if manifest["kind"] != "single":
        raise CheckpointError(f"{path}: expected a single-agent checkpoint")
    cfg = model_config_from_dict(manifest["config"])
    predictor = StreamingPredictor(cfg)
    _load_into(predictor, params, str(path))
    return WorldModel(predictor, cfg), manifest
