"""Checkpoint archive format.

A checkpoint is a zip archive with three members:

* ``header.json`` -- format version, model config, step/epoch counters,
  sampler rng state, and the ordered array directory: for every array its
  name, shape, byte offset and length, plus a sha256 per binary member.
* ``params.bin`` -- model parameters, concatenated C-order little-endian
  float32, in header order.
* ``optim.bin`` -- optimizer moment arrays in the same layout, with
  per-parameter step counts kept in the header.

Loading reproduces the exact float32 parameter values, so resuming a run
is bit-identical to never having stopped.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .models import CLVAModel, ModelConfig

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Archive unreadable, malformed, or inconsistent with its header."""


@dataclass
class OptimizerGroupState:
    steps: dict[str, float] = field(default_factory=dict)
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class CheckpointBundle:
    model: CLVAModel
    optim: dict[str, OptimizerGroupState]
    step: int
    epoch: int
    rng: np.random.Generator
    model_id: str


def _pack_arrays(arrays: list[tuple[str, np.ndarray]]) -> tuple[bytes, list[dict]]:
    blob = bytearray()
    directory = []
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": len(blob), "nbytes": len(data)}
        )
        blob.extend(data)
    return bytes(blob), directory


def _unpack_arrays(blob: bytes, directory: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for ent in directory:
        raw = blob[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).copy()
        out[ent["name"]] = arr
    return out


def save_checkpoint(
    path: str | Path,
    model: CLVAModel,
    optim_state: dict[str, OptimizerGroupState],
    step: int,
    epoch: int,
    rng: np.random.Generator,
) -> str:
    """Write the archive; returns the content hash used as model id."""
    params = [(n, p.detach().cpu().numpy()) for n, p in model.named_parameters()]
    params_bin, params_dir = _pack_arrays(params)

    optim_arrays: list[tuple[str, np.ndarray]] = []
    optim_steps: dict[str, dict[str, float]] = {}
    for group, st in optim_state.items():
        optim_steps[group] = dict(st.steps)
        for name, arr in st.exp_avg.items():
            optim_arrays.append((f"{group}/{name}/exp_avg", arr))
        for name, arr in st.exp_avg_sq.items():
            optim_arrays.append((f"{group}/{name}/exp_avg_sq", arr))
    optim_bin, optim_dir = _pack_arrays(optim_arrays)

    model_id = hashlib.sha256(params_bin).hexdigest()[:16]
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "step": step,
        "epoch": epoch,
        "rng_state": rng.bit_generator.state,
        "params": params_dir,
        "params_sha256": hashlib.sha256(params_bin).hexdigest(),
        "optim": optim_dir,
        "optim_steps": optim_steps,
        "optim_sha256": hashlib.sha256(optim_bin).hexdigest(),
        "model_id": model_id,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header))
        zf.writestr("params.bin", params_bin)
        zf.writestr("optim.bin", optim_bin)
    return model_id


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            params_bin = zf.read("params.bin")
            optim_bin = zf.read("optim.bin")
    except (OSError, zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    if hashlib.sha256(params_bin).hexdigest() != header["params_sha256"]:
        raise CheckpointError("params.bin checksum mismatch")
    if hashlib.sha256(optim_bin).hexdigest() != header["optim_sha256"]:
        raise CheckpointError("optim.bin checksum mismatch")

    config = ModelConfig.from_dict(header["config"])
    model = CLVAModel(config)
    arrays = _unpack_arrays(params_bin, header["params"])
    expected = {n for n, _ in model.named_parameters()}
    if expected != set(arrays):
        raise CheckpointError("parameter names in archive do not match the model config")
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}")
            p.copy_(torch.from_numpy(arr))

    optim: dict[str, OptimizerGroupState] = {}
    optim_arrays = _unpack_arrays(optim_bin, header["optim"])
    for group, steps in header.get("optim_steps", {}).items():
        st = OptimizerGroupState(steps={k: float(v) for k, v in steps.items()})
        optim[group] = st
    for key, arr in optim_arrays.items():
        group, pname, kind = key.split("/")  # param names never contain '/'
        st = optim.setdefault(group, OptimizerGroupState())
        (st.exp_avg if kind == "exp_avg" else st.exp_avg_sq)[pname] = arr

    rng = np.random.default_rng()
    state = header["rng_state"]
    try:
        rng.bit_generator.state = state
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"cannot restore rng state: {exc}") from exc

    return CheckpointBundle(
        model=model,
        optim=optim,
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        rng=rng,
        model_id=header.get("model_id", hashlib.sha256(params_bin).hexdigest()[:16]),
    )
