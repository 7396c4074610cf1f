"""Named-tensor archives (safetensors) and checkpoint directories.

A checkpoint is a directory holding ``config.json``, ``tensors.safetensors``
and ``meta.json``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors import SafetensorError
from safetensors.numpy import load, save

from .backbone import UNetModel, build_unet
from .config import UNetConfig

ARCHIVE_NAME = "tensors.safetensors"


class ArchiveError(ValueError):
    pass


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(value)


def encode_archive(tensors: dict) -> bytes:
    return save({path: _as_numpy(value) for path, value in sorted(tensors.items())})


def decode_archive(blob: bytes) -> dict[str, np.ndarray]:
    try:
        tensors = load(blob)
    except SafetensorError as exc:
        raise ArchiveError(str(exc)) from None
    return {path: tensors[path] for path in sorted(tensors)}


def write_archive(directory, tensors: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / ARCHIVE_NAME).write_bytes(encode_archive(tensors))


def read_archive(directory) -> dict[str, np.ndarray]:
    return decode_archive((Path(directory) / ARCHIVE_NAME).read_bytes())


def state_bytes(model: torch.nn.Module) -> bytes:
    return encode_archive(dict(model.named_parameters()))


def state_hash(model: torch.nn.Module) -> str:
    return hashlib.sha256(state_bytes(model)).hexdigest()


@dataclass
class Checkpoint:
    model: UNetModel
    meta: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def name(self) -> str:
        return self.meta.get("name") or (self.path.name if self.path else "model")

    @property
    def config(self) -> UNetConfig:
        return self.model.config


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(directory, model: UNetModel, meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(model.config.to_json() + "\n")
    write_archive(directory, dict(model.named_parameters()))
    meta = dict(meta or {})
    meta.setdefault("num_timesteps", model.num_timesteps)
    (directory / "meta.json").write_text(_dumps(meta))
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    config = UNetConfig.load(directory / "config.json")
    meta = json.loads((directory / "meta.json").read_text())
    tensors = read_archive(directory)
    dtype = torch.from_numpy(next(iter(tensors.values()))).dtype
    model = build_unet(config, seed=0, num_timesteps=meta.get("num_timesteps", 1000), dtype=dtype)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))[:5]
        extra = sorted(set(tensors) - set(params))[:5]
        raise ArchiveError(f"checkpoint does not match config (missing {missing}, extra {extra})")
    with torch.no_grad():
        for path, param in params.items():
            param.copy_(torch.from_numpy(tensors[path]))
    return Checkpoint(model, meta, directory)


def as_checkpoint(ref) -> Checkpoint:
    if isinstance(ref, Checkpoint):
        return ref
    if isinstance(ref, UNetModel):
        return Checkpoint(ref, {"name": "model"})
    return load_checkpoint(ref)
