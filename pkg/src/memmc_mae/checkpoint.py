"""Self-describing binary checkpoint container.

Layout::

    b"MEMMCMAE"                 8-byte magic
    uint32  format version      little-endian
    uint64  header length
    header                      UTF-8 JSON: configs, epoch, RNG states, loss curve,
                                and an index of arrays (name, shape, offset, nbytes)
    payload                     row-major little-endian float32 arrays, back to back
    uint32  CRC-32 of every preceding byte
"""

from __future__ import annotations

import base64
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, to_dict
from .model import MemMCMAE

MAGIC = b"MEMMCMAE"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    epoch: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_steps: dict[str, float] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    loss_curve: list[list] = field(default_factory=list)  # rows of [epoch, step, loss, lr]

    @classmethod
    def capture(cls, model: MemMCMAE, optimizer=None, train_config=None, epoch=None,
                rng: dict | None = None, loss_curve=None) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
        moments: dict[str, np.ndarray] = {}
        steps: dict[str, float] = {}
        if optimizer is not None:
            for name, p in model.named_parameters():
                state = optimizer.state.get(p)
                if not state:
                    continue
                moments[f"exp_avg.{name}"] = state["exp_avg"].detach().cpu().numpy().astype("<f4")
                moments[f"exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().cpu().numpy().astype("<f4")
                steps[name] = float(state["step"])
        return cls(
            model_config=model.config,
            train_config=train_config,
            epoch=model.epochs_trained if epoch is None else epoch,
            params=params,
            optimizer=moments,
            optimizer_steps=steps,
            rng=rng or {},
            loss_curve=[list(r) for r in (loss_curve or [])],
        )

    def build_model(self) -> MemMCMAE:
        model = MemMCMAE(self.model_config)
        state = {k: torch.from_numpy(v.astype(np.float32)) for k, v in self.params.items()}
        model.load_state_dict(state)
        model.epochs_trained = self.epoch
        return model

    def restore_optimizer(self, model: MemMCMAE, optimizer) -> None:
        for name, p in model.named_parameters():
            if name not in self.optimizer_steps:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(self.optimizer_steps[name]),
                "exp_avg": torch.from_numpy(self.optimizer[f"exp_avg.{name}"].astype(np.float32)).clone(),
                "exp_avg_sq": torch.from_numpy(self.optimizer[f"exp_avg_sq.{name}"].astype(np.float32)).clone(),
            }


def encode_torch_rng(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def decode_torch_rng(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def _arrays(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield "param", name, ckpt.params[name]
    for name in sorted(ckpt.optimizer):
        yield "optim", name, ckpt.optimizer[name]


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for group, name, arr in _arrays(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"group": group, "name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "model_config": to_dict(ckpt.model_config),
        "train_config": to_dict(ckpt.train_config) if ckpt.train_config is not None else None,
        "epoch": ckpt.epoch,
        "optimizer_steps": ckpt.optimizer_steps,
        "rng": ckpt.rng,
        "loss_curve": ckpt.loss_curve,
        "arrays": index,
        "dtype": "<f4",
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic or too short)")
    version, head_len = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CorruptCheckpointError("checksum mismatch: file is truncated or corrupted")
    try:
        header = json.loads(blob[fixed: fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = memoryview(blob)[fixed + head_len: -4]
    params, moments = {}, {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CorruptCheckpointError(f"array {entry['name']} extends past the payload")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype="<f4").reshape(entry["shape"]).copy()
        (params if entry["group"] == "param" else moments)[entry["name"]] = arr
    train_cfg = header["train_config"]
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig(**train_cfg) if train_cfg is not None else None,
        epoch=header["epoch"],
        params=params,
        optimizer=moments,
        optimizer_steps=header["optimizer_steps"],
        rng=header["rng"],
        loss_curve=header["loss_curve"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
