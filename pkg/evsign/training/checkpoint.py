"""
EVCK checkpoint container.

Layout (little endian)::

    magic "EVCK" | u16 version | 32-byte config hash | u32 epoch
    u32 n_params    then n blobs
    u32 n_optimizer then n blobs
    u32 metadata length | UTF-8 JSON

    blob := u16 name length | name | u8 ndim | ndim x u32 dims | float32 data
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch
from loguru import logger

from evsign.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from evsign.errors import CheckpointError

_HEADER = struct.Struct("<4sH32sI")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")


@dataclass
class Checkpoint:
    config_hash: bytes
    epoch: int
    params: Dict[str, torch.Tensor]
    optimizer: Dict[str, torch.Tensor] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _pack_blobs(tensors: Mapping[str, torch.Tensor]) -> bytes:
    out = [_U32.pack(len(tensors))]
    for name, t in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        arr = t.detach().to("cpu", torch.float32).numpy()
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name} has too many dimensions")
        out.append(_U16.pack(len(encoded)))
        out.append(encoded)
        out.append(_U8.pack(arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, s: struct.Struct, what: str) -> Tuple:
        return s.unpack(self.take(s.size, what))

    def blobs(self, section: str) -> Dict[str, torch.Tensor]:
        (count,) = self.unpack(_U32, f"{section} count")
        tensors = {}
        for _ in range(count):
            (name_len,) = self.unpack(_U16, f"{section} name length")
            try:
                name = bytes(self.take(name_len, f"{section} name")).decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"{section} name is not valid UTF-8")
            (ndim,) = self.unpack(_U8, f"{name} rank")
            shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim, f"{name} shape"))
            numel = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = self.take(4 * numel, f"{name} data")
            if name in tensors:
                raise CheckpointError(f"duplicate {section} entry {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
            tensors[name] = torch.from_numpy(arr)
        return tensors


def write_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_hash) != 32:
        raise CheckpointError(f"config hash must be 32 bytes, got {len(ckpt.config_hash)}")
    if not 0 <= ckpt.epoch <= 0xFFFFFFFF:
        raise CheckpointError(f"epoch out of range: {ckpt.epoch}")
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    return b"".join([
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ckpt.config_hash, ckpt.epoch),
        _pack_blobs(ckpt.params),
        _pack_blobs(ckpt.optimizer),
        _U32.pack(len(meta)),
        meta,
    ])


def read_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic, version, config_hash, epoch = reader.unpack(_HEADER, "header")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(magic)!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = reader.blobs("parameter")
    optimizer = reader.blobs("optimizer")
    (meta_len,) = reader.unpack(_U32, "metadata length")
    try:
        metadata = json.loads(bytes(reader.take(meta_len, "metadata")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint metadata is not valid JSON: {e}")
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{len(reader.data) - reader.pos} trailing bytes after checkpoint")
    return Checkpoint(bytes(config_hash), epoch, params, optimizer, metadata)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(write_checkpoint(ckpt))
    tmp.replace(path)
    logger.debug(f"Saved checkpoint (epoch {ckpt.epoch}) to {path}")
    return path


def load_checkpoint(path, expected_hash: bytes = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    ckpt = read_checkpoint(path.read_bytes())
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise CheckpointError(
            f"checkpoint {path} was written for a different architecture/vocabulary "
            f"(config hash {ckpt.config_hash.hex()[:12]} != {expected_hash.hex()[:12]})")
    return ckpt


def model_state(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    """Parameters and buffers in ``state_dict`` order."""
    return {name: t for name, t in model.state_dict().items()}


@torch.no_grad()
def restore_model(model: torch.nn.Module, params: Mapping[str, torch.Tensor]):
    state = model.state_dict()
    missing = sorted(set(state) - set(params))
    unexpected = sorted(set(params) - set(state))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint does not match the model (missing {missing[:5]}, unexpected {unexpected[:5]})")
    for name, target in state.items():
        src = params[name]
        if tuple(src.shape) != tuple(target.shape):
            raise CheckpointError(f"{name}: checkpoint shape {tuple(src.shape)} != model shape {tuple(target.shape)}")
        target.copy_(src.to(target.dtype))
