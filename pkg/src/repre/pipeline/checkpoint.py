"""Versioned binary checkpoints.

Layout (little-endian)::

    magic "REPRECKP" | u32 version | u64 body length | body | sha256(all preceding bytes)

    body = u64 blob length | JSON blob (config, step, optimizer t)
         | u32 tensor count | per tensor: u16 name length, name, u8 dtype (0 = f64),
                                          u8 ndim, u32 * ndim shape, payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig

MAGIC = b"REPRECKP"
VERSION = 1
_DTYPE_F64 = 0
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


def _collect(trainer) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    for name, p in trainer.branch.named_parameters("online."):
        table[name] = p.data
    for name, p in trainer.branch.target_named_parameters():
        table["target." + name] = p.data
    if trainer.decoder is not None:
        for name, p in trainer.decoder.named_parameters("decoder."):
            table[name] = p.data
    for name, p in trainer.weights.named_parameters("weights."):
        table[name] = p.data
    for name, arr in trainer.optimizer.state_arrays().items():
        table["optim." + name] = arr
    queue = trainer.branch.queue
    if queue is not None:
        table["queue.entries"] = queue.entries
    return table


def encode(config: TrainConfig, step: int, optim_t: int, tensors: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps({"config": config.to_dict(), "step": step, "optim_t": optim_t},
                      sort_keys=True).encode()
    parts = [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        # asarray, not ascontiguousarray: the latter turns 0-d scalars into shape (1,)
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    head = _HEADER.pack(MAGIC, VERSION, len(body)) + body
    return head + hashlib.sha256(head).digest()


def decode(raw: bytes) -> tuple[TrainConfig, int, int, dict[str, np.ndarray]]:
    if len(raw) < _HEADER.size + 32:
        raise CheckpointError("checkpoint truncated: shorter than header + checksum")
    magic, version, body_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    if len(raw) != _HEADER.size + body_len + 32:
        raise CheckpointError(f"checkpoint truncated: {len(raw)} bytes, header declares "
                              f"{_HEADER.size + body_len + 32}")
    head, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(head).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch; file is corrupted")
    pos = _HEADER.size
    (blob_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    meta = json.loads(raw[pos:pos + blob_len].decode())
    pos += blob_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        dtype, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if dtype != _DTYPE_F64:
            raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return TrainConfig.from_dict(meta["config"]), int(meta["step"]), int(meta["optim_t"]), tensors


def save_checkpoint(path: str | Path, trainer) -> None:
    data = encode(trainer.config, trainer.step, trainer.optimizer.t, _collect(trainer))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_checkpoint(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return decode(p.read_bytes())


def load_checkpoint(path: str | Path, config: TrainConfig | None = None, images=None):
    """Rebuild a Trainer from ``path``. If ``config`` is given it must match the stored one."""
    from .train import Trainer

    stored, step, optim_t, tensors = read_checkpoint(path)
    if config is not None and config.to_dict() != stored.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if stored.to_dict()[k] != v)
        raise CheckpointError(f"config mismatch with checkpoint on keys {diff}")
    trainer = Trainer(stored, images)
    _restore(trainer, tensors)
    trainer.optimizer.load_state_arrays(
        {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}, optim_t)
    trainer.step = step
    return trainer


def _restore(trainer, tensors: dict[str, np.ndarray]) -> None:
    expected = set(_collect(trainer))
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointError(f"tensor table mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in trainer.branch.named_parameters("online."):
        _assign(name, p, tensors)
    for name, p in trainer.branch.target_named_parameters():
        _assign("target." + name, p, tensors)
    if trainer.decoder is not None:
        for name, p in trainer.decoder.named_parameters("decoder."):
            _assign(name, p, tensors)
    for name, p in trainer.weights.named_parameters("weights."):
        _assign(name, p, tensors)
    if trainer.branch.queue is not None:
        trainer.branch.queue.entries = tensors["queue.entries"].copy()


def _assign(name, p, tensors) -> None:
    arr = tensors[name]
    if arr.shape != p.shape:
        raise CheckpointError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
    p.data = arr.copy()


def load_encoder(path: str | Path):
    """Only the online encoder, for evaluation. The decoder is never built."""
    from ..encoder import Encoder

    stored, _, _, tensors = read_checkpoint(path)
    enc = Encoder(stored.encoder_config(), np.random.default_rng(0))
    prefix = "online.encoder."
    enc.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return enc, stored
