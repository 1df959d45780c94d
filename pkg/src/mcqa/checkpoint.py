"""Versioned little-endian checkpoint files.

Layout::

    b"MCQACKPT" | version u32
    config_len u32 | ModelConfig as JSON
    meta_len u32 | run metadata as JSON (seed, epochs completed, ...)
    n u32 | n x (name_len u16 | name | ndim u8 | dims u32... | float64 payload)
    step u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64 | has_moments u8
          [| n x (m payload | v payload)]
    crc32 u32 over every preceding byte
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ModelConfig, init_params
from .optim import AdamState
from .tensor import ParameterStore

MAGIC = b"MCQACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    store: ParameterStore
    adam: AdamState = field(default_factory=AdamState)
    meta: dict = field(default_factory=dict)


def _pack_blob(out: io.BytesIO, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode()
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    _pack_blob(out, json.loads(ckpt.config.to_json()))
    _pack_blob(out, ckpt.meta)
    store = ckpt.store
    names = store.names()
    out.write(struct.pack("<I", len(names)))
    for name in names:
        value = store.value(name)
        raw = name.encode()
        out.write(struct.pack("<HB", len(raw), value.ndim))
        out.write(raw)
        out.write(struct.pack(f"<{value.ndim}I", *value.shape))
        out.write(value.astype("<f8").tobytes())
    a = ckpt.adam
    has_moments = all("m" in store.slots[n] and "v" in store.slots[n] for n in names) and bool(names)
    out.write(struct.pack("<Q4dB", a.step, a.lr, a.beta1, a.beta2, a.eps, int(has_moments)))
    if has_moments:
        for name in names:
            out.write(store.slots[name]["m"].astype("<f8").tobytes())
            out.write(store.slots[name]["v"].astype("<f8").tobytes())
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 8:
        raise CorruptCheckpointError("checkpoint is truncated")
    if buf[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"not a checkpoint (magic {buf[:len(MAGIC)]!r})")
    (version,) = struct.unpack_from("<I", buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    try:
        (n,) = r.unpack("<I")
        config = ModelConfig.from_dict(json.loads(r.take(n)))
        (n,) = r.unpack("<I")
        meta = json.loads(r.take(n))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad checkpoint header: {exc}") from None
    (count,) = r.unpack("<I")
    store = ParameterStore()
    for _ in range(count):
        name_len, ndim = r.unpack("<HB")
        name = r.take(name_len).decode()
        shape = r.unpack(f"<{ndim}I")
        store.add(name, r.array(shape))
    step, lr, b1, b2, eps, has_moments = r.unpack("<Q4dB")
    if has_moments:
        for name in store.names():
            shape = store.value(name).shape
            store.slots[name]["m"] = r.array(shape)
            store.slots[name]["v"] = r.array(shape)
    if r.pos != len(body):
        raise CorruptCheckpointError(f"{len(body) - r.pos} unexpected trailing bytes")
    return Checkpoint(config, store, AdamState(lr, b1, b2, eps, step), meta)


def check_against_config(store: ParameterStore, config: ModelConfig) -> None:
    """Reject a store whose tensor names or shapes differ from what ``config`` builds."""
    expected = init_params(config, 0)
    for name in expected.names():
        if name not in store:
            raise CheckpointMismatchError(f"tensor {name!r} missing from checkpoint")
        if store.value(name).shape != expected.value(name).shape:
            raise CheckpointMismatchError(
                f"tensor {name!r} has shape {store.value(name).shape}, config expects "
                f"{expected.value(name).shape}")
    for name in store.names():
        if name not in expected:
            raise CheckpointMismatchError(f"tensor {name!r} is not part of this model config")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``config``, also require its tensors to match that config."""
    ckpt = decode_checkpoint(Path(path).read_bytes())
    check_against_config(ckpt.store, ckpt.config)
    if config is not None:
        check_against_config(ckpt.store, config)
    return ckpt
