"""Binary checkpoint format.

Little-endian layout::

    b"USEG"                       magic
    u32 version                   = 1
    u32 len + utf-8 bytes         model config as key=value lines
    u32 tensor count
    per tensor:
        u16 len + utf-8 name
        u8 rank, u32 * rank dims
        u8 dtype tag              1 = float32
        raw data (row-major)

Parameters come first in registry order, then batch-norm running statistics.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .zoo import Model, ModelConfig, build

MAGIC = b"USEG"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}


def encode(model: Model) -> bytes:
    buf = io.BytesIO()
    cfg = model.config.to_text().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    arrays = model.state_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", 1))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> int:
    """Write ``model`` to ``path`` atomically; returns the file size in bytes."""
    data = encode(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointMagicError("not an ultraseg checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        config = ModelConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    order = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        (tag,) = r.unpack("<B", "dtype tag")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        dt = DTYPE_TAGS[tag]
        size = int(np.prod(dims)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"tensor {name!r}"), dtype=dt).reshape(dims)
        tensors[name] = arr
        order.append(name)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the tensor table")

    model = build(config, seed=0)
    expected = model.state_arrays()
    if order != list(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointMismatchError(
            f"tensor table does not match config {config.variant}: missing {missing[:5]}, unexpected {extra[:5]}"
            if missing or extra else "tensor order differs from the model registry")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise CheckpointMismatchError(f"{name}: stored shape {arr.shape} != model shape {expected[name].shape}")
    # only mutate once everything validated
    for name, arr in tensors.items():
        expected[name][...] = arr
    return model


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(data)
