"""Binary checkpoint format.

Little-endian layout::

    b"RHAC" | version u32 | variant u8 | base_width u32 | epoch u32 | has_optimizer u8
    | tensor_count u32 | tensor*
    [ | tensor_count u32 | tensor* | step u64 ]        # only when has_optimizer

    tensor := name_len u16 | name utf-8 | ndim u8 | dims u32*ndim | float32 payload

Model tensors are the parameters followed by the BN running statistics. The
optimizer block stores ``m.<param>`` and ``v.<param>`` pairs.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import VARIANTS, ModelConfig, build, named_state
from .optim import AdamState

MAGIC = b"RHAC"
VERSION = 1


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    epoch: int = 0
    optimizer: Optional[AdamState] = None
    version: int = VERSION


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode(c: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IBIIB", c.version, VARIANTS.index(c.config.variant), c.config.base_width,
                          c.epoch, 1 if c.optimizer is not None else 0))
    buf.write(struct.pack("<I", len(c.tensors)))
    for name, arr in c.tensors.items():
        _write_tensor(buf, name, arr)
    if c.optimizer is not None:
        opt = c.optimizer
        buf.write(struct.pack("<I", 2 * len(opt.m)))
        for name in opt.m:
            _write_tensor(buf, f"m.{name}", opt.m[name])
            _write_tensor(buf, f"v.{name}", opt.v[name])
        buf.write(struct.pack("<Q", opt.step))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        (ndim,) = self.unpack("<B")
        dims = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        return name, arr


def decode(data: bytes, path: str = "<bytes>", validate: bool = True) -> Checkpoint:
    r = _Reader(data, path)
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    variant_code, width, epoch, has_opt = r.unpack("<BIIB")
    if variant_code >= len(VARIANTS):
        raise NotACheckpointError(f"{path}: unknown variant code {variant_code}")
    cfg = ModelConfig(VARIANTS[variant_code], width)
    (count,) = r.unpack("<I")
    tensors = dict(r.tensor() for _ in range(count))
    opt = None
    if has_opt:
        (ocount,) = r.unpack("<I")
        opt = AdamState()
        for _ in range(ocount):
            name, arr = r.tensor()
            kind, _, pname = name.partition(".")
            if kind not in ("m", "v"):
                raise NotACheckpointError(f"{path}: bad optimizer tensor name {name!r}")
            getattr(opt, kind)[pname] = arr
        (opt.step,) = r.unpack("<Q")
    if r.pos != len(data):
        raise NotACheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    ckpt = Checkpoint(cfg, tensors, epoch, opt, version)
    if validate:
        validate_shapes(ckpt, path)
    return ckpt


def validate_shapes(c: Checkpoint, path: str = "<checkpoint>") -> None:
    expected = {n: a.shape for n, a in named_state(build(c.config))}
    if set(expected) != set(c.tensors):
        missing = sorted(set(expected) - set(c.tensors))
        extra = sorted(set(c.tensors) - set(expected))
        raise CheckpointShapeError(f"{path}: tensor names do not match {c.config}: missing {missing[:3]}, extra {extra[:3]}")
    for name, shape in expected.items():
        if c.tensors[name].shape != shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {c.tensors[name].shape}, config implies {shape}")
    if c.optimizer is not None:
        for name, arr in c.optimizer.m.items():
            if name not in expected or arr.shape != expected[name] or c.optimizer.v.get(name, arr).shape != arr.shape:
                raise CheckpointShapeError(f"{path}: optimizer moment {name} inconsistent with model")


def save_checkpoint(path, c: Checkpoint) -> None:
    Path(path).write_bytes(encode(c))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
