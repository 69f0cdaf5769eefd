"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"RLEDCKPT"
    version    u32
    config     u32 length + UTF-8 "key = value" lines (ModelConfig fields in order)
    optimiser  u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps
    records    u32 count, then per record:
                 u16 name length, name (UTF-8), u8 rank, u32 * rank extents,
                 f32 payload (row-major)
    trailer    4 bytes b"END." + u32 CRC-32 of every preceding byte

Parameter records are named ``param/<path>``; Adam moments ``adam.m/<path>``
and ``adam.v/<path>``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .network import ModelConfig
from .params import ParamTree
from .tensor import Tensor

MAGIC = b"RLEDCKPT"
VERSION = 1
TRAILER = b"END."


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    """Bad magic, malformed header or checksum mismatch."""


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class OptimState:
    """Adam state: first/second moments per parameter path and a step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamTree
    optim: OptimState = field(default_factory=OptimState)
    version: int = VERSION


# ---------------------------------------------------------------------------
# config text


def encode_config(config: ModelConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(config))


def decode_config(text: str) -> ModelConfig:
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in types:
            raise CorruptCheckpointError(f"unknown config key {key!r}")
        kind = types[key]
        if kind in ("int", int):
            values[key] = int(raw)
        elif kind in ("bool", bool):
            values[key] = raw == "True"
        else:
            values[key] = raw
    return ModelConfig(**values)


# ---------------------------------------------------------------------------
# writing


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt``; tensors are stored as float32."""
    cfg = encode_config(ckpt.config).encode("utf-8")
    o = ckpt.optim
    parts = [
        MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<I", len(cfg)),
        cfg,
        struct.pack("<Qdddd", o.step, o.lr, o.beta1, o.beta2, o.eps),
    ]
    records = [_record(f"param/{k}", t.data) for k, t in ckpt.params.items()]
    records += [_record(f"adam.m/{k}", a) for k, a in o.m.items()]
    records += [_record(f"adam.v/{k}", a) for k, a in o.v.items()]
    parts.append(struct.pack("<I", len(records)))
    parts.extend(records)
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + TRAILER + struct.pack("<I", zlib.crc32(body)))


# ---------------------------------------------------------------------------
# reading


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if len(buf) < len(MAGIC):
        raise TruncatedCheckpointError("file shorter than the magic header")
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = decode_config(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable config block: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"checkpoint was written for {config}, expected {expected_config}")
    step, lr, b1, b2, eps = r.unpack("<Qdddd")
    optim = OptimState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
    params = ParamTree()
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = Tensor(arr, requires_grad=True)
        elif kind == "adam.m":
            optim.m[key] = arr
        elif kind == "adam.v":
            optim.v[key] = arr
        else:
            raise CorruptCheckpointError(f"unknown record {name!r}")
    body_end = r.pos
    if r.take(len(TRAILER)) != TRAILER:
        raise CorruptCheckpointError("missing trailer")
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(buf[:body_end]):
        raise CorruptCheckpointError("checksum mismatch")
    return Checkpoint(config=config, params=params, optim=optim, version=version)
