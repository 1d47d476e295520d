"""Binary checkpoint format.

Layout (little-endian)::

    b"ACVI" | u32 version
    u32 n_bytes | TrainConfig as canonical key=value UTF-8
    u32 n_params | per param: u32 name_len, name, u32 rank, u32 extents..., f32 data
    u32 n_moments | same layout, names suffixed ".m" / ".v"
    u64 global_step | u32 vocab_size | per token: u32 len, UTF-8 bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Tuple

import numpy as np

from .config import TrainConfig
from .data import Vocabulary
from .errors import FormatError
from .tensor import ParamStore, Tensor

MAGIC = b"ACVI"
VERSION = 1


class CheckpointVersionError(FormatError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    params: ParamStore
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]]
    vocab: Vocabulary
    feature_dim: int = None

    def __post_init__(self):
        if self.feature_dim is None and "feat.W" in self.params:
            self.feature_dim = self.params["feat.W"].shape[1]


def _w_u32(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<I", v))


def _w_str(fh: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    _w_u32(fh, len(b))
    fh.write(b)


def _w_array(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    _w_str(fh, name)
    _w_u32(fh, arr.ndim)
    for s in arr.shape:
        _w_u32(fh, s)
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path: str, cp: Checkpoint) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, cp)


def write_checkpoint(fh: BinaryIO, cp: Checkpoint) -> None:
    fh.write(MAGIC)
    _w_u32(fh, VERSION)
    cfg = cp.config.to_text().encode("utf-8")
    _w_u32(fh, len(cfg))
    fh.write(cfg)
    names = cp.params.names()
    _w_u32(fh, len(names))
    for n in names:
        _w_array(fh, n, cp.params[n].data)
    mnames = sorted(cp.moments)
    _w_u32(fh, 2 * len(mnames))
    for n in mnames:
        m, v = cp.moments[n]
        _w_array(fh, n + ".m", m)
        _w_array(fh, n + ".v", v)
    fh.write(struct.pack("<Q", cp.step))
    _w_u32(fh, len(cp.vocab))
    for tok in cp.vocab.tokens:
        _w_str(fh, tok)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self) -> Tuple[str, np.ndarray]:
        name = self.string()
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        return name, data


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return read_checkpoint(fh.read())


def read_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointVersionError("not an ACVI checkpoint (bad magic bytes)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config = TrainConfig.from_text(r.take(r.u32()).decode("utf-8"))
    params = ParamStore()
    for _ in range(r.u32()):
        name, data = r.array()
        params.add(name, Tensor(data, dtype=np.float32))
    raw: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name, data = r.array()
        raw[name] = data
    moments = {}
    for name in {n[:-2] for n in raw}:
        if name + ".m" not in raw or name + ".v" not in raw:
            raise FormatError(f"moment {name!r} is missing its .m or .v half")
        if name not in params or raw[name + ".m"].shape != params[name].shape:
            raise FormatError(f"moment {name!r} does not match a parameter of the same shape")
        moments[name] = (raw[name + ".m"], raw[name + ".v"])
    step = r.u64()
    tokens = [r.string() for _ in range(r.u32())]
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    vocab = Vocabulary(tokens[4:])
    if vocab.tokens != tokens:
        raise FormatError("checkpoint vocabulary is malformed")
    _check_shapes(config, params, len(vocab))
    return Checkpoint(config, step, params, moments, vocab)


def _check_shapes(config: TrainConfig, params: ParamStore, vocab_size: int) -> None:
    d, e = config.hidden, config.embed
    expect = {"tgt_embed": (vocab_size, e), "dec.W": (4 * d, e + d), "attn.W_h": (config.attn, 2 * d),
              "out.V_out": (vocab_size, config.out_hidden)}
    for name, shape in expect.items():
        if name not in params:
            raise FormatError(f"checkpoint lacks parameter {name!r}")
        if params[name].shape != shape:
            raise FormatError(f"parameter {name!r} has shape {params[name].shape}, config implies {shape}")
