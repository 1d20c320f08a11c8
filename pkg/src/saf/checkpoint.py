"""Binary checkpoint files.

Layout, all integers little-endian::

    magic    8 bytes  b"SAFCKPT\\0"
    version  u32
    header   u32 length + UTF-8 text, one ``key=value`` per line
             (model config echo, then ``state.*`` training bookkeeping)
    count    u32 number of entries
    entry    u16 name length, name, u8 rank, rank x u32 extents,
             float32 payload in C order
    checksum u64, first 8 bytes of BLAKE2b over every payload in file order

Entries are the model parameters followed by optional optimizer moments
(``adam.m.<name>`` / ``adam.v.<name>``). Saving float32 arrays and loading
them back is bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from saf.model import ModelConfig, check_params
from saf.tensor import Tensor

MAGIC = b"SAFCKPT\0"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]"
    state: dict = field(default_factory=dict)
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def _digest() -> "hashlib._Hash":
    return hashlib.blake2b(digest_size=8)


def _write_entry(buf: io.BytesIO, h, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF or arr.ndim > 0xFF:
        raise CheckpointError(f"entry {name!r} cannot be encoded")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    payload = np.ascontiguousarray(arr, dtype=_F32).tobytes()
    h.update(payload)
    buf.write(payload)


def encode(
    config: ModelConfig,
    params: Mapping[str, Tensor],
    state: Optional[Mapping[str, object]] = None,
    adam_m: Optional[Mapping[str, np.ndarray]] = None,
    adam_v: Optional[Mapping[str, np.ndarray]] = None,
) -> bytes:
    lines = [f"{k}={v}" for k, v in config.to_items()]
    lines += [f"state.{k}={v}" for k, v in (state or {}).items()]
    header = ("\n".join(lines) + "\n").encode("utf-8")

    entries = [(name, t.data) for name, t in params.items()]
    for prefix, moments in (("adam.m.", adam_m), ("adam.v.", adam_v)):
        entries += [(prefix + name, a) for name, a in (moments or {}).items()]

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(entries)))
    h = _digest()
    for name, arr in entries:
        _write_entry(buf, h, name, arr)
    buf.write(h.digest())
    return buf.getvalue()


def save(path: str | Path, config: ModelConfig, params, state=None, adam_m=None, adam_v=None) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    path = Path(path)
    blob = encode(config, params, state, adam_m, adam_v)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_header(text: str) -> tuple[dict, dict]:
    cfg, state = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        if key.startswith("state."):
            state[key[len("state.") :]] = value
        else:
            cfg[key] = value
    return cfg, state


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    from saf.config import model_config_from_items

    r = _Reader(blob, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, header_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    cfg_items, state = _parse_header(r.take(header_len).decode("utf-8"))
    config = model_config_from_items(cfg_items)

    (count,) = r.unpack("<I")
    h = _digest()
    params: OrderedDict[str, Tensor] = OrderedDict()
    adam_m: OrderedDict[str, np.ndarray] = OrderedDict()
    adam_v: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * _F32.itemsize)
        h.update(payload)
        arr = np.frombuffer(payload, dtype=_F32).reshape(shape).astype(np.float32)
        if name.startswith("adam.m."):
            adam_m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[7:]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True, name=name)
    if r.take(8) != h.digest():
        raise CheckpointError(f"{source}: checksum mismatch")
    if r.pos != len(blob):
        raise CheckpointError(f"{source}: trailing bytes after checksum")
    try:
        check_params(params, config)
    except ValueError as e:
        raise CheckpointError(f"{source}: parameters do not match the stored config: {e}") from None
    return Checkpoint(config, params, state, adam_m, adam_v)


def load(path: str | Path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    """Read and verify a checkpoint; ``expect`` rejects a different architecture."""
    path = Path(path)
    ckpt = decode(path.read_bytes(), str(path))
    if expect is not None and expect.to_items() != ckpt.config.to_items():
        diff = [
            f"{k}: checkpoint {a} vs requested {b}"
            for (k, a), (_, b) in zip(ckpt.config.to_items(), expect.to_items())
            if a != b
        ]
        raise CheckpointError(f"{path}: config mismatch ({'; '.join(diff)})")
    return ckpt
