"""Bit-exact encoder checkpoint format.

Layout (all integers little-endian)::

    b"KALEMDL1"
    u32 config length, UTF-8 ``key=value`` lines
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, raw f32 values
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, TransformerEncoder
from .errors import FormatError
from .tensor import Tensor

MAGIC = b"KALEMDL1"


def dumps(model: TransformerEncoder, metadata: dict[str, str] | None = None) -> bytes:
    lines = model.config.to_lines()
    for key, value in (metadata or {}).items():
        if "\n" in str(value) or "=" in key:
            raise FormatError(f"metadata entry {key!r} cannot be stored as a key=value line")
        lines.append(f"{key}={value}")
    config = "".join(line + "\n" for line in lines).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(config)))
    buf.write(config)
    buf.write(struct.pack("<I", len(model.parameters)))
    for name, p in model.parameters.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> tuple[TransformerEncoder, dict[str, str]]:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (clen,) = r.unpack("<I")
    values: dict[str, str] = {}
    for line in r.take(clen).decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed config line {line!r}")
        values[key] = value
    config = EncoderConfig.from_mapping(values)
    known = set(f for f in config.__dataclass_fields__)
    metadata = {k: v for k, v in values.items() if k not in known}
    (count,) = r.unpack("<I")
    params: OrderedDict[str, Tensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        values_ = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = Tensor(values_, requires_grad=True)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor")
    model = TransformerEncoder(config, params)
    model.eval()
    return model, metadata


def save_checkpoint(model: TransformerEncoder, path, metadata: dict[str, str] | None = None) -> str:
    """Write ``model`` to ``path``; returns the SHA-256 of the written bytes."""
    data = dumps(model, metadata)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[TransformerEncoder, dict[str, str]]:
    return loads(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def model_digest(model: TransformerEncoder) -> str:
    return hashlib.sha256(dumps(model)).hexdigest()
