"""Binary checkpoint container.

Little-endian throughout::

    b"RMCK"  u32 version  u32 count
    count x { u32 name_len, utf-8 name, u32 rank, u32 dims[rank], f32 payload }
    u32 text_len, utf-8 text                 # model spec / effective config
    u32 has_table [u32 rows, rows x { u32 id_len, utf-8 id, u32 label }]
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    text: str = ""
    table: list[tuple[str, int]] | None = None

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        text = self.text.encode("utf-8")
        parts.append(struct.pack("<I", len(text)) + text)
        if self.table is None:
            parts.append(struct.pack("<I", 0))
        else:
            parts.append(struct.pack("<II", 1, len(self.table)))
            for ident, label in self.table:
                raw = ident.encode("utf-8")
                parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", label))
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < 16 or buf[:4] != MAGIC:
            raise CheckpointError("not an RMCK checkpoint")
        body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("CRC mismatch: checkpoint is corrupted")
        reader = _Reader(body, 4)
        version, count = reader.u32(), reader.u32()
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            name = reader.text()
            rank = reader.u32()
            dims = tuple(reader.u32() for _ in range(rank))
            n = int(np.prod(dims, dtype=np.int64))
            tensors[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        text = reader.text()
        table = None
        if reader.u32():
            table = [(reader.text(), reader.u32()) for _ in range(reader.u32())]
        if reader.pos != len(body):
            raise CheckpointError("trailing bytes after checkpoint body")
        return cls(tensors, text, table)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class _Reader:
    buf: bytes
    pos: int = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("invalid UTF-8 in checkpoint") from exc
