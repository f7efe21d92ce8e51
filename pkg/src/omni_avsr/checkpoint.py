"""Binary named-tensor container used for checkpoints and corpus files.

Layout (all integers little-endian):
  magic "OMNI" | version u32 | text-block (u32 len + utf8)
  | step u64 | base-hash (u32 len + ascii)
  | n_tensors u32 | per tensor: name (u32 len + utf8), frozen u8, ndim u8,
    dims u32 each, row-major float64 data.

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OMNI"
VERSION = 1


class ContainerError(IOError):
    pass


@dataclass
class NamedTensor:
    name: str
    data: np.ndarray
    frozen: bool = False


@dataclass
class Container:
    text: str = ""
    step: int = 0
    base_hash: str = ""
    tensors: list[NamedTensor] = field(default_factory=list)

    def tensor_map(self) -> dict[str, NamedTensor]:
        return {t.name: t for t in self.tensors}


def save_container(path, c: Container):
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    text = c.text.encode("utf-8")
    buf += struct.pack("<I", len(text)) + text
    buf += struct.pack("<Q", c.step)
    h = c.base_hash.encode("ascii")
    buf += struct.pack("<I", len(h)) + h
    buf += struct.pack("<I", len(c.tensors))
    for t in c.tensors:
        name = t.name.encode("utf-8")
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(t.data, dtype=np.float64, order="C")
        buf += struct.pack("<I", len(name)) + name
        buf += struct.pack("<BB", int(t.frozen), arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_container(path) -> Container:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off); off += 4
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    (tlen,) = struct.unpack_from("<I", raw, off); off += 4
    text = raw[off:off + tlen].decode("utf-8"); off += tlen
    (step,) = struct.unpack_from("<Q", raw, off); off += 8
    (hlen,) = struct.unpack_from("<I", raw, off); off += 4
    base_hash = raw[off:off + hlen].decode("ascii"); off += hlen
    (n,) = struct.unpack_from("<I", raw, off); off += 4
    tensors = []
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", raw, off); off += 4
        name = raw[off:off + nlen].decode("utf-8"); off += nlen
        frozen, ndim = struct.unpack_from("<BB", raw, off); off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        tensors.append(NamedTensor(name, data.copy(), bool(frozen)))
    return Container(text=text, step=step, base_hash=base_hash, tensors=tensors)
