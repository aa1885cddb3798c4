"""Shared binary container for float32 tensor collections.

Used for the replay buffer on disk and for metric feature caches. Layout,
all little-endian:

    magic   4 bytes  b"SLF1"
    version u16
    extra   u32 length + UTF-8 JSON (container-specific header fields)
    nslots  u64
    per slot:
        meta    u32 length + UTF-8 JSON
        ndim    u8
        dims    u32 * ndim
        payload float32 * prod(dims)

Reads validate the whole file before returning anything, so a truncated
file never yields a partial result. JSON is dumped with sorted keys and
fixed separators, which keeps writes byte-stable for equal inputs.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"SLF1"
VERSION = 1


@dataclass
class Slot:
    meta: dict
    array: np.ndarray  # float32


def _dump_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at offset {self.off} "
                f"(need {n} bytes, have {len(self.blob) - self.off})"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def json_blob(self, what) -> dict:
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return json.loads(raw.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.path}: bad {what} JSON at offset {self.off - n}: {exc}") from None


def write_store(path, extra: dict, slots: list[Slot]) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    extra_b = _dump_json(extra)
    parts.append(struct.pack("<I", len(extra_b)))
    parts.append(extra_b)
    parts.append(struct.pack("<Q", len(slots)))
    for slot in slots:
        arr = np.ascontiguousarray(slot.array, dtype="<f4")
        meta_b = _dump_json(slot.meta)
        parts.append(struct.pack("<I", len(meta_b)))
        parts.append(meta_b)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_store(path) -> tuple[dict, list[Slot]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, str(path))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u16("version")
    if version != VERSION:
        raise FormatError(f"{path}: container version {version}, this build reads version {VERSION}")
    extra = r.json_blob("header")
    nslots = r.u64("slot count")
    slots = []
    for i in range(nslots):
        meta = r.json_blob(f"slot {i} metadata")
        ndim = r.u8(f"slot {i} ndim")
        dims = tuple(r.u32(f"slot {i} dim {d}") for d in range(ndim))
        count = 1
        for d in dims:
            count *= d
        payload = r.take(4 * count, f"slot {i} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        slots.append(Slot(meta, arr))
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes after slot {nslots - 1}")
    return extra, slots


def payload_bytes(path) -> int:
    """Total size of the tensor payload sections, excluding all framing."""
    extra, slots = read_store(path)
    del extra
    return sum(4 * s.array.size for s in slots)
