"""Binary file formats: mask snapshots, weight files and IDX datasets.

Snapshot (``SHDLB1``), all integers little-endian::

    magic        6 bytes  b"SHDLB1"
    granularity  u8       0 = weight, 1 = block
    n_tensors    u32
    per tensor:
      name_len   u16
      name       name_len bytes, UTF-8
      count      u64      number of weights (or blocks) in the tensor
      bits       ceil(count / 8) bytes, bit i of the mask is bit (i % 8) of byte i // 8
    crc32        u32      zlib.crc32 of every byte between the magic and the checksum

Weight file (``SHDLW1``)::

    magic        6 bytes  b"SHDLW1"
    n_tensors    u32
    per tensor:
      name_len   u16, name
      rank       u8
      shape      rank x u32
      values     prod(shape) x float32, C order
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"SHDLB1"
WEIGHT_MAGIC = b"SHDLW1"
GRANULARITIES = ("weight", "block")
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass
class Snapshot:
    granularity: str = "weight"
    masks: dict = field(default_factory=dict)  # name -> flat bool array

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")

    def as_dict(self):
        return dict(self.masks)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_snapshot(snap: Snapshot) -> bytes:
    body = bytearray(struct.pack("<BI", GRANULARITIES.index(snap.granularity), len(snap.masks)))
    for name, mask in snap.masks.items():
        mask = np.asarray(mask, dtype=bool).ravel()
        body += _name_bytes(name)
        body += struct.pack("<Q", mask.size)
        body += np.packbits(mask, bitorder="little").tobytes()
    return SNAPSHOT_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_snapshot(data: bytes) -> Snapshot:
    if data[:6] != SNAPSHOT_MAGIC:
        raise FormatError("snapshot: bad magic")
    if len(data) < 6 + 4:
        raise FormatError("snapshot: truncated")
    body, (crc,) = data[6:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("snapshot: checksum mismatch")
    r = _Reader(body, "snapshot")
    gran, n = r.unpack("<BI")
    if gran >= len(GRANULARITIES):
        raise FormatError(f"snapshot: unknown granularity {gran}")
    masks = {}
    for _ in range(n):
        name = r.name()
        (count,) = r.unpack("<Q")
        packed = np.frombuffer(r.take((count + 7) // 8), dtype=np.uint8)
        masks[name] = np.unpackbits(packed, count=count, bitorder="little").astype(bool)
    if r.pos != len(body):
        raise FormatError("snapshot: trailing bytes")
    return Snapshot(GRANULARITIES[gran], masks)


def write_snapshot(snap: Snapshot, path) -> None:
    Path(path).write_bytes(encode_snapshot(snap))


def read_snapshot(path) -> Snapshot:
    return decode_snapshot(Path(path).read_bytes())


def snapshot_of(mask) -> Snapshot:
    """Snapshot of a MaskState (weight granularity) or BlockMaskState (block granularity)."""
    if hasattr(mask, "block_dict"):
        return Snapshot("block", mask.block_dict())
    return Snapshot("weight", mask.as_dict())


def encode_weights(tensors: dict) -> bytes:
    out = bytearray(WEIGHT_MAGIC + struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        out += _name_bytes(name)
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def decode_weights(data: bytes) -> dict:
    if data[:6] != WEIGHT_MAGIC:
        raise FormatError("weights: bad magic")
    r = _Reader(data, "weights")
    r.take(6)
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        name = r.name()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise FormatError("weights: trailing bytes")
    return tensors


def write_weights(tensors: dict, path) -> None:
    Path(path).write_bytes(encode_weights(tensors))


def read_weights(path) -> dict:
    return decode_weights(Path(path).read_bytes())


# --------------------------------------------------------------------------
# IDX (big-endian, unsigned byte payload)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    head = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _decode_idx(data: bytes, magic: int, what: str) -> np.ndarray:
    r = _Reader(data, what)
    (got,) = r.unpack(">I")
    if got != magic:
        raise FormatError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    shape = r.unpack(f">{ndim}I")
    count = int(np.prod(shape))
    payload = r.take(count)
    if r.pos != len(data):
        raise FormatError(f"{what}: trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def load_idx(image_path, label_path):
    """Return ``(images (n, h, w) uint8, labels (n,) uint8)``."""
    images = _decode_idx(Path(image_path).read_bytes(), IDX_IMAGE_MAGIC, str(image_path))
    labels = _decode_idx(Path(label_path).read_bytes(), IDX_LABEL_MAGIC, str(label_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels
