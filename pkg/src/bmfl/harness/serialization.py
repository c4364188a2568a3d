"""Binary checkpoint and tensor-archive formats.

Checkpoint ("BMFL"), all integers little-endian::

    magic b"BMFL" | version u32 | header length u32 | header JSON (utf-8)
    | param count u32 | per param: name length u16, name, rank u8, dims u32 x rank, f32 payload
    | optimizer flag u8 | [step u64, beta1 f64, beta2 f64, eps f64, weight_decay f64,
                           then first and second moments per param as f32 payloads]
    | crc32 u32 of everything before it

Tensor archive ("BMTA")::

    magic b"BMTA" | version u32 | record count u64
    | per record: label u32, rank u8, dims u32 x rank, f32 payload
    | optional b"ROIS" | entry count u32 | per entry: name length u16, name, start u32, end u32
    | crc32 u32 of everything before it
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bmfl.brain_encoder import RoiMap
from bmfl.errors import FormatError, InputError
from bmfl.numerics import OptimizerState

CHECKPOINT_MAGIC = b"BMFL"
CHECKPOINT_VERSION = 1
ARCHIVE_MAGIC = b"BMTA"
ARCHIVE_VERSION = 1
ROI_TAG = b"ROIS"
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    """Named float32 parameters plus a JSON-serialisable header and optional optimizer state."""

    params: "OrderedDict[str, np.ndarray]"
    header: dict = field(default_factory=dict)
    optimizer: OptimizerState | None = None

    @property
    def kind(self) -> str:
        return self.header.get("kind", "")


# low-level writers / readers -------------------------------------------------
def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise InputError("arrays of rank > 255 cannot be stored")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def _write_name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.source}: invalid utf-8 in name") from None

    def array(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I")
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * count), dtype=_F32).reshape(shape).astype(np.float32)

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def _checked_body(data: bytes, magic: bytes, version: int, source: str) -> _Reader:
    if len(data) < len(magic) + 8 or data[:len(magic)] != magic:
        raise FormatError(f"{source}: not a {magic.decode()} file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{source}: checksum mismatch, file is corrupted")
    reader = _Reader(body, source)
    reader.take(len(magic))
    (found,) = reader.unpack("<I")
    if found != version:
        raise FormatError(f"{source}: unsupported format version {found} (expected {version})")
    return reader


def _finish(buf: io.BytesIO) -> bytes:
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


# checkpoints ------------------------------------------------------------------
def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = json.dumps(ckpt.header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _write_name(buf, name)
        _write_array(buf, arr)
    opt = ckpt.optimizer
    buf.write(struct.pack("<B", opt is not None))
    if opt is not None:
        if len(opt.m) != len(ckpt.params) or len(opt.v) != len(ckpt.params):
            raise InputError("optimizer state must cover every stored parameter")
        buf.write(struct.pack("<Q4d", opt.step, opt.beta1, opt.beta2, opt.eps, opt.weight_decay))
        for arr in (*opt.m, *opt.v):
            _write_array(buf, arr)
    return _finish(buf)


def checkpoint_from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _checked_body(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, source)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header ({exc})") from None
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        name = r.name()
        params[name] = r.array()
    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt:
        step, b1, b2, eps, wd = r.unpack("<Q4d")
        moments = [r.array() for _ in range(2 * count)]
        optimizer = OptimizerState(m=moments[:count], v=moments[count:], step=step, beta1=b1, beta2=b2,
                                   eps=eps, weight_decay=wd)
    if not r.at_end():
        raise FormatError(f"{source}: {len(r.data) - r.pos} unexpected trailing bytes")
    return Checkpoint(params, header, optimizer)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {p}: {exc}") from exc
    return checkpoint_from_bytes(data, str(p))


# tensor archives --------------------------------------------------------------
@dataclass
class TensorArchive:
    arrays: list[np.ndarray]
    labels: np.ndarray
    roi_map: RoiMap | None = None

    def stacked(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros((0,), np.float32)
        shapes = {a.shape for a in self.arrays}
        if len(shapes) != 1:
            raise FormatError(f"records have differing shapes {sorted(shapes)}")
        return np.stack(self.arrays)


def archive_bytes(arrays, labels, roi_map: RoiMap | None = None) -> bytes:
    labels = np.asarray(labels)
    if len(arrays) != len(labels):
        raise InputError(f"{len(arrays)} records but {len(labels)} labels")
    if len(labels) and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise InputError("labels must fit in an unsigned 32-bit integer")
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<IQ", ARCHIVE_VERSION, len(labels)))
    for arr, label in zip(arrays, labels):
        buf.write(struct.pack("<I", int(label)))
        _write_array(buf, arr)
    if roi_map is not None:
        table = roi_map.to_table()
        buf.write(ROI_TAG)
        buf.write(struct.pack("<I", len(table)))
        for name, start, end in table:
            _write_name(buf, name)
            buf.write(struct.pack("<II", start, end))
    return _finish(buf)


def archive_from_bytes(data: bytes, source: str = "<bytes>") -> TensorArchive:
    r = _checked_body(data, ARCHIVE_MAGIC, ARCHIVE_VERSION, source)
    (count,) = r.unpack("<Q")
    arrays, labels = [], []
    for _ in range(count):
        (label,) = r.unpack("<I")
        labels.append(label)
        arrays.append(r.array())
    roi_map = None
    if not r.at_end():
        if r.take(4) != ROI_TAG:
            raise FormatError(f"{source}: unexpected bytes after the records")
        (n,) = r.unpack("<I")
        table = []
        for _ in range(n):
            name = r.name()
            start, end = r.unpack("<II")
            table.append((name, start, end))
        try:
            roi_map = RoiMap.from_table(table)
        except InputError as exc:
            raise FormatError(f"{source}: invalid ROI table ({exc})") from None
        if not r.at_end():
            raise FormatError(f"{source}: unexpected trailing bytes")
    return TensorArchive(arrays, np.asarray(labels, np.int64), roi_map)


def write_archive(path, arrays, labels, roi_map: RoiMap | None = None) -> None:
    Path(path).write_bytes(archive_bytes(list(arrays), labels, roi_map))


def read_archive(path) -> TensorArchive:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read archive {p}: {exc}") from exc
    return archive_from_bytes(data, str(p))
