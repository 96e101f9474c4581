"""Readers and writers for every on-disk format used by the pipeline.

All binary formats are little-endian with a 4-byte ASCII magic. Readers raise
`DataError` naming the file and the byte offset where parsing failed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List

import numpy as np

from .errors import ConfigError, DataError
from .geometry import CameraCalib, PointCloud
from .painting import Box3D, SemanticMask
from .voxelgrid import VoxelBatch


class _Reader:
    def __init__(self, path):
        self.path = Path(path)
        try:
            self.buf = self.path.read_bytes()
        except OSError as exc:
            raise DataError(f"{self.path}: cannot read ({exc.strerror})") from None
        self.pos = 0

    def fail(self, msg):
        raise DataError(f"{self.path}: {msg} at byte offset {self.pos}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            self.fail(f"truncated file (wanted {n} more bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes):
        got = self.take(4)
        if got != expected:
            self.pos -= 4
            self.fail(f"bad magic {got!r}, expected {expected!r}")

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))

    def end(self):
        if self.pos != len(self.buf):
            self.fail(f"{len(self.buf) - self.pos} trailing bytes")


def _write(path, chunks: List[bytes]):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise DataError(f"{path}: cannot write ({exc.strerror})") from None


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# points.bin -------------------------------------------------------------

def write_points(path, cloud: PointCloud):
    has_i = cloud.intensity is not None
    rec = cloud.xyz if not has_i else np.concatenate([cloud.xyz, cloud.intensity[:, None]], axis=1)
    _write(path, [b"FPPC", struct.pack("<IB", cloud.n, int(has_i)), _f32(rec)])


def read_points(path) -> PointCloud:
    r = _Reader(path)
    r.magic(b"FPPC")
    n = r.u32()
    has_i = r.u8()
    if has_i not in (0, 1):
        r.pos -= 1
        r.fail(f"has_intensity flag must be 0 or 1, got {has_i}")
    width = 4 if has_i else 3
    rec = r.array("f4", n * width).reshape(n, width).astype(np.float64)
    r.end()
    return PointCloud(rec[:, :3], rec[:, 3] if has_i else None)


# labels.bin -------------------------------------------------------------

def write_labels(path, labels):
    labels = np.asarray(labels)
    _write(path, [b"FPLB", struct.pack("<I", labels.shape[0]), np.ascontiguousarray(labels, "<i4").tobytes()])


def read_labels(path) -> np.ndarray:
    r = _Reader(path)
    r.magic(b"FPLB")
    n = r.u32()
    out = r.array("i4", n).astype(np.int64)
    r.end()
    return out


# semantic scores (.fpsc) --------------------------------------------------

def write_scores(path, scores):
    scores = np.asarray(scores)
    n, m = scores.shape
    # 16-byte header: magic, n, m, reserved
    _write(path, [b"FPSC", struct.pack("<III", n, m, 0), _f32(scores)])


def read_scores(path) -> np.ndarray:
    r = _Reader(path)
    r.magic(b"FPSC")
    n, m = r.u32(), r.u32()
    r.u32()
    out = r.array("f4", n * m).reshape(n, m)
    r.end()
    return out


# voxel batch (.fpvx) ----------------------------------------------------

def write_voxels(path, batch: VoxelBatch):
    e, big_m, c = batch.features.shape
    _write(path, [b"FPVX", struct.pack("<III", e, big_m, c),
                  np.ascontiguousarray(batch.coords, "<i4").tobytes(),
                  np.ascontiguousarray(batch.counts, "<u4").tobytes(),
                  _f32(batch.features)])


def read_voxels(path) -> Dict[str, np.ndarray]:
    """Coordinates, counts and features of an FPVX file (slot provenance is not stored)."""
    r = _Reader(path)
    r.magic(b"FPVX")
    e, big_m, c = r.u32(), r.u32(), r.u32()
    coords = r.array("i4", e * 3).reshape(e, 3)
    counts = r.array("u4", e)
    feats = r.array("f4", e * big_m * c).reshape(e, big_m, c)
    r.end()
    return {"coords": coords, "counts": counts, "features": feats}


# painted cloud (.fppt) ----------------------------------------------------

def write_painted(path, records, m: int):
    records = np.asarray(records)
    if records.shape[1] != 3 + 2 * m:
        raise ConfigError(f"painted records need {3 + 2 * m} channels, got {records.shape[1]}")
    _write(path, [b"FPPT", struct.pack("<II", records.shape[0], m), _f32(records)])


def read_painted(path):
    r = _Reader(path)
    r.magic(b"FPPT")
    n, m = r.u32(), r.u32()
    rec = r.array("f4", n * (3 + 2 * m)).reshape(n, 3 + 2 * m)
    r.end()
    return rec, m


# network checkpoint (.fpnn) ---------------------------------------------

def write_checkpoint(path, tensors: Dict[str, np.ndarray]):
    chunks = [b"FPNN", struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(_f32(arr))
    _write(path, chunks)


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    r = _Reader(path)
    r.magic(b"FPNN")
    count = r.u32()
    out = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        out[name] = r.array("f4", int(np.prod(dims, dtype=np.int64))).reshape(dims)
    r.end()
    return out


# masks (binary PGM) -------------------------------------------------------

def write_mask(path, mask: SemanticMask):
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    _write(path, [header, np.ascontiguousarray(mask.data, np.uint8).tobytes()])


def read_mask(path, classes: int) -> SemanticMask:
    r = _Reader(path)
    fields = []
    while len(fields) < 4:
        # skip whitespace and comments between header tokens
        while r.pos < len(r.buf) and r.buf[r.pos:r.pos + 1].isspace():
            r.pos += 1
        if r.buf[r.pos:r.pos + 1] == b"#":
            while r.pos < len(r.buf) and r.buf[r.pos:r.pos + 1] != b"\n":
                r.pos += 1
            continue
        start = r.pos
        while r.pos < len(r.buf) and not r.buf[r.pos:r.pos + 1].isspace():
            r.pos += 1
        if start == r.pos:
            r.fail("truncated PGM header")
        fields.append((start, r.buf[start:r.pos]))
    if fields[0][1] != b"P5":
        r.pos = fields[0][0]
        r.fail(f"bad magic {fields[0][1]!r}, expected b'P5'")
    try:
        width, height, maxval = (int(tok) for _, tok in fields[1:])
    except ValueError:
        r.pos = fields[1][0]
        r.fail("non-integer PGM header field")
    if maxval > 255:
        r.pos = fields[3][0]
        r.fail("only 8-bit PGM masks are supported")
    r.pos += 1
    data = r.array("u1", width * height).reshape(height, width)
    r.end()
    if data.size and data.max() >= classes:
        raise DataError(f"{Path(path)}: mask holds class {int(data.max())} but only {classes} classes exist")
    return SemanticMask(data, classes)


# JSON formats -------------------------------------------------------------

def _load_json(path):
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at byte offset {exc.pos}") from None


def dump_json(path, obj):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"{path}: cannot write ({exc.strerror})") from None


def write_calib(path, calib: CameraCalib):
    dump_json(path, calib.to_dict())


def read_calib(path) -> CameraCalib:
    return CameraCalib.from_dict(_load_json(path))


def write_boxes(path, boxes):
    dump_json(path, [b.to_dict() for b in boxes])


def read_boxes(path) -> List[Box3D]:
    data = _load_json(path)
    if not isinstance(data, list):
        raise DataError(f"{Path(path)}: box file must hold a JSON array")
    return [Box3D.from_dict(d) for d in data]


def load_json(path):
    return _load_json(path)
