"""Header-prefixed binary tensor container (safetensors layout).

Layout: an unsigned 64-bit little-endian header length ``N``, then ``N``
bytes of UTF-8 JSON mapping tensor names to ``dtype``/``shape``/
``data_offsets``, then the raw little-endian data section. Offsets are
relative to the start of the data section.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IoFailure, MalformedHeader, OffsetOverlap, ShapeUnsupported, UnknownDtype

METADATA_KEY = "__metadata__"


class DType(enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def width(self) -> int:
        return _WIDTHS[self]

    @classmethod
    def parse(cls, tag: str) -> "DType":
        try:
            return cls(tag.upper())
        except ValueError:
            raise UnknownDtype(f"unsupported dtype {tag!r}", dtype=tag) from None


_WIDTHS = {DType.F64: 8, DType.F32: 4, DType.F16: 2, DType.BF16: 2}
_STORAGE = {DType.F64: "<f8", DType.F32: "<f4", DType.F16: "<f2", DType.BF16: "<u2"}
_COMPUTE = {DType.F64: np.float64, DType.F32: np.float32}


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if any(s < 0 for s in self.shape):
            raise ShapeUnsupported(f"negative dimension in {self.name!r}", shape=list(self.shape))
        expected = math.prod(self.shape) * self.dtype.width
        if expected != len(self.data):
            raise MalformedHeader(
                f"tensor {self.name!r} holds {len(self.data)} bytes, "
                f"shape {list(self.shape)} x {self.dtype.value} needs {expected}",
                name=self.name,
            )

    @property
    def nbytes(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class TensorStore:
    """Named tensors plus string metadata. Treated as immutable once built."""

    entries: dict[str, TensorEntry] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, entry in self.entries.items():
            if name != entry.name:
                raise ValueError(f"entry key {name!r} does not match entry name {entry.name!r}")
            if name == METADATA_KEY:
                raise ValueError(f"{METADATA_KEY!r} is reserved")

    @classmethod
    def from_entries(cls, entries, metadata: Mapping[str, str] | None = None) -> "TensorStore":
        table: dict[str, TensorEntry] = {}
        for e in entries:
            if e.name in table:
                raise ValueError(f"duplicate tensor name {e.name!r}")
            table[e.name] = e
        return cls(table, dict(metadata or {}))

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> TensorEntry:
        return self.entries[name]

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return sorted(self.entries)


# -- serialization ---------------------------------------------------------


def serialize(store: TensorStore) -> bytes:
    header: dict = {}
    if store.metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in sorted(store.metadata.items())}
    offset = 0
    chunks = []
    for name in sorted(store.entries):
        entry = store.entries[name]
        header[name] = {
            "dtype": entry.dtype.value,
            "shape": list(entry.shape),
            "data_offsets": [offset, offset + entry.nbytes],
        }
        chunks.append(entry.data)
        offset += entry.nbytes
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw + b"".join(chunks)


def deserialize(buf: bytes) -> TensorStore:
    if len(buf) < 8:
        raise MalformedHeader("file shorter than the 8-byte header length field")
    (n,) = struct.unpack_from("<Q", buf, 0)
    if 8 + n > len(buf):
        raise MalformedHeader(f"header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"invalid JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header is not a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    data = memoryview(buf)[8 + n :]
    spans = []
    entries = []
    for name, meta in header.items():
        if not isinstance(meta, dict):
            raise MalformedHeader(f"entry {name!r} is not an object")
        dtype, shape, offsets = meta.get("dtype"), meta.get("shape"), meta.get("data_offsets")
        if not isinstance(dtype, str):
            raise MalformedHeader(f"entry {name!r} lacks a dtype")
        dt = DType.parse(dtype)
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise MalformedHeader(f"entry {name!r} has an invalid shape")
        if not (
            isinstance(offsets, list)
            and len(offsets) == 2
            and all(isinstance(o, int) and o >= 0 for o in offsets)
        ):
            raise MalformedHeader(f"entry {name!r} has invalid data_offsets")
        begin, end = offsets
        if end < begin or end > len(data):
            raise OffsetOverlap(
                f"entry {name!r} range [{begin}, {end}) outside data section of {len(data)} bytes",
                name=name,
            )
        if end - begin != math.prod(shape) * dt.width:
            raise MalformedHeader(f"entry {name!r} byte length disagrees with shape and dtype", name=name)
        spans.append((begin, end, name))
        entries.append(TensorEntry(name, dt, tuple(shape), bytes(data[begin:end])))

    spans.sort()
    for (_, prev_end, prev), (begin, _, name) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise OffsetOverlap(f"entries {prev!r} and {name!r} overlap", names=[prev, name])
    return TensorStore.from_entries(entries, metadata)


def load(path: str | os.PathLike) -> TensorStore:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}", path=str(path)) from exc
    return deserialize(buf)


def save(store: TensorStore, path: str | os.PathLike) -> None:
    blob = serialize(store)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}", path=str(path)) from exc


# -- dtype conversion ------------------------------------------------------


def _bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32)


def _f32_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        rounded[nan] = ((bits[nan] >> 16) | 0x40).astype(np.uint16)
    return rounded


def _f64_to_f32_round_odd(x: np.ndarray) -> np.ndarray:
    # Rounding to odd first keeps the later f32 -> bf16 nearest-even step
    # equivalent to a single correctly rounded f64 -> bf16 conversion.
    with np.errstate(over="ignore"):
        t = x.astype(np.float32)
    back = t.astype(np.float64)
    inexact = np.isfinite(x) & (back != x)
    if inexact.any():
        toward_zero = inexact & (np.abs(back) > np.abs(x))
        t[toward_zero] = np.nextafter(t[toward_zero], np.float32(0))
        t.view(np.uint32)[inexact] |= np.uint32(1)
    return t


def decode(entry: TensorEntry) -> np.ndarray:
    """Raw values in their storage precision (BF16 decoded to float32), shaped."""
    arr = np.frombuffer(entry.data, dtype=_STORAGE[entry.dtype])
    if entry.dtype is DType.BF16:
        arr = _bf16_bits_to_f32(arr)
    return arr.reshape(entry.shape)


def to_compute(entry: TensorEntry, target: DType = DType.F64) -> np.ndarray:
    """Return the entry as a 2-D array in ``target`` precision (F64 or F32).

    Rank-1 tensors become a single row; scalars become 1x1.
    """
    if target not in _COMPUTE:
        raise UnknownDtype(f"compute dtype must be F64 or F32, got {target.value}")
    if len(entry.shape) > 2:
        raise ShapeUnsupported(
            f"tensor {entry.name!r} has rank {len(entry.shape)}; only rank <= 2 is supported",
            name=entry.name,
            shape=list(entry.shape),
        )
    arr = decode(entry)
    if arr.ndim < 2:
        arr = arr.reshape(1, -1)
    return np.array(arr, dtype=_COMPUTE[target], order="C")


def encode(name: str, values: np.ndarray, dtype: DType, shape=None) -> TensorEntry:
    """Convert ``values`` to ``dtype`` with round-to-nearest-even and pack them."""
    values = np.asarray(values)
    shape = tuple(values.shape if shape is None else shape)
    flat = values.reshape(-1)
    if dtype is DType.BF16:
        if flat.dtype == np.float64:
            flat = _f64_to_f32_round_odd(flat)
        raw = _f32_to_bf16_bits(flat.astype(np.float32)).astype("<u2")
    else:
        with np.errstate(over="ignore"):
            raw = flat.astype(_STORAGE[dtype])
    return TensorEntry(name, dtype, shape, raw.tobytes())
