"""Binary dataset and checkpoint files.

Dataset (little-endian)::

    b"MSFM" | u32 version=1 | u32 N | u32 D | u32 C
    | N*D f64 samples | N*C f64 conditions | u32 len | len bytes UTF-8 JSON metadata

Checkpoint (little-endian)::

    b"MSCK" | u32 version=1 | u32 len | len bytes UTF-8 JSON header
    | u64 P | P f64 parameters
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"MSFM"
CHECKPOINT_MAGIC = b"MSCK"
VERSION = 1

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray
    conditions: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be an N x D array")
        if self.conditions is not None:
            self.conditions = np.asarray(self.conditions, dtype=np.float64)
            if self.conditions.ndim != 2 or len(self.conditions) != len(self.samples):
                raise ValueError("conditions must be an N x C array matching samples")
            if self.conditions.shape[1] == 0:
                self.conditions = None
        if len(self.samples) < 1:
            raise ValueError("dataset must hold at least one sample")
        if not np.all(np.isfinite(self.samples)) or (
                self.conditions is not None and not np.all(np.isfinite(self.conditions))):
            raise ValueError("dataset entries must be finite")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def cond_dim(self) -> int:
        return 0 if self.conditions is None else self.conditions.shape[1]

    @property
    def name(self) -> str | None:
        return self.metadata.get("name")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"truncated file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype=_F64).astype(np.float64)


def _check_header(r: _Reader, magic: bytes):
    got = r.take(4, "magic")
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")


def dataset_bytes(ds: Dataset) -> bytes:
    meta = json.dumps(ds.metadata, sort_keys=True).encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack("<IIII", VERSION, ds.n, ds.dim, ds.cond_dim),
             ds.samples.astype(_F64).tobytes()]
    if ds.conditions is not None:
        parts.append(ds.conditions.astype(_F64).tobytes())
    parts += [struct.pack("<I", len(meta)), meta]
    return b"".join(parts)


def parse_dataset(buf: bytes) -> Dataset:
    r = _Reader(buf)
    _check_header(r, DATASET_MAGIC)
    n, d, c = r.u32("N"), r.u32("D"), r.u32("C")
    if n == 0:
        raise FormatError("dataset file holds zero samples")
    samples = r.f64(n * d, "samples").reshape(n, d)
    cond = r.f64(n * c, "conditions").reshape(n, c) if c else None
    meta_len = r.u32("metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    return Dataset(samples, cond, meta)


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def checkpoint_bytes(header: dict, params: np.ndarray) -> bytes:
    params = np.asarray(params, dtype=np.float64).ravel()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(head)), head,
                     struct.pack("<Q", params.size), params.astype(_F64).tobytes()])


def parse_checkpoint(buf: bytes) -> tuple[dict, np.ndarray]:
    r = _Reader(buf)
    _check_header(r, CHECKPOINT_MAGIC)
    head = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
    p = r.u64("parameter count")
    params = r.f64(p, "parameters")
    expected = head.get("n_params")
    if expected is not None and expected != p:
        raise FormatError(f"header declares {expected} parameters, file holds {p}")
    return head, params
