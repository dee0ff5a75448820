"""Dense containers, seeded randomness and the L2IM binary container.

Matrices are plain ``float64`` numpy arrays in C (row-major) order. The
L2IM file layout is::

    b"L2IM" | u8 version (=1) | u64 LE manifest length | UTF-8 JSON manifest
    | raw little-endian float64 payloads, row-major

The manifest is ``{"blobs": [{"name", "shape", "offset"}, ...], "meta": {...}}``
where ``offset`` counts bytes from the start of the payload section.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import FormatError, IoError, SerializationError

MAGIC = b"L2IM"
VERSION = 1
RNG_ALGORITHM = "numpy-pcg64"

_HEADER = struct.Struct("<4sBQ")


@dataclass(frozen=True)
class TensorBlob:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def from_array(cls, name: str, array) -> "TensorBlob":
        a = np.ascontiguousarray(array, dtype=np.float64)
        return cls(name, a.shape, a.reshape(-1))

    def array(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.float64).reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, TensorBlob):
            return NotImplemented
        a = np.asarray(self.data, dtype=np.float64).reshape(-1)
        b = np.asarray(other.data, dtype=np.float64).reshape(-1)
        return (self.name == other.name and self.shape == other.shape
                and a.shape == b.shape and a.tobytes() == b.tobytes())

    __hash__ = None


def _validate(blob: TensorBlob) -> np.ndarray:
    if not 1 <= len(blob.shape) <= 4:
        raise SerializationError(f"blob {blob.name!r}: shape must have 1-4 dims, got {blob.shape}")
    data = np.asarray(blob.data, dtype=np.float64).reshape(-1)
    if int(np.prod(blob.shape, dtype=np.int64)) != data.size:
        raise SerializationError(
            f"blob {blob.name!r}: shape {blob.shape} does not match {data.size} values")
    if not np.all(np.isfinite(data)):
        raise SerializationError(f"blob {blob.name!r} contains non-finite values")
    return data


def save_blobs(blobs: Sequence[TensorBlob], path, meta: dict[str, Any] | None = None) -> None:
    entries, payloads, offset = [], [], 0
    for blob in blobs:
        data = _validate(blob)
        raw = data.astype("<f8").tobytes()
        entries.append({"name": blob.name, "shape": list(blob.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"blobs": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
            fh.write(manifest)
            for raw in payloads:
                fh.write(raw)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_container(path) -> tuple[list[TensorBlob], dict[str, Any]]:
    """Load blobs and the free-form ``meta`` section of an L2IM file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _HEADER.size
    if start + mlen > len(raw):
        raise FormatError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest") from exc
    payload = raw[start + mlen:]
    blobs = []
    for entry in manifest.get("blobs", []):
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        lo = int(entry["offset"])
        hi = lo + 8 * n
        if lo < 0 or hi > len(payload):
            raise FormatError(f"{path}: blob {entry['name']!r} runs past end of file")
        data = np.frombuffer(payload[lo:hi], dtype="<f8").astype(np.float64)
        blobs.append(TensorBlob(entry["name"], shape, data))
    return blobs, manifest.get("meta", {})


def load_blobs(path) -> list[TensorBlob]:
    return load_container(path)[0]


def blobs_to_dict(blobs: Iterable[TensorBlob]) -> dict[str, np.ndarray]:
    return {b.name: b.array() for b in blobs}


def dict_to_blobs(arrays: dict[str, np.ndarray], prefix: str = "") -> list[TensorBlob]:
    return [TensorBlob.from_array(prefix + k, v) for k, v in arrays.items()]


def array_digest(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over names and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.astype("<f8").tobytes())
    return h.hexdigest()


class SeededRng:
    """Thin wrapper fixing the generator algorithm so streams are reproducible."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def uniform_open0(self, size) -> np.ndarray:
        """Uniform draws on (0, 1]."""
        return 1.0 - self.gen.random(size)

    def __getattr__(self, item):
        return getattr(self.gen, item)


def key_from_string(text: str) -> int:
    """Stable 32-bit key for sub-seeding by string ids."""
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")
