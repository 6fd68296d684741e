"""The :class:`Volume` carrier and the OTDV binary container.

Layout of a volume file (all little-endian)::

    b"OTDV"  u16 version=1  u32 D  u32 H  u32 W  f64 vz  f64 vy  f64 vx
    D*H*W f32 values, z-major row-major

A checkpoint reuses the header with D = H = W = 0, zero voxel sizes, then a
``u32`` manifest length, a UTF-8 JSON manifest ``[{"name", "shape"}, ...]``
and the concatenated f32 payloads in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"OTDV"
VERSION = 1
_HEADER = struct.Struct("<4sH3I3d")


@dataclass
class Volume:
    """A 3-D intensity image of shape ``(D, H, W)``.

    ``voxel_size`` is ``(vz, vy, vx)`` in meters, or ``None`` when unknown.
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ConfigError(f"a volume needs 3 axes, got shape {self.data.shape}")
        if self.voxel_size is not None:
            self.voxel_size = tuple(float(v) for v in self.voxel_size)
            if all(v == 0 for v in self.voxel_size):
                self.voxel_size = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.voxel_size)


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_volume(volume: Volume) -> bytes:
    d, h, w = volume.shape
    vs = volume.voxel_size or (0.0, 0.0, 0.0)
    header = _HEADER.pack(MAGIC, VERSION, d, h, w, *vs)
    return header + np.ascontiguousarray(volume.data, dtype="<f4").tobytes()


def write_volume(path, volume: Volume) -> None:
    _atomic_write(Path(path), encode_volume(volume))


def _read_header(buf: bytes, path) -> tuple:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d, h, w, vz, vy, vx = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{path}: not an OTDV file")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported OTDV version {version}")
    return (d, h, w), (vz, vy, vx)


def read_volume(path) -> Volume:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    (d, h, w), vs = _read_header(buf, path)
    if d == 0 and h == 0 and w == 0:
        raise FormatError(f"{path}: is a checkpoint, not a volume")
    n = d * h * w
    body = buf[_HEADER.size:]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: expected {n} values, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(d, h, w)
    return Volume(data, voxel_size=vs)


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, 0, 0, 0, 0.0, 0.0, 0.0)
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    chunks = [header, struct.pack("<I", len(manifest)), manifest]
    for v in tensors.values():
        chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    _atomic_write(Path(path), encode_checkpoint(tensors, meta))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(name -> float64 array, meta)`` in stored order."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    extents, _ = _read_header(buf, path)
    if extents != (0, 0, 0):
        raise FormatError(f"{path}: is a volume, not a checkpoint")
    off = _HEADER.size
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    try:
        manifest = json.loads(buf[off:off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest") from exc
    off += mlen
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if off + 4 * n > len(buf):
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        out[entry["name"]] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after payload")
    return out, manifest.get("meta", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
