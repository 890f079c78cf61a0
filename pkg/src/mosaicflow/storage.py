"""Binary cube and checkpoint files, atomic writes, PPM export.

Cube file (little-endian)::

    b"MFCUBE\\0\\0"  magic, 8 bytes
    uint32          version (1)
    uint32 x 3      bands, height, width
    float64 ...     row-major payload

Checkpoint file (little-endian)::

    b"MFCKPT\\0\\0"  magic, 8 bytes
    uint32          version (1)
    uint32          tensor count
    per tensor:     uint16 name length, utf-8 name, uint32 ndim, uint32 x ndim extents
    float64 ...     payloads concatenated in table order
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

CUBE_MAGIC = b"MFCUBE\0\0"
CKPT_MAGIC = b"MFCKPT\0\0"
VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def cube_bytes(cube: np.ndarray) -> bytes:
    cube = np.asarray(cube, dtype="<f8")
    if cube.ndim == 2:
        cube = cube[None]
    if cube.ndim != 3:
        raise FormatError(f"cube must be 2-d or 3-d, got shape {cube.shape}")
    header = CUBE_MAGIC + struct.pack("<4I", VERSION, *cube.shape)
    return header + np.ascontiguousarray(cube).tobytes()


def save_cube(path, cube: np.ndarray) -> Path:
    """Planes are stored as single-band cubes."""
    return atomic_write(path, cube_bytes(cube))


def load_cube(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != CUBE_MAGIC:
        raise FormatError(f"{path}: not a cube file")
    version, c, h, w = struct.unpack_from("<4I", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported cube version {version}")
    payload = raw[24:]
    if len(payload) != 8 * c * h * w:
        raise FormatError(f"{path}: payload size does not match header ({c}, {h}, {w})")
    return np.frombuffer(payload, dtype="<f8").reshape(c, h, w).astype(np.float64)


def load_plane(path) -> np.ndarray:
    cube = load_cube(path)
    if cube.shape[0] != 1:
        raise FormatError(f"{path}: expected a single-band file, got {cube.shape[0]} bands")
    return cube[0]


def checkpoint_bytes(params: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<2I", VERSION, len(params))]
    for name, arr in params.items():
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    for arr in params.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: dict[str, np.ndarray]) -> Path:
    return atomic_write(path, checkpoint_bytes(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<2I", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after payload")
    return out


def ppm_bytes(cube: np.ndarray, bands: tuple[int, int, int] = (13, 8, 3)) -> bytes:
    """8-bit pseudo-colour PPM; ``bands`` are 1-based (R, G, B) indices."""
    rgb = np.stack([cube[b - 1] for b in bands], axis=-1)
    img = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def save_ppm(path, cube: np.ndarray, bands: tuple[int, int, int] = (13, 8, 3)) -> Path:
    return atomic_write(path, ppm_bytes(cube, bands))
