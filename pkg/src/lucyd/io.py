"""LVOL volume files and LCKP checkpoint files.

Both formats are ``magic (4 bytes) | u32-LE header length | JSON header | payload``.
The JSON header is space-padded so the payload starts on a 16-byte boundary;
payloads are little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

LVOL_MAGIC = b"LVOL"
LCKP_MAGIC = b"LCKP"
ALIGN = 16
F32LE = np.dtype("<f4")


class FormatError(ValueError):
    pass


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    pad = (-(8 + len(text))) % ALIGN
    text += b" " * pad
    return magic + struct.pack("<I", len(text)) + text + payload


def _unpack(buf: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"not a {magic.decode()} file (bad magic {bytes(buf[:4])!r})")
    (n,) = struct.unpack("<I", buf[4:8])
    if 8 + n > len(buf):
        raise FormatError("header length exceeds file size")
    header = json.loads(bytes(buf[8 : 8 + n]).decode())
    return header, memoryview(buf)[8 + n :]


def volume_bytes(vol: np.ndarray, meta: Mapping | None = None) -> bytes:
    arr = np.asarray(vol)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"LVOL stores rank-4 CDHW volumes, got shape {arr.shape}")
    header = {"version": 1, "dtype": "f32le", "axes": "CDHW", "shape": [int(s) for s in arr.shape]}
    if meta:
        header["meta"] = dict(meta)
    return _pack(LVOL_MAGIC, header, np.ascontiguousarray(arr, dtype=F32LE).tobytes())


def save_volume(path: str | Path, vol: np.ndarray, meta: Mapping | None = None) -> None:
    Path(path).write_bytes(volume_bytes(vol, meta))


def read_volume(path: str | Path) -> tuple[np.ndarray, dict]:
    """Return the (c, d, h, w) float32 array and the full JSON header."""
    header, payload = _unpack(Path(path).read_bytes(), LVOL_MAGIC)
    if header.get("version") != 1 or header.get("dtype") != "f32le" or header.get("axes") != "CDHW":
        raise FormatError(f"unsupported LVOL header {header}")
    shape = tuple(header["shape"])
    if len(payload) != 4 * int(np.prod(shape)):
        raise FormatError(f"payload is {len(payload)} bytes, shape {shape} needs {4 * int(np.prod(shape))}")
    arr = np.frombuffer(payload, dtype=F32LE).reshape(shape).astype(np.float32)
    return arr, header


def load_volume(path: str | Path) -> np.ndarray:
    return read_volume(path)[0]


def checkpoint_bytes(tensors: Mapping[str, np.ndarray], manifest: dict) -> bytes:
    """Serialise named float32 tensors; ``manifest`` gets a ``tensors`` table added."""
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype=F32LE).tobytes()
        table.append({"name": name, "shape": list(np.shape(tensors[name])), "byte_offset": offset, "byte_len": len(data)})
        chunks.append(data)
        offset += len(data)
    header = dict(manifest)
    header.setdefault("version", 1)
    header["tensors"] = table
    return _pack(LCKP_MAGIC, header, b"".join(chunks))


def save_checkpoint_file(path: str | Path, tensors: Mapping[str, np.ndarray], manifest: dict) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors, manifest))


def read_checkpoint_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _unpack(Path(path).read_bytes(), LCKP_MAGIC)
    tensors = {}
    end = 0
    for t in sorted(header["tensors"], key=lambda t: t["byte_offset"]):
        off, n = t["byte_offset"], t["byte_len"]
        if off < end or off + n > len(payload):
            raise FormatError(f"tensor {t['name']!r} overlaps or runs past the payload")
        if n != 4 * int(np.prod(t["shape"])):
            raise FormatError(f"tensor {t['name']!r}: byte_len {n} does not match shape {t['shape']}")
        tensors[t["name"]] = np.frombuffer(payload[off : off + n], dtype=F32LE).reshape(t["shape"]).astype(np.float32)
        end = off + n
    return tensors, header
