"""Binary weight files ("RVPW"): little-endian float32 tensors keyed by name.

Layout: magic ``RVPW``, version u16, count u32, then per tensor a u32 name
length, UTF-8 name, rank u8, rank x u32 dims and the float32 payload. The
model config travels in a JSON sidecar ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import DataError

MAGIC = b"RVPW"
VERSION = 1


class WeightsError(DataError):
    """Unreadable, truncated or incompatible weight file."""


def write_tensors(tensors: dict, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_tensors(path) -> dict:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise WeightsError(f"weights file not found: {path}") from exc
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightsError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightsError(f"{path}: unknown magic, not an RVPW file")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise WeightsError(f"{path}: unsupported version {version} (expected {VERSION})")
    tensors = {}
    for i in range(count):
        (n,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        try:
            name = take(n, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsError(f"{path}: tensor {i} name is not UTF-8") from exc
        if name in tensors:
            raise WeightsError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"payload of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()
    if pos != len(buf):
        raise WeightsError(f"{path}: {len(buf) - pos} trailing bytes after {count} tensors")
    return tensors


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_weights(model, path) -> None:
    write_tensors({name: p.data for name, p in model.named_parameters()}, path)
    _sidecar(path).write_text(json.dumps({"model": model.cfg.to_dict()}, indent=2, sort_keys=True))


def load_weights(path, model=None):
    """Fill ``model`` (or a model rebuilt from the sidecar config) from ``path``."""
    tensors = read_tensors(path)
    if model is None:
        from .model import RVPAFCOS, ModelConfig
        side = _sidecar(path)
        if not side.exists():
            raise WeightsError(f"{path}: no model given and config sidecar {side} missing")
        model = RVPAFCOS(ModelConfig.from_dict(json.loads(side.read_text())["model"]))
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise WeightsError(f"{path}: parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise WeightsError(f"{path}: {name} has shape {tensors[name].shape}, model expects {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype)
    return model
