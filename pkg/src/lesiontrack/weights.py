"""Versioned weights container.

Layout: ``b"LTWT"``, uint32 version, uint64 header length, a UTF-8 JSON header
(kind, architecture, ordered tensor names/shapes), then each tensor as
little-endian float32 in header order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np
import torch

from .errors import DataError

MAGIC = b"LTWT"
VERSION = 1


def save_weights(path, model: torch.nn.Module, kind: str, architecture: dict):
    state = model.state_dict()
    header = {
        "format": "lesiontrack-weights",
        "version": VERSION,
        "kind": kind,
        "architecture": architecture,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hb)))
        fh.write(hb)
        for v in state.values():
            fh.write(v.detach().cpu().numpy().astype("<f4").tobytes())


def read_weights(path) -> tuple[dict, dict]:
    """Returns ``(header, {name: float32 array})``."""
    if not os.path.exists(path):
        raise DataError(f"weights file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 4 + struct.calcsize("<IQ")
    if raw[:4] != MAGIC or len(raw) < off:
        raise DataError(f"{path}: not a weights file")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported weights version {version}")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt weights header") from None
    off += hlen
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if off + 4 * n > len(raw):
            raise DataError(f"{path}: payload size does not match header")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t["shape"])
        tensors[t["name"]] = arr.astype(np.float32)
        off += 4 * n
    if off != len(raw):
        raise DataError(f"{path}: payload size does not match header")
    return header, tensors


def load_into(model: torch.nn.Module, tensors: dict):
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state, strict=True)
    return model


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
