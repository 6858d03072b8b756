"""Versioned, byte-deterministic checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, a JSON header (config
plus a tensor index with offsets into the payload), then the raw little-endian
C-order tensor bytes in sorted name order. Identical parameters always produce
identical files, and save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ProbSegModel

MAGIC = b"PSEGCKPT"
FORMAT_VERSION = 1

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH_DTYPES = {"<f4": torch.float32, "<f8": torch.float64}


def save_checkpoint(path: str | Path, model: ProbSegModel) -> None:
    state = model.state_dict()
    names = sorted(state)
    index: dict[str, dict] = {}
    payload = bytearray()
    for name in names:
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().tobytes()
        index[name] = {
            "dtype": _DTYPES[t.dtype],
            "shape": list(t.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        }
        payload += raw
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.cfg),
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path) -> ProbSegModel:
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    header = json.loads(blob[header_start : header_start + header_len])
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version in {path}")
    payload = blob[header_start + header_len :]

    cfg = ModelConfig(**header["config"])
    model = ProbSegModel(cfg, seed=0)
    state: dict[str, torch.Tensor] = {}
    for name, meta in header["tensors"].items():
        if meta["dtype"] not in _TORCH_DTYPES:
            raise ValueError(f"unsupported tensor dtype {meta['dtype']} in {path}")
        start, nbytes = meta["offset"], meta["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=meta["dtype"])
        state[name] = torch.from_numpy(arr.copy()).reshape(meta["shape"])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ValueError(f"checkpoint {path} does not match the model: {e}") from e
    return model
