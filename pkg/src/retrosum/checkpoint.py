"""Versioned binary checkpoints: config, named parameters, optimizer, RNG.

Layout (little-endian): magic ``RSCK``, u32 format version, u64 length +
UTF-8 JSON metadata blob, then a named array table for parameters (with
trainable flags) followed by one for optimizer moments. A checkpoint holds
everything needed to resume training bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RSCK"
VERSION = 1

_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(RuntimeError):
    pass


def _write_array(f, name: str, arr: np.ndarray, flag: int) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<BBB", _DTYPE_CODES[arr.dtype], flag, arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(np.ascontiguousarray(arr).tobytes())


def _read_array(f) -> tuple[str, np.ndarray, int]:
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode("utf-8")
    code, flag, ndim = struct.unpack("<BBB", f.read(3))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    dtype = np.dtype(_DTYPES[code])
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    return name, arr, flag


def save_checkpoint(path, params: dict, config: dict, optimizer_state: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Write atomically (tmp file + rename). ``params`` maps name -> Parameter."""
    path = Path(path)
    meta = {
        "config": config,
        "rng_state": rng_state,
        "extra": extra or {},
        "optimizer": None,
    }
    moments: list[tuple[str, np.ndarray]] = []
    if optimizer_state is not None:
        meta["optimizer"] = {
            "step_count": optimizer_state["step_count"],
            "lr": optimizer_state["lr"],
            "betas": optimizer_state["betas"],
            "eps": optimizer_state["eps"],
        }
        for name, arr in optimizer_state["m"].items():
            moments.append((f"m.{name}", arr))
        for name, arr in optimizer_state["v"].items():
            moments.append((f"v.{name}", arr))

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta).encode("utf-8")
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            _write_array(f, name, p.data, 1 if p.trainable else 0)
        f.write(struct.pack("<I", len(moments)))
        for name, arr in moments:
            _write_array(f, name, arr, 0)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Returns {"config", "rng_state", "extra", "optimizer", "params", "trainable"}."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(blob_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", f.read(4))
        params: dict[str, np.ndarray] = {}
        trainable: dict[str, bool] = {}
        for _ in range(n_params):
            name, arr, flag = _read_array(f)
            params[name] = arr
            trainable[name] = bool(flag)
        (n_moments,) = struct.unpack("<I", f.read(4))
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for _ in range(n_moments):
            name, arr, _ = _read_array(f)
            if name.startswith("m."):
                m[name[2:]] = arr
            else:
                v[name[2:]] = arr
    optimizer = meta["optimizer"]
    if optimizer is not None:
        optimizer = dict(optimizer)
        optimizer["m"] = m
        optimizer["v"] = v
    return {
        "config": meta["config"],
        "rng_state": meta["rng_state"],
        "extra": meta["extra"],
        "optimizer": optimizer,
        "params": params,
        "trainable": trainable,
    }


def restore_params(model_params: dict, loaded: dict) -> None:
    """Copy loaded arrays and trainable flags into an existing parameter table."""
    missing = set(model_params) - set(loaded["params"])
    unexpected = set(loaded["params"]) - set(model_params)
    if missing or unexpected:
        raise CheckpointError(
            f"parameter table mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}"
        )
    for name, p in model_params.items():
        arr = loaded["params"][name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
        p.trainable = loaded["trainable"][name]
