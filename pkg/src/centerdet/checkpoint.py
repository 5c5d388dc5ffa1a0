"""Binary checkpoint format with a bit-exact save/load round trip.

Layout: 8-byte magic, little-endian uint32 version, little-endian uint64
manifest length, UTF-8 JSON manifest, then raw little-endian IEEE-754
tensor blobs in manifest order.  The manifest records the run configuration,
the epoch counter, the RNG state, and every tensor's name/shape/dtype/offset
(offsets are relative to the start of the blob section).  Files are written
atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, run_config_from_dict, run_config_to_dict

MAGIC = b"CDETCKPT"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or incompatible."""


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    epoch: int
    rng_state: dict


def _tensor_entries(tensors: dict[str, np.ndarray], prefix: str, offset: int
                    ) -> tuple[list[dict], int]:
    entries = []
    for name, arr in tensors.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {dtype}")
        nbytes = arr.size * arr.itemsize
        entries.append({"name": prefix + name, "shape": list(arr.shape),
                        "dtype": dtype, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return entries, offset


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    p_entries, offset = _tensor_entries(ckpt.params, "", 0)
    v_entries, _ = _tensor_entries(ckpt.velocity, "velocity/", offset)
    manifest = {
        "configs": run_config_to_dict(ckpt.config),
        "epoch": int(ckpt.epoch),
        "rng": ckpt.rng_state,
        "tensors": p_entries + v_entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for entry, arr in zip(p_entries + v_entries,
                                  list(ckpt.params.values())
                                  + list(ckpt.velocity.values())):
                fh.write(np.ascontiguousarray(arr).astype(
                    _DTYPES[entry["dtype"]], copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    header = struct.calcsize("<8sIQ")
    if len(data) < header:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, man_len = struct.unpack_from("<8sIQ", data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(data) < header + man_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[header:header + man_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})")
    blob_start = header + man_len

    params: dict[str, np.ndarray] = {}
    velocity: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        start = blob_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(data[start:end], dtype=_DTYPES[entry["dtype"]])
        arr = arr.reshape(entry["shape"]).astype(entry["dtype"], copy=True)
        name = entry["name"]
        if name.startswith("velocity/"):
            velocity[name[len("velocity/"):]] = arr
        else:
            params[name] = arr
    return Checkpoint(config=run_config_from_dict(manifest["configs"]),
                      params=params, velocity=velocity,
                      epoch=int(manifest["epoch"]), rng_state=manifest["rng"])
