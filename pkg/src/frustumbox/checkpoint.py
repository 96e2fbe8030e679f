"""Binary checkpoint container for model parameters and training state.

Layout (all integers little-endian):

    bytes 0..7    magic ``FBOXCKPT``
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 header length in bytes
    header        UTF-8 JSON: {"format_version", "config", "arrays", "extras"}
    payload       the arrays' float64 little-endian buffers, row-major,
                  concatenated in header order

``arrays`` is a list of {"name", "shape", "kind"} where kind is "param" for
model parameters and "extra" for optimizer or bookkeeping buffers. Loading
validates magic, version, and payload length; name/shape validation against
a model happens in the model loader.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FBOXCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointMismatch(CheckpointError):
    """Stored parameters do not match the model built from the stored config."""


@dataclass
class Checkpoint:
    config: dict
    params: dict
    extras: dict = field(default_factory=dict)
    extra_arrays: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def save_checkpoint(path, config, params, extras=None, extra_arrays=None):
    """Write a checkpoint; byte-identical for identical inputs."""
    extras = extras or {}
    extra_arrays = extra_arrays or {}
    entries = []
    buffers = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "kind": "param"})
        buffers.append(arr)
    for name in sorted(extra_arrays):
        arr = np.ascontiguousarray(extra_arrays[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "kind": "extra"})
        buffers.append(arr)
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "config": config,
            "arrays": entries,
            "extras": extras,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in buffers:
            fh.write(arr.astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    """Read a checkpoint back into a :class:`Checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC) + 4)
    header_start = len(MAGIC) + 12
    header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    offset = header_start + header_len
    params = {}
    extra_arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
        target = params if entry["kind"] == "param" else extra_arrays
        target[entry["name"]] = arr
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(
        config=header["config"],
        params=params,
        extras=header.get("extras", {}),
        extra_arrays=extra_arrays,
        format_version=version,
    )
