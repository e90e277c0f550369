"""Checkpoint file format.

Layout: magic "VNW1", little-endian u32 header length, UTF-8 JSON header
{architecture, tensor name/shape table, seed, epoch}, then the tensors as
little-endian float32 payloads in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import DataError
from .streams import NetParams, arch_from_json

_MAGIC = b"VNW1"


def save_checkpoint(net: NetParams, path, seed: int = 0, epoch: int = 0) -> None:
    names = sorted(net.params)
    header = {
        "arch": net.arch.to_json(),
        "tensors": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "seed": int(seed),
        "epoch": int(epoch),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(net.params[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[NetParams, dict]:
    """Returns (NetParams with fresh moment buffers, header dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a VNW1 checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4")
            if data.size != count:
                raise DataError(f"{path}: truncated tensor {entry['name']}")
            params[entry["name"]] = data.reshape(shape).copy()
    arch = arch_from_json(header["arch"])
    return NetParams(arch=arch, params=params), header
