"""Flat binary checkpoints for one model.

Layout (all integers little-endian)::

    8 bytes   magic b"DUETCKPT"
    u32       format version (currently 1)
    u32       header length H in bytes
    H bytes   UTF-8 JSON: {"config": ModelConfig dict,
                           "arrays": [[name, dtype, shape], ...]}
    ...       raw array bytes, concatenated in the order listed in the
              header (the canonical parameter order), little-endian IEEE
              floats, C order

Any reader that can parse JSON and reinterpret bytes as float32/float64
can restore the arrays without this package.
"""
import json
import struct

import numpy as np

from . import model as M

MAGIC = b"DUETCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, params):
    arrays = []
    for name, arr in params.items():
        arrays.append([name, np.dtype(arr.dtype).newbyteorder("<").str, list(arr.shape)])
    header = json.dumps({"config": params.config.to_dict(), "arrays": arrays},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for name, arr in params.items():
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 16 + hlen
    header = json.loads(blob[16:start].decode("utf-8"))
    config = M.ModelConfig.from_dict(header["config"])
    arrays, offset = {}, start
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) * dt.itemsize
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)), offset=offset) \
            .reshape(shape).astype(dt.newbyteorder("="))
        offset += n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return M.Parameters(config, arrays)
