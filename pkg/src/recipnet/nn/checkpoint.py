"""RPNN checkpoint files, little-endian.

    b"RPNN" | u16 version | u32 n | n bytes JSON {"config": ..., "init": ...}
    | u32 count | count x (u16 len, name utf-8, u8 ndim, u32 dims..., f32 data)
"""
import json
import struct

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"RPNN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def params_to_bytes(params: ModelParams) -> bytes:
    meta = json.dumps({"config": params.config.to_dict(), "init": params.init},
                      sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta,
             struct.pack("<I", len(params.tensors))]
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def params_from_bytes(data: bytes) -> ModelParams:
    if data[:4] != MAGIC:
        raise CheckpointError("not an RPNN checkpoint")
    version, mlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(data[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + nlen].decode("utf-8")
        off += 2 + nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
        off += 1 + 4 * ndim
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, "<f4", size, off).astype(np.float32).reshape(shape)
        off += 4 * size
    config = ModelConfig.from_dict(meta["config"])
    expected = config.param_shapes()
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise CheckpointError("tensor shapes do not match the stored model config")
    return ModelParams(config, tensors, meta.get("init", {}))


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
