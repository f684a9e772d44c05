"""Binary checkpoint framing shared by classifier and modulator files.

Layout (little-endian): 4-byte magic, u32 version, u32 header length,
UTF-8 JSON header, u32 parameter count, then for each parameter in sorted
name order: u32 name length, name, u32 ndim, u32 dims, float32 payload.
"""
import json
import struct

import numpy as np

from .gradcore import ParamSet, Tensor

VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, magic, header, params):
    with open(path, "wb") as f:
        f.write(magic)
        text = json.dumps(header, sort_keys=True).encode()
        f.write(struct.pack("<II", VERSION, len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            enc = name.encode()
            f.write(struct.pack("<I", len(enc)) + enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack("<" + "I" * arr.ndim, *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path, magic, dtype=np.float64):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    try:
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        header = json.loads(raw[off:off + hlen].decode())
        off += hlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params = ParamSet()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from("<" + "I" * ndim, raw, off)
            off += 4 * ndim
            n = int(np.prod(shape))
            if off + 4 * n > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            params[name] = Tensor(arr.astype(dtype))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return header, params
