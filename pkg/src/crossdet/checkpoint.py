"""Binary checkpoint format.

Layout (little-endian): magic b"CDMM", u32 version, u64 step, u32 record
count, then per tensor a length-prefixed name, u32 rank, u32 dims, and
float64 payload; finally the JSON-serialized config and RNG state, each
u32-length-prefixed.
"""

import json
import struct

import numpy as np

MAGIC = b"CDMM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, step, config_dict, rng_state):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, step))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        for blob in (config_dict, rng_state):
            payload = json.dumps(blob).encode("utf-8")
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, step = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
        blobs = []
        for _ in range(2):
            (blob_len,) = struct.unpack("<I", f.read(4))
            blobs.append(json.loads(f.read(blob_len).decode("utf-8")))
    return tensors, step, blobs[0], blobs[1]
