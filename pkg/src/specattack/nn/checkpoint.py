"""RNM1 checkpoint format.

Layout: ``RNM1`` magic, u32 little-endian header length, UTF-8 JSON header
(architecture config, seed, class names, tensor names and shapes), then raw
float32 little-endian blobs in declaration order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ResNetMini, ResNetMiniConfig

MAGIC = b"RNM1"


def checkpoint_bytes(model: ResNetMini, class_names=()) -> bytes:
    tensors = model.named_tensors()
    header = {
        "architecture": model.config.to_dict(),
        "seed": model.config.seed,
        "class_names": list(class_names),
        "tensors": [[name, list(a.shape)] for name, a in tensors],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    return MAGIC + struct.pack("<I", len(hb)) + hb + blobs


def load_checkpoint_bytes(data: bytes):
    """Returns (model, class_names)."""
    if data[:4] != MAGIC:
        raise ValueError("not an RNM1 checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    model = ResNetMini(ResNetMiniConfig.from_dict(header["architecture"]))
    pos = 8 + hlen
    targets = model.named_tensors()
    if [n for n, _ in targets] != [n for n, _ in header["tensors"]]:
        raise ValueError("checkpoint tensor list does not match the architecture")
    for (_, arr), (_, shape) in zip(targets, header["tensors"]):
        n = int(np.prod(shape)) if shape else 1
        arr[...] = np.frombuffer(data[pos:pos + 4 * n], dtype="<f4").reshape(shape)
        pos += 4 * n
    if pos != len(data):
        raise ValueError("trailing bytes after checkpoint payload")
    model.training = False
    return model, header["class_names"]


def save_checkpoint(path, model, class_names=()) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    data = checkpoint_bytes(model, class_names)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    return load_checkpoint_bytes(Path(path).read_bytes())


def model_hash(model, class_names=()) -> str:
    return hashlib.sha256(checkpoint_bytes(model, class_names)).hexdigest()
