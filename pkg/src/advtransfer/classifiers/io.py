"""Versioned binary model container.

Layout (all little-endian)::

    magic      8 bytes  b"ADVTMDL\\0"
    version    u16
    kind       u8       1=linear 2=mlp 3=forest
    reserved   u8
    classes    u32
    features   u32
    train_seed u64
    -- dense --
    layers     u32, then (fan_out u32, fan_in u32) per layer,
               then per layer: weights f64[fan_out*fan_in], bias f64[fan_out]
    -- forest --
    trees      u32, then per tree: nodes u32, feature i32[k], threshold f64[k],
               left i32[k], right i32[k], value i32[k]
"""
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .forest import RandomForest, Tree
from .network import DenseNetwork

MAGIC = b"ADVTMDL\x00"
VERSION = 1
KIND_TAGS = {"linear": 1, "mlp": 2, "forest": 3}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
_HEADER = struct.Struct("<8sHBBIIQ")


def model_to_bytes(model):
    parts = [
        _HEADER.pack(MAGIC, VERSION, KIND_TAGS[model.kind], 0,
                     model.class_count, model.feature_dim, model.train_seed)
    ]
    if model.kind == "forest":
        parts.append(struct.pack("<I", len(model.trees)))
        for t in model.trees:
            parts.append(struct.pack("<I", t.node_count))
            parts.append(t.feature.astype("<i4").tobytes())
            parts.append(t.threshold.astype("<f8").tobytes())
            parts.append(t.left.astype("<i4").tobytes())
            parts.append(t.right.astype("<i4").tobytes())
            parts.append(t.value.astype("<i4").tobytes())
    else:
        parts.append(struct.pack("<I", len(model.weights)))
        for w in model.weights:
            parts.append(struct.pack("<II", *w.shape))
        for w, b in zip(model.weights, model.biases):
            parts.append(w.astype("<f8").tobytes())
            parts.append(b.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated model file at offset {self.pos} (need {n} more bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def model_from_bytes(data):
    r = _Reader(data)
    magic, version, tag, _, classes, features, seed = r.unpack(_HEADER.format)
    if magic != MAGIC:
        raise FormatError("not a model file (bad magic)")
    if version != VERSION:
        raise FormatError(f"model format version {version} unsupported (expected {VERSION})")
    if tag not in TAG_KINDS:
        raise FormatError(f"unknown model kind tag {tag}")
    kind = TAG_KINDS[tag]
    if kind == "forest":
        (n_trees,) = r.unpack("<I")
        trees = []
        for _ in range(n_trees):
            (k,) = r.unpack("<I")
            trees.append(Tree(r.array("<i4", k), r.array("<f8", k), r.array("<i4", k),
                              r.array("<i4", k), r.array("<i4", k)))
        model = RandomForest(trees, classes, features, seed)
    else:
        (n_layers,) = r.unpack("<I")
        shapes = [r.unpack("<II") for _ in range(n_layers)]
        weights, biases = [], []
        for out, inp in shapes:
            weights.append(r.array("<f8", out * inp).reshape(out, inp))
            biases.append(r.array("<f8", out))
        model = DenseNetwork(weights, biases, seed, kind=kind)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after model payload")
    if model.class_count != classes or model.feature_dim != features:
        raise FormatError("header dimensions disagree with payload")
    return model


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
