"""Self-describing binary checkpoints.

Layout (all integers little-endian uint32)::

    b"AMCNN1"
    meta_len, meta_json[meta_len]          variant, branch specs, seed, flags
    n_tensors
    repeated: name_len, name, rank, extents[rank], float64 LE data
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .autodiff import Parameter
from .errors import CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError
from .model import BranchSpec, ModelParams, model_shapes

MAGIC = b"AMCNN1"
_U32 = struct.Struct("<I")


def save_checkpoint(params: ModelParams, path) -> None:
    meta = json.dumps(params.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, _U32.pack(len(meta)), meta, _U32.pack(len(params.params))]
    for name, p in params.params.items():
        raw = name.encode("utf-8")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(p.data.ndim)]
        chunks += [_U32.pack(n) for n in p.data.shape]
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def read_checkpoint(path):
    """Return ``(metadata, {name: array})`` without building a model."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    magic = raw[:len(MAGIC)]
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    r.pos = len(MAGIC)
    meta_raw = r.take(r.u32("metadata length"), "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata block ({exc})") from None
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise CheckpointShapeError(f"{path}: implausible rank {rank} for {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        data = r.take(8 * n, f"data of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after last tensor")
    return meta, tensors


def load_checkpoint(path) -> ModelParams:
    meta, tensors = read_checkpoint(path)
    try:
        specs = [BranchSpec.from_dict(d) for d in meta["specs"]]
        variant = meta["variant"]
        expected = model_shapes(variant, specs, meta.get("attention_kernel", 1), meta.get("in_channels", 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent metadata ({exc})") from None
    params = {}
    for name, shape in expected:
        if name not in tensors:
            raise CheckpointShapeError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
        params[name] = Parameter.from_array(name, tensors[name])
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise CheckpointShapeError(f"{path}: unexpected tensors {extra}")
    return ModelParams(
        variant,
        specs,
        params,
        seed=meta.get("seed", 0),
        rescale=meta.get("rescale", True),
        attention_kernel=meta.get("attention_kernel", 1),
        in_channels=meta.get("in_channels", 1),
    )


def load_branch_weights(model: ModelParams, source, labels=None) -> list:
    """Copy ``branch.<label>.*`` tensors from another model or a checkpoint path into ``model``.

    Returns the copied names.  Shapes must agree.
    """
    src = load_checkpoint(source) if isinstance(source, (str, os.PathLike)) else source
    labels = model.branches if labels is None else labels
    copied = []
    for label in labels:
        prefix = f"branch.{label}."
        names = [n for n in model.names() if n.startswith(prefix)]
        for name in names:
            if name not in src:
                raise CheckpointShapeError(f"source has no tensor {name}")
            if src[name].shape != model[name].shape:
                raise CheckpointShapeError(f"{name}: source shape {src[name].shape} vs model {model[name].shape}")
            model[name].tensor.data[...] = src[name].data
            copied.append(name)
    return copied
