"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DDGCN-CKPT"                       magic
    u32 version
    u32 n, n bytes                      UTF-8 JSON document (config, epoch, ...)
    u32 record count
    per record:
        u32 n, n bytes                  UTF-8 name
        u32 rank, rank x u64 extents
        prod(extents) x f64             row-major values
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigError, DimensionError, ParseError

MAGIC = b"DDGCN-CKPT"
VERSION = 1


def encode(document: dict, records: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    doc = json.dumps(document, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(doc)) + doc
    out += struct.pack("<I", len(records))
    for name, value in records.items():
        arr = np.asarray(
            value.detach().cpu().numpy() if torch.is_tensor(value) else value, dtype="<f8"
        )
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def decode(data: bytes):
    """Inverse of :func:`encode`: ``(version, document, {name: ndarray})``."""
    if not data.startswith(MAGIC):
        raise ParseError("not a checkpoint: bad magic string")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    document = json.loads(take(n).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        records[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if pos != len(data):
        raise ParseError("trailing bytes after last checkpoint record")
    return version, document, records


def topology_to_dict(topo):
    return {
        "n_joints": topo.n_joints,
        "bones": [list(b) for b in topo.bones],
        "groupings": [[list(p) for p in g] for g in topo.groupings],
        "name": topo.name,
    }


def topology_from_dict(d):
    from .graph import SkeletonTopology

    return SkeletonTopology(d["n_joints"], tuple(map(tuple, d["bones"])),
                            tuple(tuple(map(tuple, g)) for g in d["groupings"]), d["name"])


def save_checkpoint(path, model, optimizer=None, epoch=0, train_cfg=None, extra=None):
    """Write ``model`` (parameters and buffers) and optional Adam state to ``path``."""
    document = {
        "model": model.cfg.to_dict(),
        "topology": topology_to_dict(model.topology),
        "train": None if train_cfg is None else train_cfg.to_dict(),
        "epoch": epoch,
        "optimizer_step": None if optimizer is None else optimizer.step_count,
    }
    if extra:
        document.update(extra)
    records = {name: t for name, t in model.state_dict().items()}
    if optimizer is not None:
        for name, t in optimizer.m.items():
            records[f"optimizer.m.{name}"] = t
        for name, t in optimizer.v.items():
            records[f"optimizer.v.{name}"] = t
    Path(path).write_bytes(encode(document, records))


def load_checkpoint(path):
    """Rebuild the model (and Adam state if stored) from ``path``.

    Returns ``(model, optimizer_or_None, document)``.
    """
    from .model import DDGCN, ModelConfig
    from .training import Adam, TrainConfig

    _, document, records = decode(Path(path).read_bytes())
    cfg = ModelConfig.from_dict(document["model"])
    model = DDGCN(cfg, topology_from_dict(document["topology"]))
    state = model.state_dict()
    missing = [k for k in state if k not in records]
    if missing:
        raise ConfigError(f"checkpoint lacks entries: {missing[:5]}")
    new_state = {}
    for name, ref in state.items():
        arr = records[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(new_state)
    optimizer = None
    if document.get("optimizer_step") is not None:
        train_cfg = TrainConfig.from_dict(document["train"]) if document.get("train") else TrainConfig()
        optimizer = Adam.from_config(train_cfg)
        optimizer.step_count = document["optimizer_step"]
        for key, arr in records.items():
            if key.startswith("optimizer.m."):
                optimizer.m[key[len("optimizer.m."):]] = torch.from_numpy(arr)
            elif key.startswith("optimizer.v."):
                optimizer.v[key[len("optimizer.v."):]] = torch.from_numpy(arr)
    return model, optimizer, document
