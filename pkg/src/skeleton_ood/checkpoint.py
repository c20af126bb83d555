"""SKOD checkpoint files.

Layout (little endian)::

    b"SKOD"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 parameter count, then per parameter:
        u32 name_len  name (UTF-8)  u32 ndim  ndim * u32 dims  float64 values

The JSON header carries the architecture, the detector state and any extra
run metadata, so a checkpoint is self-contained for inference.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import Backbone
from .energy import DetectorState
from .errors import ConsistencyError, ParseError
from .fusion import FusionHead
from .graph import JointHierarchy, build_topology
from .model import ModelConfig, SkeletonOODModel

MAGIC = b"SKOD"
VERSION = 1


@dataclass
class Checkpoint:
    model: SkeletonOODModel
    detector: DetectorState | None = None
    extra: dict = field(default_factory=dict)


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dumps(ckpt: Checkpoint) -> bytes:
    header = {
        "architecture": ckpt.model.config.to_dict(),
        "detector": None if ckpt.detector is None else ckpt.detector.to_dict(),
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(head)), head]
    params = ckpt.model.params
    parts.append(_u32(len(params)))
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        value = tensor.value
        parts += [_u32(len(raw)), raw, _u32(value.ndim)]
        parts += [_u32(d) for d in value.shape]
        parts.append(value.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        have = len(self.buf) - self.pos
        if have < n:
            raise ParseError(f"truncated {what}: missing {n - have} bytes")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("not a SKOD checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
        config = ModelConfig.from_dict(header["architecture"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed checkpoint header: {exc}") from None
    arrays = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        ndim = r.u32("rank")
        shape = tuple(r.u32("dimension") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * count, f"values of {name}"), "<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise ParseError(f"{len(buf) - r.pos} unexpected bytes after parameters")

    model = SkeletonOODModel.init(config, np.random.default_rng(0))
    expected = model.params
    if set(expected) != set(arrays):
        raise ConsistencyError(f"parameter names do not match architecture: {sorted(set(expected) ^ set(arrays))}")
    for name, tensor in expected.items():
        if tensor.value.shape != arrays[name].shape:
            raise ConsistencyError(f"{name}: shape {arrays[name].shape} != {tensor.value.shape}")
    backbone = Backbone(build_topology(JointHierarchy(config.hierarchy)), config.backbone,
                        {k: nx.parameter(arrays[k]) for k in model.backbone.params})
    head = FusionHead(config.head, {k: nx.parameter(arrays[k]) for k in model.head.params})
    detector = None if header.get("detector") is None else DetectorState.from_dict(header["detector"])
    return Checkpoint(SkeletonOODModel(config, backbone, head), detector, header.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    return loads(buf)
