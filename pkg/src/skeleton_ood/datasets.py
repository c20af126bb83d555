"""Skeleton sequence containers, the SKDS file format, synthetic data, splits and masking.

SKDS layout (little endian)::

    b"SKDS"  u32 version  u32 N  u32 C  u32 T  u32 V  u32 M
    N*C*T*V*M float64 coordinates
    N u32 labels
    u32 length + UTF-8 JSON trailer
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, ContractError, ParseError
from .graph import JointHierarchy

MAGIC = b"SKDS"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass
class SkeletonSequence:
    data: np.ndarray  # (C, T, V, M)
    label: int
    source_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ContractError(f"sequence must be (C, T, V, M), got {self.data.shape}")


@dataclass
class SkeletonDataset:
    data: np.ndarray  # (N, C, T, V, M)
    labels: np.ndarray
    ids: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 5:
            raise ContractError(f"dataset array must be (N, C, T, V, M), got {self.data.shape}")
        if self.labels.shape != (len(self.data),):
            raise ConsistencyError(f"{len(self.labels)} labels for {len(self.data)} samples")
        if not self.ids:
            self.ids = [f"s{i:06d}" for i in range(len(self.data))]
        if len(self.ids) != len(self.data):
            raise ConsistencyError(f"{len(self.ids)} ids for {len(self.data)} samples")

    def __len__(self):
        return len(self.data)

    def __getitem__(self, i) -> SkeletonSequence:
        return SkeletonSequence(self.data[i], int(self.labels[i]), self.ids[i])

    @property
    def num_joints(self) -> int:
        return self.data.shape[3]

    def subset(self, indices, meta=None) -> "SkeletonDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return SkeletonDataset(
            self.data[indices], self.labels[indices], [self.ids[i] for i in indices],
            dict(self.meta if meta is None else meta),
        )

    @classmethod
    def from_sequences(cls, seqs, meta=None) -> "SkeletonDataset":
        seqs = list(seqs)
        return cls(np.stack([s.data for s in seqs]), [s.label for s in seqs],
                   [s.source_id for s in seqs], dict(meta or {}))

    def hierarchy(self) -> JointHierarchy | None:
        parents = self.meta.get("hierarchy")
        return None if parents is None else JointHierarchy(tuple(parents), tuple(self.meta.get("joint_names", ())))


# serialization ---------------------------------------------------------------

def _trailer(ds: SkeletonDataset) -> bytes:
    body = dict(ds.meta, ids=list(ds.ids), n_samples=len(ds))
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(ds: SkeletonDataset) -> bytes:
    if len(ds) and (ds.labels.min() < 0 or ds.labels.max() > 0xFFFFFFFF):
        raise ContractError("labels must fit in u32")
    n, c, t, v, m = ds.data.shape
    trailer = _trailer(ds)
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, n, c, t, v, m),
        ds.data.astype("<f8").tobytes(),
        ds.labels.astype("<u4").tobytes(),
        struct.pack("<I", len(trailer)),
        trailer,
    ])


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        have = len(self.buf) - self.pos
        if have < n:
            raise ParseError(f"truncated {what}: missing {n - have} bytes (need {n}, have {have})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk


def loads(buf: bytes) -> SkeletonDataset:
    r = _Reader(buf)
    magic, version, n, c, t, v, m = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ParseError(f"unsupported SKDS version {version}")
    count = n * c * t * v * m
    data = np.frombuffer(r.take(8 * count, "coordinate payload"), dtype="<f8").astype(np.float64)
    labels = np.frombuffer(r.take(4 * n, "label block"), dtype="<u4").astype(np.int64)
    (length,) = struct.unpack("<I", r.take(4, "trailer length"))
    try:
        meta = json.loads(r.take(length, "trailer").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed trailer: {exc}") from None
    if r.pos != len(buf):
        raise ParseError(f"{len(buf) - r.pos} unexpected bytes after trailer")
    declared = meta.pop("n_samples", n)
    if declared != n:
        raise ConsistencyError(f"trailer declares {declared} samples but header has N={n}")
    ids = meta.pop("ids", [])
    if ids and len(ids) != n:
        raise ConsistencyError(f"trailer lists {len(ids)} sample ids but header has N={n}")
    return SkeletonDataset(data.reshape(n, c, t, v, m), labels, ids, meta)


def save_dataset(ds: SkeletonDataset, path) -> None:
    Path(path).write_bytes(dumps(ds))


def load_dataset(path) -> SkeletonDataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    return loads(buf)


# synthetic data --------------------------------------------------------------

def _rest_pose(h: JointHierarchy, rng: np.random.Generator, channels: int) -> np.ndarray:
    pose = np.zeros((h.num_joints, channels))
    order = sorted(range(h.num_joints), key=lambda j: h.level[j])
    for j in order:
        p = h.parent[j]
        if p >= 0:
            bone = rng.normal(size=channels)
            pose[j] = pose[p] + 0.3 * bone / np.linalg.norm(bone)
    return pose


def _archetype(h: JointHierarchy, rng: np.random.Generator, channels: int) -> dict:
    v = h.num_joints
    direction = rng.normal(size=(v, channels))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return {
        "frequency": rng.uniform(0.5, 3.0),
        "phase": rng.uniform(0.0, 2 * np.pi, size=v),
        "amplitude": rng.uniform(0.05, 0.35, size=v),
        "direction": direction,
        "envelope": rng.uniform(-0.8, 0.8, size=2),
    }


def _render(h: JointHierarchy, rest: np.ndarray, arch: dict, frames: int) -> np.ndarray:
    """Return (C, T, V) joint positions of one archetype."""
    t = np.arange(frames) / frames
    env = 1.0 + arch["envelope"][0] * np.sin(np.pi * t) + arch["envelope"][1] * (t - 0.5)
    wave = np.sin(2 * np.pi * arch["frequency"] * t[:, None] + arch["phase"][None, :])  # (T, V)
    local = (env[:, None] * arch["amplitude"][None, :] * wave)[:, :, None] * arch["direction"][None]
    pos = np.broadcast_to(rest, local.shape).copy()
    order = sorted(range(h.num_joints), key=lambda j: h.level[j])
    offset = np.zeros_like(local)
    for j in order:
        p = h.parent[j]
        offset[:, j] = local[:, j] + (offset[:, p] if p >= 0 else 0.0)
    pos += offset
    return pos.transpose(2, 0, 1)


def generate_synthetic(
    classes: int,
    per_class: int,
    hierarchy: JointHierarchy,
    frames: int = 16,
    seed: int = 0,
    sigma: float = 0.05,
    channels: int = 3,
    subjects: int = 1,
) -> SkeletonDataset:
    """Sinusoidal motion archetypes over the hierarchy, one per class, plus Gaussian jitter.

    Every joint oscillates along a class-specific direction with class-specific
    frequency, per-joint phase and amplitude, under a slow amplitude envelope;
    children inherit their parent's displacement.  Extra subjects replay the
    same motion from a shifted rest position.
    """
    if classes < 2:
        raise ConfigError("at least two classes are required")
    if per_class < 1 or frames < 1 or subjects < 1:
        raise ConfigError("per_class, frames and subjects must be positive")
    if channels not in (2, 3):
        raise ConfigError("channels must be 2 or 3")
    if sigma < 0:
        raise ConfigError("jitter sigma must be nonnegative")
    root = np.random.SeedSequence(seed)
    arch_seq, noise_seq = root.spawn(2)
    arch_rng = np.random.default_rng(arch_seq)
    rest = _rest_pose(hierarchy, arch_rng, channels)
    templates = []
    for _ in range(classes):
        base = _render(hierarchy, rest, _archetype(hierarchy, arch_rng, channels), frames)
        per_subject = [base + 0.5 * s for s in range(subjects)]
        templates.append(np.stack(per_subject, axis=-1))  # (C, T, V, M)
    noise_rng = np.random.default_rng(noise_seq)
    shape = (classes, per_class) + templates[0].shape
    jitter = noise_rng.normal(0.0, 1.0, size=shape) * sigma if sigma > 0 else np.zeros(shape)
    data = np.stack(templates)[:, None] + jitter
    labels = np.repeat(np.arange(classes), per_class)
    ids = [f"c{c:03d}_{i:05d}" for c in range(classes) for i in range(per_class)]
    meta = {
        "class_names": [f"action_{c:03d}" for c in range(classes)],
        "generator": {
            "classes": classes, "per_class": per_class, "frames": frames, "seed": seed,
            "sigma": sigma, "channels": channels, "subjects": subjects,
        },
        "hierarchy": list(hierarchy.parent),
        "joint_names": list(hierarchy.names),
    }
    return SkeletonDataset(data.reshape((-1,) + templates[0].shape), labels, ids, meta)


# splits ----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    seen: tuple
    unseen: tuple = ()
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seen", tuple(int(c) for c in self.seen))
        object.__setattr__(self, "unseen", tuple(int(c) for c in self.unseen))
        if not self.seen:
            raise ConfigError("at least one seen class is required")
        if set(self.seen) & set(self.unseen):
            raise ConfigError("seen and unseen classes overlap")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train fraction must lie in (0, 1)")


def choose_unseen(num_classes: int, num_unseen: int, seed: int) -> SplitSpec:
    if not 0 <= num_unseen < num_classes:
        raise ConfigError(f"cannot hold out {num_unseen} of {num_classes} classes and keep a seen class")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5eed]))
    unseen = sorted(int(c) for c in rng.choice(num_classes, size=num_unseen, replace=False))
    seen = [c for c in range(num_classes) if c not in unseen]
    return SplitSpec(tuple(seen), tuple(unseen), seed=seed)


SPLIT_NAMES = ("train", "val", "test_seen", "test_mix")


def split(ds: SkeletonDataset, spec: SplitSpec) -> dict:
    """Stratified 9:1 split of the seen classes; unseen classes only reach ``test_mix``.

    Labels are remapped: seen classes become 0..K-1 in ``spec.seen`` order and
    every unseen sample gets label K.  ``val`` and ``test_seen`` hold the same
    samples.
    """
    present = set(np.unique(ds.labels).tolist())
    missing = [c for c in spec.seen + spec.unseen if c not in present]
    if missing:
        raise ConfigError(f"classes {missing} do not occur in the dataset")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x591]))
    k = len(spec.seen)
    train_idx, test_idx = [], []
    for c in spec.seen:
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(spec.train_fraction * idx.size))
        if n_train == 0 or n_train == idx.size:
            raise ConfigError(f"class {c} with {idx.size} samples leaves an empty side after splitting")
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    unseen_idx = [i for i in range(len(ds)) if int(ds.labels[i]) in spec.unseen]
    remap = {c: i for i, c in enumerate(spec.seen)}
    remap.update({c: k for c in spec.unseen})
    names = ds.meta.get("class_names", [])
    meta = dict(ds.meta)
    meta.update({
        "num_seen": k,
        "seen_classes": list(spec.seen),
        "unseen_classes": list(spec.unseen),
        "class_names": [names[c] if c < len(names) else str(c) for c in spec.seen],
        "split_seed": spec.seed,
    })

    def build(indices, name):
        indices = sorted(indices)
        sub = ds.subset(indices, dict(meta, split=name))
        sub.labels = np.array([remap[int(ds.labels[i])] for i in indices], dtype=np.int64)
        return sub

    return {
        "train": build(train_idx, "train"),
        "val": build(test_idx, "val"),
        "test_seen": build(test_idx, "test_seen"),
        "test_mix": build(test_idx + unseen_idx, "test_mix"),
    }


# masking ---------------------------------------------------------------------

def _masked_count(p: float, v: int) -> int:
    if not 0 <= p < 100:
        raise ConfigError(f"mask percentage must lie in [0, 100), got {p}")
    return int(math.floor(p * v / 100.0))


def mask_joints(seq: SkeletonSequence, p: float, seed: int) -> SkeletonSequence:
    """Zero ``floor(p% * V)`` randomly chosen joints across all frames and subjects."""
    v = seq.data.shape[2]
    n = _masked_count(p, v)
    rng = np.random.default_rng(seed)
    data = seq.data.copy()
    if n:
        data[:, :, rng.choice(v, size=n, replace=False), :] = 0.0
    return SkeletonSequence(data, seq.label, seq.source_id)


def mask_dataset(ds: SkeletonDataset, p: float, seed: int) -> SkeletonDataset:
    """Mask every sample independently; sample ``i`` uses a stream derived from ``(seed, i)``."""
    n = _masked_count(p, ds.num_joints)
    if n == 0:
        return ds
    data = ds.data.copy()
    for i in range(len(ds)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        data[i][:, :, rng.choice(ds.num_joints, size=n, replace=False), :] = 0.0
    return SkeletonDataset(data, ds.labels.copy(), list(ds.ids), dict(ds.meta))
