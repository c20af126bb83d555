"""The full network: backbone, activation shaping + fusion head, classifier."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .backbone import Backbone, BackboneConfig
from .errors import ShapeError
from .fusion import FusionHead, HeadConfig
from .graph import GraphTopology, JointHierarchy, build_topology
from .numerics import Tensor

# Classifier-side presets; "desk" is the small default used for synthetic data.
PRESETS = {
    "desk": {"mlp_hidden": 128, "fused_dim": 64},
    "ntu": {"mlp_hidden": 400, "fused_dim": 256},
    "kinetics": {"mlp_hidden": 576, "fused_dim": 256},
}


@dataclass(frozen=True)
class ModelConfig:
    hierarchy: tuple
    backbone: BackboneConfig
    head: HeadConfig

    def to_dict(self) -> dict:
        return {
            "hierarchy": list(self.hierarchy),
            "backbone": self.backbone.to_dict(),
            "head": asdict(self.head),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = d["backbone"]
        return cls(
            tuple(d["hierarchy"]),
            BackboneConfig(b["in_channels"], tuple(b["channels"]), tuple(b["strides"]), b["temporal_kernel"]),
            HeadConfig(**d["head"]),
        )


@dataclass
class ModelOutput:
    features: Tensor
    fused: Tensor
    logits: Tensor


class SkeletonOODModel:
    def __init__(self, config: ModelConfig, backbone: Backbone, head: FusionHead):
        self.config = config
        self.backbone = backbone
        self.head = head

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "SkeletonOODModel":
        topology = build_topology(JointHierarchy(config.hierarchy))
        backbone = Backbone.init(topology, config.backbone, rng)
        head = FusionHead.init(config.head, rng)
        return cls(config, backbone, head)

    @property
    def topology(self) -> GraphTopology:
        return self.backbone.topology

    @property
    def num_seen(self) -> int:
        return self.config.head.num_classes

    @property
    def params(self) -> dict:
        return {**self.backbone.params, **self.head.params}

    def forward(self, x, training: bool = False, rng=None, react_clip: float | None = None) -> ModelOutput:
        features = self.backbone.forward(x)
        fused = self.head.fuse_rows(features)
        if react_clip is not None:
            fused = Tensor(np.minimum(fused.value, react_clip))
        logits = self.head.classify_rows(fused, training, rng)
        return ModelOutput(features, fused, logits)

    def predict(self, data: np.ndarray, batch_size: int = 128, react_clip: float | None = None):
        """Evaluation-mode logits and penultimate activations for an (N, C, T, V, M) array."""
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 5:
            raise ShapeError(f"expected (N, C, T, V, M) data, got {data.shape}")
        logits, fused = [], []
        for start in range(0, len(data), batch_size):
            out = self.forward(data[start : start + batch_size], react_clip=react_clip)
            logits.append(out.logits.value)
            fused.append(out.fused.value)
        if not logits:
            width = self.config.head.num_outputs
            return np.zeros((0, width)), np.zeros((0, self.config.head.classifier_in))
        return np.concatenate(logits), np.concatenate(fused)
