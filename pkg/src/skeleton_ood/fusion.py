"""Activation shaping, SE-gated feature fusion, and the classifier head.

The shaping threshold of a length-D vector is its nearest-rank percentile:
the element at ascending-sort index ``floor(p * D / 100)``.  Entries strictly
below it are pruned.  Inside the training graph the pruning mask is a
constant of each forward pass.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import glorot, he_uniform
from .errors import ConfigError, ContractError, ShapeError
from .numerics import Tensor

STRATEGIES = ("p", "b", "s")


class DegeneratePruneWarning(UserWarning):
    """Every surviving activation was zero; the shaped vector is all zeros."""


@dataclass(frozen=True)
class AshConfig:
    strategy: str = "p"
    pruning_percentage: float = 75.0

    def __post_init__(self):
        object.__setattr__(self, "strategy", self.strategy.lower())
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown ASH strategy {self.strategy!r}")
        _check_pct(self.pruning_percentage)


def _check_pct(p):
    if not 0 < p < 100:
        raise ConfigError(f"pruning percentage must lie in (0, 100), got {p}")


def threshold_index(p: float, d: int) -> int:
    return min(int(math.floor(p * d / 100.0)), d - 1)


def _shape_rows(x: np.ndarray, strategy: str, p: float):
    """Shape each row of a 2-D array; returns (output, mask, scale, degenerate_rows)."""
    _check_pct(p)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ContractError(f"expected non-empty (batch, D) activations, got {x.shape}")
    t = np.sort(x, axis=1)[:, threshold_index(p, x.shape[1])]
    keep = x >= t[:, None]
    pruned = np.where(keep, x, 0.0)
    if strategy == "p":
        return pruned, keep.astype(np.float64), None, np.zeros(len(x), bool)
    s1 = np.array([math.fsum(row) for row in x])
    if strategy == "b":
        nz = keep & (x != 0)
        n = nz.sum(axis=1)
        degenerate = n == 0
        value = np.divide(s1, n, out=np.zeros_like(s1), where=~degenerate)
        return np.where(nz, value[:, None], 0.0), nz.astype(np.float64), n, degenerate
    s2 = np.array([math.fsum(row) for row in pruned])
    degenerate = s2 == 0
    ratio = np.divide(s1, s2, out=np.zeros_like(s1), where=~degenerate)
    scale = np.where(degenerate, 0.0, np.exp(ratio))
    return pruned * scale[:, None], keep.astype(np.float64), (s1, s2, scale), degenerate


def _shape_vector(f, p, strategy):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ContractError("activation shaping needs a non-empty vector")
    if np.any(f < 0):
        raise ContractError("activation shaping expects rectified (nonnegative) input")
    out, _, _, degenerate = _shape_rows(f[None], strategy, p)
    if degenerate[0]:
        warnings.warn(DegeneratePruneWarning("no nonzero activations survived pruning"), stacklevel=3)
    return out[0]


def ash_p(f, p: float) -> np.ndarray:
    return _shape_vector(f, p, "p")


def ash_b(f, p: float) -> np.ndarray:
    """Prune, then spread the original total evenly over the surviving nonzeros."""
    return _shape_vector(f, p, "b")


def ash_s(f, p: float) -> np.ndarray:
    """Prune, then scale survivors by ``exp(total_before / total_after)``."""
    return _shape_vector(f, p, "s")


def ash(f, config: AshConfig) -> np.ndarray:
    return _shape_vector(f, config.pruning_percentage, config.strategy)


def ash_rows(x: Tensor, config: AshConfig) -> Tensor:
    """Differentiable row-wise shaping of a (batch, D) tensor."""
    xv = x.value
    out, mask, extra, _ = _shape_rows(xv, config.strategy, config.pruning_percentage)
    if config.strategy == "p":
        return nx.make_node(out, (x,), lambda g: (g * mask,), "ash_p")
    if config.strategy == "b":
        n = np.maximum(extra, 1)

        def backward_b(g):
            return (np.broadcast_to(((g * mask).sum(axis=1) / n)[:, None], xv.shape).copy(),)

        return nx.make_node(out, (x,), backward_b, "ash_b")
    s1, s2, scale = extra
    safe_s2 = np.where(s2 == 0, 1.0, s2)

    def backward_s(g):
        direct = g * mask * scale[:, None]
        through_ratio = (g * mask * xv).sum(axis=1) * scale
        d_ratio = 1.0 / safe_s2[:, None] - (s1 / safe_s2**2)[:, None] * mask
        return (direct + through_ratio[:, None] * d_ratio,)

    return nx.make_node(out, (x,), backward_s, "ash_s")


# fusion head -----------------------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int = 64
    num_classes: int = 6
    extra_dims: int = 1
    ash: str = "p"
    prune_pct: float = 75.0
    fusion: bool = True
    mlp_hidden: int = 128
    fused_dim: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.extra_dims < 1:
            raise ConfigError("at least one unseen slot is required")
        if self.num_classes < 1:
            raise ConfigError("at least one seen class is required")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ash not in STRATEGIES + ("off",):
            raise ConfigError(f"unknown ASH strategy {self.ash!r}")
        _check_pct(self.prune_pct)

    @property
    def ash_config(self) -> AshConfig | None:
        return None if self.ash == "off" else AshConfig(self.ash, self.prune_pct)

    @property
    def num_outputs(self) -> int:
        return self.num_classes + self.extra_dims

    @property
    def fused_input_dim(self) -> int:
        return self.feature_dim * (2 if self.ash != "off" else 1)

    @property
    def uses_fusion(self) -> bool:
        return self.fusion and self.ash != "off"

    @property
    def classifier_in(self) -> int:
        return self.fused_dim if self.uses_fusion else self.feature_dim


@dataclass
class FusionHead:
    config: HeadConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: HeadConfig, rng: np.random.Generator):
        c, params = config, {}
        if c.uses_fusion:
            w = c.fused_input_dim
            # The gate starts near identity so early training sees the plain concatenation.
            params["head.se.weight"] = glorot(rng, (w, w), w, w)
            params["head.se.bias"] = np.ones(w)
            params["head.mlp.0.weight"] = he_uniform(rng, (c.mlp_hidden, w), w)
            params["head.mlp.0.bias"] = np.zeros(c.mlp_hidden)
            params["head.mlp.1.weight"] = glorot(rng, (c.fused_dim, c.mlp_hidden), c.mlp_hidden, c.fused_dim)
            params["head.mlp.1.bias"] = np.zeros(c.fused_dim)
        d = c.classifier_in
        params["head.cls.weight"] = glorot(rng, (c.num_outputs, d), d, c.num_outputs)
        params["head.cls.bias"] = np.zeros(c.num_outputs)
        return cls(config, {k: nx.parameter(v) for k, v in params.items()})

    def fuse_rows(self, features: Tensor) -> Tensor:
        """Concatenate features with their shaped copy, gate with SE, mix with the MLP.

        Without fusion the shaped features (or the raw ones when shaping is
        off) pass straight to the classifier.
        """
        ash_cfg = self.config.ash_config
        if ash_cfg is None:
            return features
        shaped = ash_rows(features, ash_cfg)
        if not self.config.uses_fusion:
            return shaped
        return self.fuse_pair(features, shaped)

    def fuse_pair(self, features: Tensor, shaped: Tensor) -> Tensor:
        if features.shape != shaped.shape:
            raise ShapeError(f"feature shapes differ: {features.shape} vs {shaped.shape}")
        p = self.params
        joined = nx.concat([features, shaped], axis=1)
        gate = nx.relu(nx.linear(joined, p["head.se.weight"], p["head.se.bias"]))
        gated = joined * gate
        hidden = nx.relu(nx.linear(gated, p["head.mlp.0.weight"], p["head.mlp.0.bias"]))
        return nx.linear(hidden, p["head.mlp.1.weight"], p["head.mlp.1.bias"])

    def classify_rows(self, fused: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        rate = self.config.dropout
        if training and rate > 0:
            if rng is None:
                raise ContractError("dropout in training mode needs a random generator")
            keep = (rng.random(fused.shape) >= rate) / (1.0 - rate)
            fused = fused * keep
        return nx.linear(fused, self.params["head.cls.weight"], self.params["head.cls.bias"])


def fuse(f, ash_out, head: FusionHead) -> np.ndarray:
    """Single-sample fusion of a feature vector and its shaped copy."""
    f = np.asarray(f, dtype=np.float64)
    ash_out = np.asarray(ash_out, dtype=np.float64)
    if f.shape != ash_out.shape or f.ndim != 1:
        raise ShapeError(f"feature vectors must be 1-D and equally long: {f.shape} vs {ash_out.shape}")
    return head.fuse_pair(Tensor(f[None]), Tensor(ash_out[None])).value[0]


def classify(fused, head: FusionHead, training: bool = False, rng=None) -> np.ndarray:
    fused = np.asarray(fused, dtype=np.float64)
    return head.classify_rows(Tensor(fused[None]), training, rng).value[0]
