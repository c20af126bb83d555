"""Spatial-temporal feature extractor.

A stack of blocks, each a three-subset graph convolution followed by a
temporal convolution along the frame axis, then global average pooling over
frames, joints and subjects.  Batched tensors use the layout
(batch, channels, frames, joints); the subject axis is folded into the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .graph import GraphTopology
from .numerics import Tensor


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    temporal_kernel: int = 5
    temporal_stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {self.temporal_kernel}")
        if self.temporal_stride < 1:
            raise ConfigError("temporal stride must be positive")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    channels: tuple = (16, 32, 32, 64)
    strides: tuple = (1, 2, 1, 2)
    temporal_kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError("channels and strides must be non-empty and equally long")
        self.blocks()

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def blocks(self) -> list:
        ins = (self.in_channels,) + self.channels[:-1]
        return [
            BlockConfig(i, o, self.temporal_kernel, s)
            for i, o, s in zip(ins, self.channels, self.strides)
        ]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# differentiable layers -----------------------------------------------------

def graph_conv(x: Tensor, adjacency: np.ndarray, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Sum over subsets of ``A_g`` along joints followed by 1x1 channel mixing ``W_g``.

    x: (N, C, T, V); adjacency: (G, V, V) normalized; weight: (G, O, C); bias: (O,).
    """
    xv, w = x.value, weight.value
    a = np.asarray(adjacency, dtype=np.float64)
    if xv.ndim != 4:
        raise ShapeError(f"graph_conv expects (N, C, T, V), got {xv.shape}")
    if a.shape[1:] != (xv.shape[3], xv.shape[3]):
        raise ShapeError(f"adjacency {a.shape} does not match {xv.shape[3]} joints")
    if w.shape[0] != a.shape[0] or w.shape[2] != xv.shape[1]:
        raise ShapeError(f"weight {w.shape} incompatible with input {xv.shape} / {a.shape[0]} subsets")
    n, c, t, v = xv.shape
    g_count, o = w.shape[0], w.shape[1]
    # Mix joints per subset, then all subsets' channels in one matmul.
    xa = np.matmul(xv.reshape(n, 1, c * t, v), a[None]).reshape(n, g_count * c, t * v)
    w2 = w.transpose(1, 0, 2).reshape(o, g_count * c)
    out = np.matmul(w2, xa).reshape(n, o, t, v)
    if bias is not None:
        out = out + bias.value[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, o, t * v)
        gw2 = np.tensordot(g2, xa, axes=([0, 2], [0, 2]))
        gw = gw2.reshape(o, g_count, c).transpose(1, 0, 2)
        gxa = np.matmul(w2.T, g2).reshape(n, g_count, c * t, v)
        gx = np.matmul(gxa, np.swapaxes(a, 1, 2)[None]).sum(axis=1).reshape(n, c, t, v)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return nx.make_node(out, parents, backward, "graph_conv")


def temporal_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded 1-D convolution along frames; output length ``ceil(T / stride)``.

    x: (N, C, T, V); weight: (O, C, K) with odd K; bias: (O,).
    """
    xv, w = x.value, weight.value
    out_ch, in_ch, k = w.shape
    if k % 2 == 0:
        raise ConfigError(f"temporal kernel must be odd, got {k}")
    if xv.ndim != 4 or xv.shape[1] != in_ch:
        raise ShapeError(f"temporal_conv input {xv.shape} incompatible with weight {w.shape}")
    n, _, t, v = xv.shape
    if t < 1:
        raise ShapeError("temporal length must be at least 1")
    pad = (k - 1) // 2
    t_out = -(-t // stride)
    span = stride * (t_out - 1) + 1
    xp = np.zeros((n, in_ch, t + 2 * pad, v))
    xp[:, :, pad : pad + t] = xv
    cols = np.empty((n, in_ch, k, t_out, v))  # im2col: (N, C, K, T', V)
    for j in range(k):
        cols[:, :, j] = xp[:, :, j : j + span : stride]
    cols = cols.reshape(n, in_ch * k, t_out * v)
    w2 = w.reshape(out_ch, in_ch * k)
    out = np.matmul(w2, cols).reshape(n, out_ch, t_out, v)
    if bias is not None:
        out = out + bias.value[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, out_ch, t_out * v)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, in_ch, k, t_out, v)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, j]
        grads = [gxp[:, :, pad : pad + t], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return nx.make_node(out, parents, backward, "temporal_conv")


def graph_conv_forward(x, topology: GraphTopology, weights) -> np.ndarray:
    """Single-sample graph convolution: x is (C, T, V), weights is (3, O, C) or a list of three."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != topology.num_joints:
        raise ShapeError(f"expected (C, T, {topology.num_joints}) input, got {x.shape}")
    w = np.stack([np.atleast_2d(np.asarray(wg, dtype=np.float64)) for wg in weights])
    return graph_conv(Tensor(x[None]), topology.normalized, Tensor(w)).value[0]


def temporal_conv_forward(x, kernel, stride: int = 1) -> np.ndarray:
    """Single-channel convenience wrapper: ``x`` is a frame sequence, ``kernel`` the taps."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.size % 2 == 0:
        raise ConfigError(f"temporal kernel must be odd, got {kernel.size}")
    out = temporal_conv(Tensor(x.reshape(1, 1, -1, 1)), Tensor(kernel.reshape(1, 1, -1)), stride=stride)
    return out.value.reshape(-1)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Variance-preserving init for layers followed by a rectifier."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Backbone:
    topology: GraphTopology
    config: BackboneConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, topology: GraphTopology, config: BackboneConfig, rng: np.random.Generator):
        params = {}
        groups = topology.normalized.shape[0]
        for i, b in enumerate(config.blocks()):
            params[f"backbone.{i}.gcn.weight"] = he_uniform(
                rng, (groups, b.out_channels, b.in_channels), groups * b.in_channels
            )
            params[f"backbone.{i}.gcn.bias"] = np.zeros(b.out_channels)
            k = b.temporal_kernel
            params[f"backbone.{i}.tcn.weight"] = he_uniform(
                rng, (b.out_channels, b.out_channels, k), b.out_channels * k
            )
            params[f"backbone.{i}.tcn.bias"] = np.zeros(b.out_channels)
        return cls(topology, config, {k: nx.parameter(v) for k, v in params.items()})

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def feature_maps(self, x: Tensor) -> Tensor:
        """Run the block stack on (N, C, T, V) input; output is rectified."""
        h = x
        for i, b in enumerate(self.config.blocks()):
            p = self.params
            y = nx.relu(graph_conv(h, self.topology.normalized, p[f"backbone.{i}.gcn.weight"],
                                   p[f"backbone.{i}.gcn.bias"]))
            y = temporal_conv(y, p[f"backbone.{i}.tcn.weight"], p[f"backbone.{i}.tcn.bias"],
                              b.temporal_stride)
            if b.in_channels == b.out_channels and b.temporal_stride == 1:
                y = y + h
            h = nx.relu(y)
        return h

    def forward(self, x) -> Tensor:
        """Map a (B, C, T, V, M) batch to pooled (B, D) features."""
        xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if xv.ndim != 5:
            raise ShapeError(f"expected (B, C, T, V, M) input, got {xv.shape}")
        b, c, t, v, m = xv.shape
        if v != self.topology.num_joints:
            raise ShapeError(f"input has {v} joints, topology expects {self.topology.num_joints}")
        if c != self.config.in_channels:
            raise ShapeError(f"input has {c} channels, model expects {self.config.in_channels}")
        x = x if isinstance(x, Tensor) else Tensor(xv)
        folded = nx.reshape(nx.transpose(x, (0, 4, 1, 2, 3)), (b * m, c, t, v))
        fmap = self.feature_maps(folded)
        pooled = nx.mean(fmap, axis=(2, 3))
        return nx.mean(nx.reshape(pooled, (b, m, self.feature_dim)), axis=1)


def extract_features(x, backbone: Backbone) -> np.ndarray:
    """Pooled feature vector(s) for a single (C, T, V, M) sample or a batch."""
    xv = np.asarray(x, dtype=np.float64)
    single = xv.ndim == 4
    out = backbone.forward(xv[None] if single else xv).value
    return out[0] if single else out
