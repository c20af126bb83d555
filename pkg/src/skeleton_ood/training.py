"""Optimization loop, threshold calibration and evaluation."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import Checkpoint
from .datasets import SkeletonDataset
from .energy import (
    EnergyConfig, calibrate_threshold, detect_batch, energy_bounded_loss,
    energy_scores, msp_scores,
)
from .errors import ConfigError, ProtocolError, ShapeError, StateError
from .fusion import HeadConfig
from .metrics import MetricReport, build_report
from .model import PRESETS, ModelConfig, SkeletonOODModel

REACT_PERCENTILE = 90.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0004
    batch_size: int = 32
    epochs: int = 50
    warmup_epochs: int = 5
    seed: int = 0
    ash: str = "p"
    prune_pct: float = 75.0
    fusion: bool = True
    loss: str = "energy"
    extra_dims: int = 1
    dropout: float = 0.1
    epsilon: float = 1.0
    quantile: float = 0.10
    m_in: float = -25.0
    alpha: float = 0.1
    preset: str = "desk"
    channels: tuple = (16, 32, 32, 64)
    strides: tuple = (1, 2, 1, 2)
    temporal_kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup epochs must be fewer than epochs")
        if self.loss not in ("energy", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")

    @property
    def energy(self) -> EnergyConfig:
        alpha = self.alpha if self.loss == "energy" else 0.0
        return EnergyConfig(self.epsilon, self.quantile, self.m_in, alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"], d["strides"] = list(self.channels), list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, hierarchy, in_channels: int, num_classes: int) -> ModelConfig:
        backbone = BackboneConfig(in_channels, self.channels, self.strides, self.temporal_kernel)
        preset = PRESETS[self.preset]
        head = HeadConfig(
            feature_dim=backbone.feature_dim, num_classes=num_classes, extra_dims=self.extra_dims,
            ash=self.ash, prune_pct=self.prune_pct, fusion=self.fusion,
            mlp_hidden=preset["mlp_hidden"], fused_dim=preset["fused_dim"], dropout=self.dropout,
        )
        return ModelConfig(tuple(hierarchy.parent), backbone, head)


def warmup_lr(epoch: int, base_lr: float, warmup_epochs: int) -> float:
    if epoch < warmup_epochs:
        return base_lr * ((epoch + 1) / warmup_epochs)
    return base_lr


def start_at_margin(model: SkeletonOODModel, num_seen: int, energy: EnergyConfig) -> None:
    """Shift the seen-slot classifier bias so the initial energies sit near ``m_in``.

    With near-zero initial logits the energy starts around ``-eps*ln K``, far
    above a margin like -25, and the squared hinge then dominates the first
    epochs and inflates the logit scale before the classes separate.
    """
    bias = model.head.params["head.cls.bias"].value
    bias[:num_seen] = -energy.m_in - energy.epsilon * np.log(num_seen)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> dict:
    """Nesterov SGD with L2 decay folded into the gradient; updates ``params`` in place."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        g = g + weight_decay * w
        v = momentum * velocity.get(name, np.zeros_like(w)) - lr * g
        velocity[name] = v
        params[name] = w + momentum * v - lr * g
    return params


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)


def _seen_count(ds: SkeletonDataset) -> int:
    if "num_seen" in ds.meta:
        return int(ds.meta["num_seen"])
    return int(ds.labels.max()) + 1


def train(train_set: SkeletonDataset, config: TrainConfig, val_set: SkeletonDataset | None = None,
          log_path=None, model: SkeletonOODModel | None = None) -> TrainResult:
    num_seen = _seen_count(train_set)
    if len(train_set) == 0:
        raise ProtocolError("training split is empty")
    if train_set.labels.min() < 0 or train_set.labels.max() >= num_seen:
        raise ProtocolError("training split contains labels outside the seen classes")
    hierarchy = train_set.hierarchy()
    if hierarchy is None:
        raise ConfigError("training data carries no joint hierarchy")

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(3)
    if model is None:
        model = SkeletonOODModel.init(
            config.model_config(hierarchy, train_set.data.shape[1], num_seen),
            np.random.default_rng(init_seq),
        )
        if config.loss == "energy":
            start_at_margin(model, num_seen, config.energy)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    energy_cfg = config.energy
    params = model.params
    velocity: dict = {}
    log = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            lr = warmup_lr(epoch, config.lr, config.warmup_epochs)
            order = shuffle_rng.permutation(len(train_set))
            sums = np.zeros(4)
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                out = model.forward(train_set.data[idx], training=True, rng=dropout_rng)
                parts = energy_bounded_loss(out.logits, train_set.labels[idx], num_seen, energy_cfg)
                for p in params.values():
                    p.grad = None
                parts.total.backward()
                values = {k: p.value for k, p in params.items()}
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
                sgd_step(values, grads, velocity, lr, config.momentum, config.weight_decay)
                for k, p in params.items():
                    p.value = values[k]
                sums += len(idx) * np.array([parts.total.item(), parts.ce, parts.energy_term, parts.mean_energy])
            mean_loss, mean_ce, mean_term, mean_energy = sums / len(train_set)
            record = {
                "epoch": epoch,
                "lr": lr,
                "mean_loss": float(mean_loss),
                "mean_ce": float(mean_ce),
                "mean_energy_term": float(mean_term),
                "mean_train_energy": float(mean_energy),
                "val_top1": None,
            }
            if val_set is not None and len(val_set):
                logits, _ = model.predict(val_set.data)
                closed = np.argmax(logits[:, :num_seen], axis=1)
                mask = val_set.labels < num_seen
                if mask.any():
                    record["val_top1"] = float(100.0 * np.mean(closed[mask] == val_set.labels[mask]))
            log.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()

    logits, fused = model.predict(train_set.data)
    scores = energy_scores(logits, num_seen, energy_cfg.epsilon)
    detector = calibrate_threshold(scores, energy_cfg.quantile, num_seen=num_seen, config=energy_cfg)
    extra = {
        "train_config": config.to_dict(),
        "react_clip": float(np.percentile(fused, REACT_PERCENTILE)) if fused.size else None,
        "class_names": list(train_set.meta.get("class_names", [])),
    }
    return TrainResult(Checkpoint(model, detector, extra), log)


# evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    report: MetricReport
    scores: np.ndarray
    is_id: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)

    @property
    def id_scores(self):
        return self.scores[self.is_id]

    @property
    def ood_scores(self):
        return self.scores[~self.is_id]


def predict_logits(model: SkeletonOODModel, data: np.ndarray, threads: int = 1, react_clip=None):
    """Evaluation logits, optionally computed over ``threads`` chunks."""
    if threads <= 1 or len(data) < 2:
        return model.predict(data, react_clip=react_clip)[0]
    chunks = np.array_split(np.arange(len(data)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda ix: model.predict(data[ix], react_clip=react_clip)[0],
                              [c for c in chunks if c.size]))
    return np.concatenate(parts)


def evaluate(ckpt: Checkpoint, ds: SkeletonDataset, mode: str = "mix", score: str = "energy",
             react_clip: float | None = None, threads: int = 1, bins: int = 50) -> EvalResult:
    """Run detection over a split and assemble the metric report.

    ``mode="id_only"`` restricts evaluation to seen-class samples.  ``score``
    selects the ranking score used by the threshold-free metrics; the
    verdicts (and Top-1) always come from the calibrated energy threshold.
    """
    if mode not in ("mix", "id_only"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if score not in ("energy", "msp"):
        raise ConfigError(f"unknown score {score!r}")
    if ckpt.detector is None:
        raise StateError("checkpoint has no calibrated detector")
    ckpt.detector.require_calibrated()
    model = ckpt.model
    if ds.num_joints != model.topology.num_joints:
        raise ShapeError(f"data has {ds.num_joints} joints, model expects {model.topology.num_joints}")
    k = ckpt.detector.num_seen
    if mode == "id_only":
        ds = ds.subset(np.flatnonzero(ds.labels < k))
    logits = predict_logits(model, ds.data, threads, react_clip)
    predicted, energy, _ = detect_batch(logits, ckpt.detector)
    scores = energy if score == "energy" else msp_scores(logits, k)
    is_id = ds.labels < k
    closed = np.argmax(logits[:, :k], axis=1) if len(logits) else np.zeros(0, int)
    report = build_report(scores[is_id], scores[~is_id], predicted[is_id], ds.labels[is_id],
                          tau=ckpt.detector.tau, closed_predicted=closed[is_id], bins=bins)
    return EvalResult(report, scores, is_id, predicted, ds.labels.copy(), list(ds.ids))
