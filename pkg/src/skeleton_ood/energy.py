"""Energy scores, threshold calibration, detection, and the energy-bounded loss.

Detection scores are negative energies over the seen-class logits: higher
means more in-distribution.  The trailing ``k`` unseen slots never enter the
energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DomainError, StateError
from .numerics import Tensor

UNSEEN = "unseen"
SEEN = "seen"


@dataclass(frozen=True)
class EnergyConfig:
    epsilon: float = 1.0
    quantile: float = 0.10
    m_in: float = -25.0
    alpha: float = 0.1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"temperature must be positive, got {self.epsilon}")
        if not 0 < self.quantile < 1:
            raise ConfigError(f"quantile must lie in (0, 1), got {self.quantile}")
        if self.alpha < 0:
            raise ConfigError(f"loss weight must be nonnegative, got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


def energy_score(logits, epsilon: float = 1.0) -> float:
    """Free energy ``-eps * log sum exp(f / eps)`` of the given (seen-slot) logits."""
    return -nx.logsumexp(logits, epsilon)


def energy_scores(logits: np.ndarray, num_seen: int, epsilon: float = 1.0) -> np.ndarray:
    """Vectorized negative energies (detection scores) for a (batch, K+k) logit array."""
    v = np.asarray(logits, dtype=np.float64)[:, :num_seen]
    m = v.max(axis=1)
    return m + epsilon * np.log(np.exp((v - m[:, None]) / epsilon).sum(axis=1))


def msp_score(logits) -> float:
    """Maximum softmax probability over the given logits."""
    return float(nx.softmax(logits).max())


def msp_scores(logits: np.ndarray, num_seen: int) -> np.ndarray:
    v = np.asarray(logits, dtype=np.float64)[:, :num_seen]
    z = np.exp(v - v.max(axis=1, keepdims=True))
    return (z / z.sum(axis=1, keepdims=True)).max(axis=1)


def react_clamp(features, c: float) -> np.ndarray:
    if not c > 0:
        raise DomainError(f"clamp value must be positive, got {c}")
    return np.minimum(np.asarray(features, dtype=np.float64), c)


def nearest_rank(values, q: float) -> float:
    """Smallest value with at least a fraction ``q`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = max(1, math.ceil(q * v.size - 1e-12))
    return float(v[rank - 1])


@dataclass(frozen=True)
class DetectorState:
    tau: float | None = None
    calibration_count: int = 0
    num_seen: int = 1
    config: EnergyConfig = EnergyConfig()

    @property
    def calibrated(self) -> bool:
        return self.tau is not None

    def require_calibrated(self):
        if not self.calibrated:
            raise StateError("detector has not been calibrated")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "calibration_count": self.calibration_count,
            "num_seen": self.num_seen,
            **self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorState":
        cfg = EnergyConfig(d["epsilon"], d["quantile"], d["m_in"], d["alpha"])
        return cls(d["tau"], d["calibration_count"], d["num_seen"], cfg)


def calibrate_threshold(training_scores, q: float = 0.10, *, num_seen: int = 1,
                        config: EnergyConfig | None = None) -> DetectorState:
    scores = np.asarray(training_scores, dtype=np.float64).ravel()
    if scores.size < 10:
        raise StateError(f"calibration needs at least 10 scores, got {scores.size}")
    if not np.all(np.isfinite(scores)):
        raise DomainError("calibration scores must be finite")
    config = config or EnergyConfig(quantile=q)
    if config.quantile != q:
        config = EnergyConfig(config.epsilon, q, config.m_in, config.alpha)
    return DetectorState(nearest_rank(scores, q), int(scores.size), num_seen, config)


@dataclass(frozen=True)
class Detection:
    label: int
    score: float
    is_ood: bool
    probabilities: tuple

    @property
    def verdict(self) -> str:
        return UNSEEN if self.is_ood else SEEN


def detect(logits, state: DetectorState) -> Detection:
    """Threshold the negative energy; OOD samples put probability 1 on the first unseen slot."""
    state.require_calibrated()
    v = np.asarray(logits, dtype=np.float64).ravel()
    k = state.num_seen
    if v.size <= k:
        raise ContractError(f"expected more than {k} logits, got {v.size}")
    score = -energy_score(v[:k], state.config.epsilon)
    probs = np.zeros(v.size)
    if score < state.tau:
        probs[k] = 1.0
        return Detection(k, score, True, tuple(probs))
    probs[:k] = nx.softmax(v[:k])
    return Detection(int(np.argmax(probs)), score, False, tuple(probs))


def detect_batch(logits: np.ndarray, state: DetectorState):
    """Vectorized :func:`detect`: returns (labels, scores, is_ood)."""
    state.require_calibrated()
    k = state.num_seen
    scores = energy_scores(logits, k, state.config.epsilon)
    is_ood = scores < state.tau
    labels = np.where(is_ood, k, np.argmax(np.asarray(logits)[:, :k], axis=1))
    return labels, scores, is_ood


# loss ------------------------------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    ce: float
    energy_term: float
    mean_energy: float


def energy_bounded_loss(logits: Tensor, targets, num_seen: int, config: EnergyConfig) -> LossParts:
    """Mean cross entropy over all K+k slots plus the squared energy hinge on seen slots."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and targets.max() >= num_seen:
        raise ContractError("training targets must be seen classes")
    ce = nx.mean(nx.cross_entropy_rows(logits, targets))
    seen = nx.getitem(logits, (slice(None), slice(0, num_seen)))
    energy = nx.mul(nx.logsumexp_rows(seen, config.epsilon), -1.0)
    hinge = nx.relu(nx.sub(energy, config.m_in))
    term = nx.mean(nx.square(hinge))
    total = ce if config.alpha == 0 else nx.add(ce, nx.mul(term, config.alpha))
    return LossParts(total, ce.item(), config.alpha * term.item(), float(energy.value.mean()))


def energy_bounded_loss_value(logits, targets, num_seen: int, config: EnergyConfig) -> float:
    return energy_bounded_loss(nx.Tensor(np.atleast_2d(logits)), np.atleast_1d(targets),
                               num_seen, config).total.item()
