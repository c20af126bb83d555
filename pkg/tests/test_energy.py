import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from skeleton_ood import numerics as nx
from skeleton_ood.energy import (
    DetectorState, EnergyConfig, calibrate_threshold, detect, detect_batch, energy_bounded_loss,
    energy_bounded_loss_value, energy_score, energy_scores, msp_score, msp_scores, nearest_rank,
    react_clamp,
)
from skeleton_ood.errors import ConfigError, ContractError, DomainError, StateError
from skeleton_ood.numerics import Tensor

from oracles import logsumexp_mp

logit_vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-40, 40, allow_nan=False))


def _state(tau, k=2, **kw):
    return DetectorState(tau, 100, k, EnergyConfig(**kw))


def test_energy_examples():
    assert energy_score([0.0, 0.0]) == pytest.approx(-math.log(2), abs=1e-15)
    for eps in (0.5, 1.0, 3.0):
        assert energy_score([4.25], eps) == -4.25
    assert energy_score([1.0, 2.0, 3.0]) == pytest.approx(-float(logsumexp_mp([1, 2, 3])), abs=1e-14)
    assert energy_score([1.0, 2.0, 3.0]) == pytest.approx(-3.40760596, abs=1e-8)


@given(logit_vectors, st.floats(-100, 100), st.floats(0.1, 4))
def test_energy_shift_and_bounds(v, c, eps):
    e = energy_score(v, eps)
    assert energy_score(v + c) == pytest.approx(energy_score(v) - c, abs=1e-9)
    assert -v.max() - eps * math.log(v.size) - 1e-9 <= e <= -v.max() + 1e-9


def test_vectorized_scores_ignore_unseen_slots(rng):
    logits = rng.normal(size=(6, 5))
    scores = energy_scores(logits, 3)
    assert_allclose(scores, [-energy_score(row[:3]) for row in logits], rtol=1e-14)
    logits[:, 3:] += 1000.0
    assert_allclose(energy_scores(logits, 3), scores, rtol=1e-14)


def test_msp():
    assert msp_score([0.0, 0.0]) == 0.5
    assert msp_score([10.0, 0.0]) == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-15)
    assert msp_score([7.0]) == 1.0
    assert_allclose(msp_scores(np.array([[0.0, 0.0, 9.0]]), 2), [0.5])


def test_react_clamp():
    assert_array_equal(react_clamp([1.0, 2.0], 5), [1.0, 2.0])
    assert_array_equal(react_clamp([1.0, 9.0], 5), [1.0, 5.0])
    x = np.random.default_rng(0).exponential(size=1000)
    c = np.percentile(x, 90)
    assert np.count_nonzero(react_clamp(x, c) != x) <= 100
    with pytest.raises(DomainError):
        react_clamp([1.0], 0.0)


def test_calibration_examples():
    scores = np.random.default_rng(1).permutation(np.arange(1, 101, dtype=float))
    state = calibrate_threshold(scores, 0.10)
    assert state.tau == 10.0
    assert np.count_nonzero(scores >= state.tau) == 91
    assert np.count_nonzero(scores > state.tau) == 90
    assert calibrate_threshold(np.full(20, 3.5), 0.1).tau == 3.5
    assert nearest_rank([1, 2, 3, 4], 0.5) == 2


def test_calibration_needs_enough_scores():
    with pytest.raises(StateError):
        calibrate_threshold(np.arange(9.0), 0.1)
    with pytest.raises(DomainError):
        calibrate_threshold(np.r_[np.arange(20.0), np.nan], 0.1)


@given(st.integers(10, 400), st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.1, 0.25, 0.5]))
def test_calibration_coverage(n, seed, q):
    scores = np.random.default_rng(seed).normal(size=n)
    tau = calibrate_threshold(scores, q).tau
    frac = np.count_nonzero(scores >= tau) / n
    assert 1 - q - 1e-12 <= frac <= 1 - q + 1 / n + 1e-12


def test_config_validation():
    for kw in ({"epsilon": 0}, {"quantile": 0}, {"quantile": 1}, {"alpha": -0.1}):
        with pytest.raises(ConfigError):
            EnergyConfig(**kw)


def test_detect_examples():
    seen = detect([10.0, 0.0, 0.0], _state(0.0))
    assert (seen.label, seen.is_ood, seen.verdict) == (0, False, "seen")
    unseen = detect([1.0, 1.0, 0.0], _state(5.0))
    assert unseen.score == pytest.approx(1 + math.log(2))
    assert (unseen.label, unseen.is_ood, unseen.verdict) == (2, True, "unseen")
    assert unseen.probabilities == (0.0, 0.0, 1.0)


def test_detect_boundary_is_seen():
    logits = np.array([0.3, 1.7, -2.0])
    score = -energy_score(logits[:2])
    result = detect(logits, _state(score))
    assert result.score == score and not result.is_ood and result.label == 1


def test_detect_requires_calibration():
    with pytest.raises(StateError):
        detect([1.0, 2.0, 0.0], DetectorState())
    with pytest.raises(StateError):
        detect_batch(np.zeros((1, 3)), DetectorState())


def test_detect_batch_matches_single(rng):
    logits = rng.normal(scale=3, size=(50, 4))
    state = _state(0.8, k=3)
    labels, scores, is_ood = detect_batch(logits, state)
    for row, label, score, flag in zip(logits, labels, scores, is_ood):
        single = detect(row, state)
        assert (single.label, single.is_ood) == (label, flag)
        assert single.score == pytest.approx(score, rel=1e-14, abs=1e-14)
        if not flag:
            assert label == int(np.argmax(nx.softmax(row[:3])))


def test_monotone_transform_preserves_partition(rng):
    logits = rng.normal(scale=2, size=(40, 3))
    state = _state(1.0)
    _, scores, is_ood = detect_batch(logits, state)
    transformed = np.exp(scores) < np.exp(state.tau)
    assert_array_equal(transformed, is_ood)


def test_state_round_trip():
    state = _state(1.25, k=4, epsilon=2.0, m_in=-10.0)
    assert DetectorState.from_dict(state.to_dict()) == state


def test_loss_examples():
    cfg = EnergyConfig(alpha=0.1, m_in=-25.0)
    # one sample with a single seen slot: E = -logit
    inside = energy_bounded_loss(Tensor([[30.0, 0.0]]), [0], 1, cfg)
    assert inside.energy_term == 0.0 and inside.total.item() == inside.ce
    outside = energy_bounded_loss(Tensor([[20.0, 0.0]]), [0], 1, cfg)
    assert outside.energy_term == 2.5
    assert outside.total.item() == pytest.approx(outside.ce + 2.5, abs=1e-12)


def test_loss_alpha_zero_equals_ce(rng):
    cfg = EnergyConfig(alpha=0.0)
    for _ in range(20):
        logits = rng.normal(scale=4, size=(8, 5))
        targets = rng.integers(0, 4, size=8)
        ce = float(np.mean(nx.cross_entropy_rows(Tensor(logits), targets).value))
        assert abs(energy_bounded_loss_value(logits, targets, 4, cfg) - ce) <= 1e-12


def test_loss_rejects_unseen_targets():
    with pytest.raises(ContractError):
        energy_bounded_loss(Tensor(np.zeros((2, 3))), [0, 2], 2, EnergyConfig())


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_straddling_hinge(seed):
    rng = np.random.default_rng(seed)
    logits = nx.parameter(rng.normal(size=(6, 4)) + rng.choice([0.0, 3.0], size=(6, 1)))
    cfg = EnergyConfig(m_in=-2.0, alpha=0.5)
    energies = -np.log(np.exp(logits.value[:, :3]).sum(axis=1))
    assert (energies > cfg.m_in).any() and (energies < cfg.m_in).any()
    ok, err = nx.check_gradient(lambda: energy_bounded_loss(logits, [0, 1, 2, 0, 1, 2], 3, cfg).total, [logits])
    assert ok, err
