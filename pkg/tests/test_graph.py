import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from skeleton_ood.errors import ContractError, ParseError
from skeleton_ood.graph import (
    JointHierarchy, build_hierarchical_fc, build_physical, build_self_loop, build_topology,
    format_hierarchy, load_hierarchy, normalize, parse_hierarchy,
)

from oracles import normalized_adjacency


@st.composite
def hierarchies(draw, max_joints=20):
    v = draw(st.integers(1, max_joints))
    parents = [-1] + [draw(st.integers(0, i - 1)) for i in range(1, v)]
    perm = draw(st.permutations(range(v)))
    # relabel so the root is not always joint 0
    relabeled = [None] * v
    for old, p in enumerate(parents):
        relabeled[perm[old]] = -1 if p < 0 else perm[p]
    return JointHierarchy(tuple(relabeled))


def test_chain_and_star_physical():
    assert_array_equal(build_physical(JointHierarchy((-1, 0))), [[0, 1], [1, 0]])
    star = build_physical(JointHierarchy((-1, 0, 0)))
    assert_array_equal(star, [[0, 1, 1], [1, 0, 0], [1, 0, 0]])


def test_ntu_hierarchy_is_a_tree():
    h = load_hierarchy("ntu25")
    assert h.num_joints == 25
    assert build_physical(h).sum() / 2 == 24
    assert h.names[0] == "spine_base"


def test_self_loop():
    assert_array_equal(build_self_loop(1), [[1.0]])
    assert np.trace(build_self_loop(25)) == 25
    with pytest.raises(ContractError):
        build_self_loop(0)


def test_hierarchical_fc_examples():
    assert_array_equal(build_hierarchical_fc(JointHierarchy((-1, 0))), [[0, 1], [1, 0]])
    star = build_hierarchical_fc(JointHierarchy((-1, 0, 0, 0)))
    assert star.sum() / 2 == 3 and star[1:, 1:].sum() == 0
    binary = JointHierarchy((-1, 0, 0, 1, 1, 2, 2))
    a = build_hierarchical_fc(binary)
    brute = sum(1 for i in range(7) for j in range(i + 1, 7) if abs(binary.level[i] - binary.level[j]) == 1)
    assert a.sum() / 2 == brute == 10


def test_normalize_examples():
    assert_array_equal(normalize(np.eye(3)), np.eye(3))
    assert_array_equal(normalize([[0, 1], [1, 0]]), [[0, 1], [1, 0]])
    tri = normalize(np.ones((3, 3)) - np.eye(3))
    assert_allclose(tri[tri != 0], 0.5)


def test_normalize_rejects_asymmetric_and_nonsquare():
    with pytest.raises(ContractError):
        normalize([[0, 1], [0, 0]])
    with pytest.raises(ContractError):
        normalize(np.zeros((2, 3)))


def test_zero_degree_rows_stay_zero():
    a = np.zeros((3, 3))
    a[0, 1] = a[1, 0] = 1
    out = normalize(a)
    assert np.all(np.isfinite(out)) and not out[2].any()


def test_double_normalization_is_detectable():
    once = normalize(build_physical(load_hierarchy("toy11")))
    assert not np.allclose(normalize(once), once)


@given(hierarchies())
def test_topology_invariants(h):
    topo = build_topology(h)
    v = h.num_joints
    assert topo.subsets.shape == topo.normalized.shape == (3, v, v)
    assert int(build_physical(h).sum()) == 2 * (v - 1)
    assert_array_equal(topo.subsets[1], np.eye(v))
    for raw, norm in zip(topo.subsets, topo.normalized):
        assert_array_equal(raw, raw.T)
        assert set(np.unique(raw)) <= {0.0, 1.0}
        deg = raw.sum(axis=1)
        rows = deg > 0
        rebuilt = norm * np.sqrt(np.outer(deg, deg))
        assert_allclose(rebuilt[rows], raw[rows], atol=1e-12)
        assert_allclose(norm, normalized_adjacency(raw.tolist()), atol=1e-15)
        assert np.abs(np.linalg.eigvalsh(norm)).max() <= 1 + 1e-9
    for i, p in enumerate(h.parent):
        if p >= 0:
            assert h.level[i] == h.level[p] + 1


def test_spectral_radius_by_power_iteration():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = int(rng.integers(2, 30))
        parents = (-1,) + tuple(int(rng.integers(0, i)) for i in range(1, v))
        for norm in build_topology(JointHierarchy(parents)).normalized:
            x = rng.normal(size=v)
            for _ in range(300):
                y = norm @ x
                if not np.linalg.norm(y):
                    break
                x = y / np.linalg.norm(y)
            assert np.linalg.norm(norm @ x) <= 1 + 1e-9


def test_topology_arrays_are_read_only():
    topo = build_topology(load_hierarchy("toy11"))
    with pytest.raises(ValueError):
        topo.normalized[0, 0, 0] = 3.0


@pytest.mark.parametrize("parents", [(0,), (-1, -1), (-1, 2, 1), (-1, 5)])
def test_invalid_hierarchies(parents):
    with pytest.raises(ContractError):
        JointHierarchy(parents)


def test_hierarchy_file_round_trip():
    h = load_hierarchy("toy11")
    again = parse_hierarchy(format_hierarchy(h))
    assert again == h
    assert h.level[4] == 3


@pytest.mark.parametrize(
    "text",
    ["", "0 -1\n0 0\n", "0 -1\n2 0\n", "0 -1\n1 -1\n", "0 x\n", "0 -2\n", "0 1\n1 0\n"],
)
def test_hierarchy_parse_errors(text):
    with pytest.raises(ParseError):
        parse_hierarchy(text)


def test_from_edges_orients_away_from_root():
    h = JointHierarchy.from_edges(4, [(0, 1), (1, 2), (1, 3)], root=1)
    assert h.parent == (1, -1, 1, 1)


def test_missing_hierarchy_file(tmp_path):
    with pytest.raises(ParseError):
        load_hierarchy(tmp_path / "none.txt")
