"""Joint hierarchies and the three adjacency subsets used by the graph convolution.

The subsets are, in order: physical bones, self loops, and a hierarchical
fully connected subset linking every pair of joints on adjacent tree levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

SUBSET_NAMES = ("pc", "sl", "fc")


@dataclass(frozen=True)
class JointHierarchy:
    parent: tuple
    names: tuple = ()
    level: tuple = field(init=False)

    def __post_init__(self):
        parent = tuple(-1 if int(p) < 0 else int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        if not parent:
            raise ContractError("hierarchy needs at least one joint")
        roots = parent.count(-1)
        if roots != 1:
            raise ContractError(f"hierarchy must have exactly one root, found {roots}")
        for i, p in enumerate(parent):
            if p >= len(parent) or p == i:
                raise ContractError(f"joint {i} has invalid parent {p}")
        levels = [None] * len(parent)
        for i in range(len(parent)):
            chain, on_chain, j = [], set(), i
            while levels[j] is None:
                if j in on_chain:
                    raise ContractError(f"parent links form a cycle through joint {j}")
                if parent[j] < 0:
                    levels[j] = 0
                    break
                chain.append(j)
                on_chain.add(j)
                j = parent[j]
            depth = levels[j]
            for k in reversed(chain):
                depth += 1
                levels[k] = depth
        object.__setattr__(self, "level", tuple(levels))
        if self.names and len(self.names) != len(parent):
            raise ContractError("names must match joint count")

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return self.parent.index(-1)

    @classmethod
    def from_edges(cls, num_joints: int, edges, root: int = 0, names=()):
        """Orient an undirected tree edge list away from ``root``."""
        neighbours = [[] for _ in range(num_joints)]
        for a, b in edges:
            neighbours[a].append(b)
            neighbours[b].append(a)
        parent = [None] * num_joints
        parent[root] = -1
        queue = [root]
        while queue:
            node = queue.pop(0)
            for nb in sorted(neighbours[node]):
                if parent[nb] is None:
                    parent[nb] = node
                    queue.append(nb)
        if any(p is None for p in parent):
            raise ContractError("edge list does not span all joints")
        return cls(tuple(parent), tuple(names))


def parse_hierarchy(text: str) -> JointHierarchy:
    """Parse ``<joint_index> <parent_index|-1> [name]`` lines."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"line {lineno}: expected '<joint> <parent> [name]'")
        try:
            idx, par = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if idx in entries:
            raise ParseError(f"line {lineno}: duplicate joint index {idx}")
        if par < -1:
            raise ParseError(f"line {lineno}: parent index {par} is invalid")
        entries[idx] = (par, parts[2] if len(parts) > 2 else "")
    if not entries:
        raise ParseError("hierarchy file is empty")
    if sorted(entries) != list(range(len(entries))):
        raise ParseError("joint indices must be contiguous from 0")
    parents = [entries[i][0] for i in range(len(entries))]
    roots = parents.count(-1)
    if roots != 1:
        raise ParseError(f"hierarchy must have exactly one root (-1 parent), found {roots}")
    try:
        return JointHierarchy(tuple(parents), tuple(entries[i][1] for i in range(len(entries))))
    except ContractError as exc:
        raise ParseError(str(exc)) from None


def format_hierarchy(h: JointHierarchy) -> str:
    names = h.names or ("",) * h.num_joints
    return "".join(f"{i} {p} {n}".rstrip() + "\n" for i, (p, n) in enumerate(zip(h.parent, names)))


def load_hierarchy(spec: str | Path) -> JointHierarchy:
    """Load a built-in hierarchy by name (``ntu25``, ``toy11``) or from a file path."""
    name = str(spec)
    if name in BUILTIN_HIERARCHIES:
        text = resources.files("skeleton_ood.data").joinpath(f"{name}.txt").read_text("utf-8")
    else:
        try:
            text = Path(spec).read_text("utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read hierarchy {spec}: {exc}") from None
    return parse_hierarchy(text)


BUILTIN_HIERARCHIES = ("ntu25", "toy11")


# adjacency builders --------------------------------------------------------

def build_physical(h: JointHierarchy) -> np.ndarray:
    v = h.num_joints
    a = np.zeros((v, v))
    for child, par in enumerate(h.parent):
        if par >= 0:
            a[child, par] = a[par, child] = 1.0
    return a


def build_self_loop(v: int) -> np.ndarray:
    if v < 1:
        raise ContractError("joint count must be positive")
    return np.eye(v)


def build_hierarchical_fc(h: JointHierarchy) -> np.ndarray:
    level = np.asarray(h.level)
    return (np.abs(level[:, None] - level[None, :]) == 1).astype(np.float64)


def normalize(adjacency) -> np.ndarray:
    """Symmetric degree normalization; zero-degree rows stay zero."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"adjacency must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ContractError("adjacency must be symmetric")
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    return a * inv[:, None] * inv[None, :]


@dataclass(frozen=True)
class GraphTopology:
    hierarchy: JointHierarchy
    subsets: np.ndarray = field(repr=False)
    normalized: np.ndarray = field(repr=False)

    @property
    def num_joints(self) -> int:
        return self.hierarchy.num_joints


def build_topology(h: JointHierarchy) -> GraphTopology:
    raw = np.stack([build_physical(h), build_self_loop(h.num_joints), build_hierarchical_fc(h)])
    norm = np.stack([normalize(a) for a in raw])
    raw.setflags(write=False)
    norm.setflags(write=False)
    return GraphTopology(h, raw, norm)
