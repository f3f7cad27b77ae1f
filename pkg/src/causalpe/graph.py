"""Prior/posterior programs as DAGs and the dependency masks derived from them.

A prior program is the generative DAG of a Bayesian model: parameter nodes
feed into each other and finally into data nodes. The posterior program is
obtained by reversing every edge. Ordering the parameter nodes of the
posterior program topologically yields a lower-triangular dependency
structure, which is what the masked block layers consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from causalpe.errors import StructuralError

PARAMETER = "parameter"
DATA = "data"


@dataclass(frozen=True)
class Node:
    id: str
    role: str
    dim: int = 1

    def __post_init__(self):
        if self.role not in (PARAMETER, DATA):
            raise StructuralError(f"node {self.id!r}: unknown role {self.role!r}")
        if int(self.dim) < 1:
            raise StructuralError(f"node {self.id!r}: dim must be positive")


class Dag:
    """Immutable directed acyclic graph over named parameter and data nodes.

    Node order is significant: it is the insertion order used to break ties
    when sorting topologically. Two graphs compare equal when they list the
    same nodes in the same order and have the same edge set.
    """

    def __init__(self, nodes: Iterable[Node], edges: Iterable[tuple[str, str]] = ()):
        self._nodes = tuple(nodes)
        self._edges = tuple((str(a), str(b)) for a, b in edges)
        self._index = {n.id: i for i, n in enumerate(self._nodes)}
        if len(self._index) != len(self._nodes):
            raise StructuralError("duplicate node ids")
        for a, b in self._edges:
            if a not in self._index or b not in self._index:
                raise StructuralError(f"edge ({a!r}, {b!r}) names an unknown node")
            if a == b:
                raise StructuralError(f"self-loop on {a!r}")
        if len(set(self._edges)) != len(self._edges):
            raise StructuralError("duplicate edges")
        self._parents = {n.id: [] for n in self._nodes}
        self._children = {n.id: [] for n in self._nodes}
        for a, b in self._edges:
            self._parents[b].append(a)
            self._children[a].append(b)
        _kahn(self)  # raises on cycles

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self._nodes

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        return self._edges

    def node(self, node_id: str) -> Node:
        try:
            return self._nodes[self._index[node_id]]
        except KeyError:
            raise StructuralError(f"unknown node {node_id!r}") from None

    def parents(self, node_id: str) -> tuple[str, ...]:
        return tuple(self._parents[node_id])

    def children(self, node_id: str) -> tuple[str, ...]:
        return tuple(self._children[node_id])

    @property
    def parameters(self) -> tuple[Node, ...]:
        return tuple(n for n in self._nodes if n.role == PARAMETER)

    @property
    def data(self) -> tuple[Node, ...]:
        return tuple(n for n in self._nodes if n.role == DATA)

    def parameter_dim(self) -> int:
        return sum(n.dim for n in self.parameters)

    def data_dim(self) -> int:
        return sum(n.dim for n in self.data)

    def __eq__(self, other):
        if not isinstance(other, Dag):
            return NotImplemented
        return self._nodes == other._nodes and set(self._edges) == set(other._edges)

    def __hash__(self):
        return hash((self._nodes, frozenset(self._edges)))

    def __repr__(self):
        edges = ", ".join(f"{a}->{b}" for a, b in self._edges)
        return f"Dag(nodes={[n.id for n in self._nodes]}, edges=[{edges}])"

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.id, "role": n.role, "dim": n.dim} for n in self._nodes],
            "edges": [[a, b] for a, b in self._edges],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Dag":
        try:
            nodes = [Node(str(n["id"]), str(n["role"]), int(n["dim"])) for n in doc["nodes"]]
            edges = [(e[0], e[1]) for e in doc["edges"]]
        except (KeyError, TypeError, IndexError) as exc:
            raise StructuralError(f"malformed graph document: {exc}") from exc
        return cls(nodes, edges)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Dag":
        return cls.from_dict(json.loads(text))


def _kahn(dag: Dag) -> list[str]:
    indegree = {n.id: len(dag.parents(n.id)) for n in dag.nodes}
    ready = [n.id for n in dag.nodes if indegree[n.id] == 0]
    out = []
    while ready:
        nid = ready.pop()
        out.append(nid)
        for child in dag.children(nid):
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
    if len(out) != len(dag.nodes):
        cyclic = sorted(k for k, v in indegree.items() if v > 0)
        raise StructuralError(f"graph contains a directed cycle through {cyclic}")
    return out


def invert_program(prior: Dag) -> Dag:
    """Naive inversion: reverse every edge.

    The node listing is reversed as well, since the posterior program runs the
    prior program backwards; inverting twice therefore restores the original.
    """
    return Dag(reversed(prior.nodes), [(b, a) for a, b in prior.edges])


@dataclass(frozen=True)
class TopologicalOrder:
    order: tuple[str, ...]

    def __iter__(self):
        return iter(self.order)

    def __len__(self):
        return len(self.order)

    def position(self, node_id: str) -> int:
        return self.order.index(node_id)


def topological_sort(posterior: Dag) -> TopologicalOrder:
    """Order parameter nodes so that every parameter->parameter edge points forward.

    Nodes are sorted by depth (longest path from a parameter source along
    parameter->parameter edges); ties keep the graph's node order.
    """
    params = [n.id for n in posterior.parameters]
    pset = set(params)
    depth: dict[str, int] = {}
    for nid in _kahn(posterior):
        if nid not in pset:
            continue
        ps = [p for p in posterior.parents(nid) if p in pset]
        depth[nid] = 1 + max((depth[p] for p in ps), default=-1)
    rank = {nid: i for i, nid in enumerate(params)}
    return TopologicalOrder(tuple(sorted(params, key=lambda n: (depth[n], rank[n]))))


@dataclass(frozen=True, eq=False)
class DependencyMask:
    """Lower-triangular dependency structure over ordered parameter nodes.

    ``dim_mask`` is indexed by flattened parameter dimensions in topological
    layout: the dimensions of ``order[0]`` first, then ``order[1]`` and so on.
    """

    order: tuple[str, ...]
    node_dims: tuple[int, ...]
    node_mask: np.ndarray
    dim_mask: np.ndarray
    cond_targets: frozenset

    @property
    def dim(self) -> int:
        return int(sum(self.node_dims))

    @property
    def node_of_dim(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.order)), self.node_dims)

    @property
    def target_dims(self) -> np.ndarray:
        """Boolean vector marking flattened dimensions that receive conditioning."""
        hit = np.array([nid in self.cond_targets for nid in self.order], dtype=bool)
        return hit[self.node_of_dim]

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "node_dims": list(self.node_dims),
            "node_mask": self.node_mask.astype(int).tolist(),
            "dim_mask": self.dim_mask.astype(int).tolist(),
            "cond_targets": sorted(self.cond_targets),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DependencyMask":
        return cls(
            order=tuple(doc["order"]),
            node_dims=tuple(int(d) for d in doc["node_dims"]),
            node_mask=np.asarray(doc["node_mask"], dtype=bool),
            dim_mask=np.asarray(doc["dim_mask"], dtype=bool),
            cond_targets=frozenset(doc["cond_targets"]),
        )

    def __eq__(self, other):
        if not isinstance(other, DependencyMask):
            return NotImplemented
        return (
            self.order == other.order
            and self.node_dims == other.node_dims
            and np.array_equal(self.node_mask, other.node_mask)
            and np.array_equal(self.dim_mask, other.dim_mask)
            and self.cond_targets == other.cond_targets
        )


def dependency_mask(
    posterior: Dag, order: TopologicalOrder, condition_all: bool = False
) -> DependencyMask:
    """Derive node- and dimension-level masks for a posterior program.

    Entry ``[i, j]`` is true iff ``i == j`` or the node at position ``j`` is a
    parent of the node at position ``i``. Within a vector-valued node the
    dimension block is dense lower-triangular.
    """
    ids = list(order.order)
    params = {n.id for n in posterior.parameters}
    if set(ids) != params or len(ids) != len(params):
        raise StructuralError("order must be a permutation of the parameter nodes")
    pos = {nid: i for i, nid in enumerate(ids)}
    for a, b in posterior.edges:
        if a in pos and b in pos and pos[a] >= pos[b]:
            raise StructuralError(f"order violates edge {a}->{b}")

    k = len(ids)
    node_mask = np.eye(k, dtype=bool)
    for i, nid in enumerate(ids):
        for p in posterior.parents(nid):
            if p in pos:
                node_mask[i, pos[p]] = True

    dims = [posterior.node(nid).dim for nid in ids]
    offsets = np.concatenate([[0], np.cumsum(dims)])
    dim_mask = np.zeros((offsets[-1], offsets[-1]), dtype=bool)
    for i in range(k):
        for j in range(k):
            if not node_mask[i, j]:
                continue
            rows = slice(offsets[i], offsets[i + 1])
            cols = slice(offsets[j], offsets[j + 1])
            if i == j:
                dim_mask[rows, cols] = np.tril(np.ones((dims[i], dims[i]), dtype=bool))
            else:
                dim_mask[rows, cols] = True

    data_ids = {n.id for n in posterior.data}
    if condition_all:
        targets = frozenset(ids)
    else:
        targets = frozenset(
            nid for nid in ids if any(p in data_ids for p in posterior.parents(nid))
        )
    return DependencyMask(tuple(ids), tuple(dims), node_mask, dim_mask, targets)


def layout_permutation(natural: Iterable[Node], order: TopologicalOrder) -> np.ndarray:
    """Index array mapping topological-layout positions to natural-layout columns.

    ``theta_natural[:, perm]`` gives ``theta`` in topological layout, where the
    natural layout concatenates ``natural`` nodes in the order given.
    """
    natural = list(natural)
    start, off = {}, 0
    for n in natural:
        start[n.id] = (off, n.dim)
        off += n.dim
    idx = []
    for nid in order:
        s, d = start[nid]
        idx.extend(range(s, s + d))
    return np.asarray(idx, dtype=np.int64)
