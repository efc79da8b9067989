"""Contemporaneous causal graph over covariates, treatment and outcome."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CycleError, InvalidConfig, UnknownEdge, UnknownNode

ROLES = ("covariate", "treatment", "outcome")


@dataclass(frozen=True)
class Node:
    name: str
    role: str


def _find_cycle(n_nodes: int, edges: Iterable[tuple[int, int]]) -> list[int] | None:
    children: list[list[int]] = [[] for _ in range(n_nodes)]
    for p, c in sorted(edges):
        children[p].append(c)
    state = [0] * n_nodes  # 0 unvisited, 1 on stack, 2 done
    for root in range(n_nodes):
        if state[root]:
            continue
        stack = [(root, iter(children[root]))]
        path = [root]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                state[node] = 2
            elif state[nxt] == 1:
                return path[path.index(nxt):]
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(children[nxt])))
                path.append(nxt)
    return None


def validate_acyclic(n_nodes: int, edges: Iterable[tuple[int, int]], names: Sequence[str] | None = None) -> None:
    """Raise CycleError carrying one offending cycle if the edge set is cyclic."""
    edges = list(edges)
    for p, c in edges:
        if not (0 <= p < n_nodes and 0 <= c < n_nodes):
            raise UnknownNode(f"edge ({p}, {c}) references a node outside 0..{n_nodes - 1}")
    cycle = _find_cycle(n_nodes, edges)
    if cycle is not None:
        raise CycleError([names[i] for i in cycle] if names else cycle)


@dataclass(frozen=True)
class CausalGraph:
    nodes: tuple[Node, ...]
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", frozenset((int(p), int(c)) for p, c in self.edges))
        for node in self.nodes:
            if node.role not in ROLES:
                raise InvalidConfig(f"unknown role {node.role!r} for node {node.name!r}")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise InvalidConfig("node names must be unique")
        for role in ("treatment", "outcome"):
            count = sum(n.role == role for n in self.nodes)
            if count != 1:
                raise InvalidConfig(f"expected exactly one {role} node, found {count}")
        for p, c in self.edges:
            if p == c:
                raise CycleError([names[p]])
        validate_acyclic(len(self.nodes), self.edges, names)

    @classmethod
    def from_names(cls, nodes: Sequence[tuple[str, str]], edges: Iterable[tuple[str, str]]) -> "CausalGraph":
        node_objs = tuple(Node(name, role) for name, role in nodes)
        lookup = {n.name: i for i, n in enumerate(node_objs)}
        idx_edges = set()
        for p, c in edges:
            if p not in lookup or c not in lookup:
                raise UnknownNode(f"edge ({p}, {c}) references an unknown node")
            idx_edges.add((lookup[p], lookup[c]))
        return cls(node_objs, frozenset(idx_edges))

    # -- queries -----------------------------------------------------------

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)

    def index(self, node: int | str) -> int:
        if isinstance(node, str):
            for i, n in enumerate(self.nodes):
                if n.name == node:
                    return i
            raise UnknownNode(node)
        if not 0 <= int(node) < len(self.nodes):
            raise UnknownNode(node)
        return int(node)

    @property
    def treatment_index(self) -> int:
        return next(i for i, n in enumerate(self.nodes) if n.role == "treatment")

    @property
    def outcome_index(self) -> int:
        return next(i for i, n in enumerate(self.nodes) if n.role == "outcome")

    @property
    def covariate_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.role == "covariate"]

    def parents(self, node: int | str) -> list[int]:
        j = self.index(node)
        return sorted(p for p, c in self.edges if c == j)

    def children(self, node: int | str) -> list[int]:
        j = self.index(node)
        return sorted(c for p, c in self.edges if p == j)

    def topological_sort(self) -> list[int]:
        """Kahn's algorithm; ties go to the smallest node index."""
        n = len(self.nodes)
        indeg = [0] * n
        for _, c in self.edges:
            indeg[c] += 1
        heap = [i for i in range(n) if indeg[i] == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            j = heapq.heappop(heap)
            order.append(j)
            for c in self.children(j):
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, c)
        if len(order) != n:
            validate_acyclic(n, self.edges, self.names)
        return order

    def descendants(self, node: int | str) -> set[int]:
        start = self.index(node)
        seen: set[int] = set()
        frontier = [start]
        while frontier:
            j = frontier.pop()
            for c in self.children(j):
                if c not in seen:
                    seen.add(c)
                    frontier.append(c)
        seen.discard(start)
        return seen

    # -- edits -------------------------------------------------------------

    def remove_edge(self, parent: int | str, child: int | str) -> "CausalGraph":
        edge = (self.index(parent), self.index(child))
        if edge not in self.edges:
            raise UnknownEdge(f"{self.names[edge[0]]} -> {self.names[edge[1]]}")
        return CausalGraph(self.nodes, self.edges - {edge})

    def add_edge(self, parent: int | str, child: int | str) -> "CausalGraph":
        edge = (self.index(parent), self.index(child))
        return CausalGraph(self.nodes, self.edges | {edge})

    def autoregressive(self, order: Sequence[int]) -> "CausalGraph":
        """Fully connected graph in which every node depends on all earlier nodes of ``order``."""
        if sorted(order) != list(range(len(self.nodes))):
            raise InvalidConfig("order must be a permutation of node indices")
        edges = {(order[a], order[b]) for b in range(len(order)) for a in range(b)}
        return CausalGraph(self.nodes, frozenset(edges))

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "nodes": [{"name": n.name, "role": n.role} for n in self.nodes],
            "edges": [[self.nodes[p].name, self.nodes[c].name] for p, c in sorted(self.edges)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CausalGraph":
        return cls.from_names([(n["name"], n["role"]) for n in data["nodes"]], [tuple(e) for e in data["edges"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CausalGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def no_dag_order(graph: CausalGraph) -> list[int]:
    """Ordering used by the unconstrained ablation: treatment, covariates, outcome."""
    return [graph.treatment_index, *graph.covariate_indices, graph.outcome_index]
