"""Server-side knowledge graph: triple store, neighbor sampling, subgraph extraction.

The graph is immutable after construction and treated as undirected: every
triple (h, r, t) is indexed under both h and t, so anchor items reach
attribute entities and vice versa during propagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class KgValidationError(ValueError):
    """Raised when triples reference entities/relations outside declared counts."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """Entity-indexed adjacency over deduplicated, undirected triples.

    adjacency[e] is a (degree, 2) int array of (relation, neighbor) rows,
    sorted for determinism. Empty arrays mark isolated entities.
    """

    num_entities: int
    num_relations: int
    adjacency: list[np.ndarray]
    num_triples: int

    def degree(self, entity: int) -> int:
        return len(self.adjacency[entity])

    def has_edge(self, center: int, relation: int, neighbor: int) -> bool:
        adj = self.adjacency[center]
        if len(adj) == 0:
            return False
        return bool(np.any((adj[:, 0] == relation) & (adj[:, 1] == neighbor)))


@dataclass
class Subgraph:
    """Receptive field sampled around anchor items.

    layers[l] maps each center entity to an (K, 2) array of sampled
    (relation, neighbor) rows; centers of layer l are the anchors (l=0)
    or all neighbors sampled at layer l-1. Isolated centers get a (0, 2)
    array and keep their raw embedding during propagation.
    """

    anchor_items: list[int]
    layers: list[dict[int, np.ndarray]]
    entities: set[int] = field(default_factory=set)
    relations: set[int] = field(default_factory=set)

    @property
    def depth(self) -> int:
        return len(self.layers)


def build_kg(triples: list[Triple] | list[tuple[int, int, int]],
             num_entities: int, num_relations: int) -> KnowledgeGraph:
    """Index triples into an undirected adjacency, dropping exact duplicates.

    Raises KgValidationError naming the first out-of-range triple.
    """
    seen: set[tuple[int, int, int]] = set()
    buckets: list[list[tuple[int, int]]] = [[] for _ in range(num_entities)]
    kept = 0
    for tr in triples:
        h, r, t = (tr.head, tr.relation, tr.tail) if isinstance(tr, Triple) else tr
        if not (0 <= h < num_entities and 0 <= t < num_entities):
            raise KgValidationError(
                f"triple ({h}, {r}, {t}): entity index out of range [0, {num_entities})")
        if not (0 <= r < num_relations):
            raise KgValidationError(
                f"triple ({h}, {r}, {t}): relation index out of range [0, {num_relations})")
        key = (h, r, t)
        if key in seen:
            continue
        seen.add(key)
        kept += 1
        buckets[h].append((r, t))
        buckets[t].append((r, h))

    adjacency = []
    for rows in buckets:
        if rows:
            # keep multiplicity: only exact duplicate triples were dropped,
            # so reverse pairs/self-loops contribute their full edge weight
            arr = np.array(sorted(rows), dtype=np.int64)
        else:
            arr = np.empty((0, 2), dtype=np.int64)
        adjacency.append(arr)
    return KnowledgeGraph(num_entities=num_entities, num_relations=num_relations,
                          adjacency=adjacency, num_triples=kept)


def sample_neighbors(kg: KnowledgeGraph, entity: int, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Sample k (relation, neighbor) rows uniformly with replacement.

    Returns a (k, 2) array, or (0, 2) for isolated entities.
    """
    adj = kg.adjacency[entity]
    if len(adj) == 0:
        return np.empty((0, 2), dtype=np.int64)
    idx = rng.integers(0, len(adj), size=k)
    return adj[idx]


def sample_subgraph(kg: KnowledgeGraph, anchor_items: list[int], k: int, depth: int,
                    rng: np.random.Generator) -> Subgraph:
    """Extract a depth-layer receptive field around the anchors.

    Layer 0 samples neighbors of the anchors; layer l samples neighbors of
    every entity reached at layer l-1. Deterministic under a fixed rng:
    centers are visited in sorted order.
    """
    entities: set[int] = set(int(a) for a in anchor_items)
    relations: set[int] = set()
    layers: list[dict[int, np.ndarray]] = []
    frontier = sorted(entities)
    for _ in range(depth):
        layer: dict[int, np.ndarray] = {}
        next_frontier: set[int] = set()
        for center in frontier:
            samples = sample_neighbors(kg, center, k, rng)
            layer[center] = samples
            if len(samples):
                relations.update(int(r) for r in samples[:, 0])
                next_frontier.update(int(e) for e in samples[:, 1])
        layers.append(layer)
        entities.update(next_frontier)
        frontier = sorted(next_frontier)
    return Subgraph(anchor_items=[int(a) for a in anchor_items], layers=layers,
                    entities=entities, relations=relations)


def load_kg_file(path: str) -> tuple[list[Triple], int, int]:
    """Read `head relation tail` lines; returns (triples, num_entities, num_relations)."""
    triples = []
    max_ent = -1
    max_rel = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise KgValidationError(f"{path}:{lineno}: expected `head relation tail`, got {line!r}")
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError as exc:
                raise KgValidationError(f"{path}:{lineno}: non-integer field in {line!r}") from exc
            triples.append(Triple(h, r, t))
            max_ent = max(max_ent, h, t)
            max_rel = max(max_rel, r)
    return triples, max_ent + 1, max_rel + 1


def save_kg_file(path: str, triples: list[Triple]) -> None:
    with open(path, "w") as fh:
        for tr in triples:
            fh.write(f"{tr.head}\t{tr.relation}\t{tr.tail}\n")
