"""Dataset ingestion, splitting, negative sampling, synthetic generation.

Items share the entity id space as a prefix (attribute entities follow),
so request items anchor directly into the knowledge graph. Ratings files
are `user item rating` lines; KG files are `head relation tail` lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kg import KnowledgeGraph, Triple, build_kg, load_kg_file


class DataFormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class Dataset:
    num_users: int
    num_items: int
    num_entities: int
    num_relations: int
    train: list[list[int]]  # per-user positive items
    valid: list[list[int]]
    test: list[list[int]]
    train_neg: list[list[int]]
    valid_neg: list[list[int]]
    test_neg: list[list[int]]
    kg: KnowledgeGraph
    triples: list[Triple] = field(default_factory=list)
    user_id_map: dict[int, int] | None = None  # original -> dense
    truth_prefs: np.ndarray | None = None  # synthetic diagnostics only

    def positives(self, user: int) -> list[int]:
        return sorted(self.train[user] + self.valid[user] + self.test[user])

    def split_of(self, name: str) -> tuple[list[list[int]], list[list[int]]]:
        pos = {"train": self.train, "valid": self.valid, "test": self.test}[name]
        neg = {"train": self.train_neg, "valid": self.valid_neg, "test": self.test_neg}[name]
        return pos, neg


@dataclass
class SyntheticConfig:
    users: int = 500
    items: int = 200
    attributes: int = 20
    relations: int = 2
    interactions_per_user: int = 16
    noise: float = 0.1
    prefs_per_user: int = 2

    def __post_init__(self):
        for name in ("users", "items", "attributes", "relations",
                     "interactions_per_user", "prefs_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must be in [0, 1]")


def load_ratings(path: str, positive_threshold: float = 0.0
                 ) -> tuple[list[list[int]], dict[int, int], int]:
    """Parse `user item rating` lines into per-user positives.

    Ratings >= threshold are positives; users with none are dropped and the
    survivors densified to 0..N-1. Returns (positives per dense user,
    original->dense map, num_items).
    """
    by_user: dict[int, set[int]] = {}
    max_item = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataFormatError(
                    f"{path}:{lineno}: expected `user item rating`, got {line!r}")
            try:
                user = int(parts[0])
                item = int(parts[1])
                rating = float(parts[2])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad field in {line!r}") from exc
            max_item = max(max_item, item)
            if rating >= positive_threshold:
                by_user.setdefault(user, set()).add(item)
    if not by_user:
        raise DataFormatError(f"{path}: no users with positive feedback")
    id_map = {orig: dense for dense, orig in enumerate(sorted(by_user))}
    positives = [sorted(by_user[orig]) for orig in sorted(by_user)]
    return positives, id_map, max_item + 1


def split(positives: list[list[int]], ratios: tuple[float, float, float],
          rng: np.random.Generator
          ) -> tuple[list[list[int]], list[list[int]], list[list[int]]]:
    """Per-user random partition into train/valid/test.

    Rounding: train gets ceil(r0*k), valid ceil(r1*k) of the remainder, test
    the rest; users with fewer than 3 positives keep everything in train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    train, valid, test = [], [], []
    for pos in positives:
        k = len(pos)
        if k < 3:
            train.append(list(pos))
            valid.append([])
            test.append([])
            continue
        order = rng.permutation(k)
        n_train = math.ceil(ratios[0] * k)
        n_valid = min(math.ceil(ratios[1] * k), k - n_train)
        shuffled = [pos[i] for i in order]
        train.append(sorted(shuffled[:n_train]))
        valid.append(sorted(shuffled[n_train:n_train + n_valid]))
        test.append(sorted(shuffled[n_train + n_valid:]))
    return train, valid, test


def sample_eval_negatives(num_items: int, all_positives: list[list[int]],
                          split_positives: list[list[int]],
                          rng: np.random.Generator) -> list[list[int]]:
    """Per user: unobserved items, one per split positive, clamped to the pool."""
    out = []
    for pos_all, pos_split in zip(all_positives, split_positives):
        pool = np.setdiff1d(np.arange(num_items), np.array(pos_all, dtype=np.int64))
        want = min(len(pos_split), len(pool))
        if want == 0:
            out.append([])
            continue
        out.append(sorted(int(i) for i in rng.choice(pool, size=want, replace=False)))
    return out


def attach_splits(positives: list[list[int]], num_items: int, kg: KnowledgeGraph,
                  triples: list[Triple], rng: np.random.Generator,
                  ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                  user_id_map: dict[int, int] | None = None,
                  truth_prefs: np.ndarray | None = None) -> Dataset:
    """Split positives, draw evaluation negatives, assemble the Dataset."""
    canonical = [sorted(p) for p in positives]
    train, valid, test = split(canonical, ratios, rng)
    union = [sorted(set(a) | set(b) | set(c)) for a, b, c in zip(train, valid, test)]
    train_neg = sample_eval_negatives(num_items, union, train, rng)
    valid_neg = sample_eval_negatives(num_items, union, valid, rng)
    test_neg = sample_eval_negatives(num_items, union, test, rng)
    return Dataset(num_users=len(positives), num_items=num_items,
                   num_entities=kg.num_entities, num_relations=kg.num_relations,
                   train=train, valid=valid, test=test,
                   train_neg=train_neg, valid_neg=valid_neg, test_neg=test_neg,
                   kg=kg, triples=triples, user_id_map=user_id_map,
                   truth_prefs=truth_prefs)


def load_dataset(ratings_path: str, kg_path: str, positive_threshold: float,
                 rng: np.random.Generator,
                 ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> Dataset:
    positives, id_map, num_items = load_ratings(ratings_path, positive_threshold)
    triples, kg_entities, kg_relations = load_kg_file(kg_path)
    num_entities = max(kg_entities, num_items)
    kg = build_kg(triples, num_entities, max(kg_relations, 1))
    bad = [(u, i) for u, pos in enumerate(positives) for i in pos if i >= num_entities]
    if bad:
        raise DataFormatError(f"items outside the entity space: {bad[:5]}")
    return attach_splits(positives, num_items, kg, triples, rng, ratios, id_map)


def generate_synthetic(cfg: SyntheticConfig, rng: np.random.Generator) -> Dataset:
    """Planted-preference dataset: item->attribute triples, users prefer attributes.

    Each item links to one attribute entity (relation fixed per attribute);
    each user prefers prefs_per_user attributes and draws interactions from
    preferred-attribute items with probability 1-noise, uniformly otherwise.
    The ground-truth preference matrix is kept for diagnostics.
    """
    m, a = cfg.items, cfg.attributes
    item_attr = rng.integers(0, a, size=m)
    attr_rel = rng.integers(0, cfg.relations, size=a)
    triples = [Triple(head=i, relation=int(attr_rel[item_attr[i]]),
                      tail=m + int(item_attr[i])) for i in range(m)]
    kg = build_kg(triples, num_entities=m + a, num_relations=cfg.relations)

    items_by_attr = [np.flatnonzero(item_attr == x) for x in range(a)]
    populated = [x for x in range(a) if len(items_by_attr[x])]
    truth = np.zeros((cfg.users, a), dtype=bool)
    positives: list[list[int]] = []
    for _ in range(cfg.users):
        prefs = rng.choice(populated, size=min(cfg.prefs_per_user, len(populated)),
                           replace=False)
        preferred = np.concatenate([items_by_attr[x] for x in prefs])
        chosen: set[int] = set()
        attempts = 0
        cap = 50 * cfg.interactions_per_user
        while len(chosen) < cfg.interactions_per_user and attempts < cap:
            attempts += 1
            if cfg.noise > 0 and rng.random() < cfg.noise:
                chosen.add(int(rng.integers(0, m)))
            else:
                chosen.add(int(preferred[rng.integers(0, len(preferred))]))
            if cfg.noise == 0.0 and len(chosen) >= len(preferred):
                break
        user = len(positives)
        truth[user, prefs] = True
        positives.append(sorted(chosen))

    return attach_splits(positives, m, kg, triples, rng, truth_prefs=truth)


def save_ratings_file(path: str, dataset: Dataset) -> None:
    """Write the densified positives back out as `user item 1` lines."""
    with open(path, "w") as fh:
        for user in range(dataset.num_users):
            for item in dataset.positives(user):
                fh.write(f"{user}\t{item}\t1\n")


def save_id_map(path: str, id_map: dict[int, int]) -> None:
    with open(path, "w") as fh:
        for orig in sorted(id_map):
            fh.write(f"{orig}\t{id_map[orig]}\n")
