"""Finite-difference verification of the hand-derived backward pass.

The oracle only ever calls the forward pass: each parameter coordinate is
perturbed by +-step and the loss difference quotient is compared against
the analytic gradient. Used by the test suite and the `gradcheck` CLI
subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import Triple, build_kg, sample_subgraph
from .model import LocalGraph, ModelParams, backward, forward_loss, init_model_params
from .rng import derive_rng


@dataclass
class GradCheckResult:
    instances: int
    max_rel_err: float
    worst_instance: int
    failures: list[int]


def random_instance(seed: int, index: int = 0) -> tuple[LocalGraph, ModelParams, np.ndarray]:
    """Small random KG + subgraph + parameters.

    The index cycles through every (d, K, H, mode) combination so a run of
    24+ instances is guaranteed to cover all of them.
    """
    rng = derive_rng(seed, 99, index)
    d = (2, 4)[index % 2]
    k = (1, 2)[(index // 2) % 2]
    depth = (0, 1, 2)[(index // 4) % 3]
    mode = ("replace", "transform")[(index // 12) % 2]

    num_entities = 10
    num_relations = 3
    n_triples = int(rng.integers(8, 16))
    triples = [Triple(int(rng.integers(0, num_entities)),
                      int(rng.integers(0, num_relations)),
                      int(rng.integers(0, num_entities))) for _ in range(n_triples)]
    kg = build_kg(triples, num_entities, num_relations)

    n_anchors = int(rng.integers(1, 3))
    anchors = [int(a) for a in rng.choice(num_entities, size=n_anchors, replace=False)]
    subgraph = sample_subgraph(kg, anchors, k, depth, rng)

    scale = 1.0 / np.sqrt(d)
    entity_vectors = {int(e): rng.uniform(-scale, scale, d) for e in sorted(subgraph.entities)}
    relation_vectors = {int(r): rng.uniform(-scale, scale, d) for r in sorted(subgraph.relations)}
    user = rng.uniform(-scale, scale, d)
    labels = np.array([int(rng.integers(0, 2)) for _ in anchors])
    params = init_model_params(d, depth, mode, rng)
    graph = LocalGraph(user=user, anchors=list(zip(anchors, labels.tolist())),
                       subgraph=subgraph, entity_vectors=entity_vectors,
                       relation_vectors=relation_vectors)
    return graph, params, labels


def _fd_vector(vec: np.ndarray, loss_fn, step: float) -> np.ndarray:
    grad = np.zeros_like(vec)
    flat = vec.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_fn()
        flat[i] = orig - step
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * step)
    return grad


def finite_difference(graph: LocalGraph, params: ModelParams,
                      labels: np.ndarray, step: float = 1e-5) -> dict:
    """Central-difference gradients for every parameter the model touches."""
    def loss_fn() -> float:
        return forward_loss(graph, params, labels)[0]

    fd = {
        "entities": {e: _fd_vector(graph.entity_vectors[e], loss_fn, step)
                     for e in sorted(graph.entity_vectors)},
        "relations": {r: _fd_vector(graph.relation_vectors[r], loss_fn, step)
                      for r in sorted(graph.relation_vectors)},
        "user": _fd_vector(graph.user, loss_fn, step),
        "model": [(_fd_vector(w, loss_fn, step), _fd_vector(b, loss_fn, step))
                  for w, b in zip(params.weights, params.biases)],
    }
    return fd


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # Denominator floored at 1e-6 so FD roundoff on near-zero gradients
    # does not masquerade as relative error.
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(diff / denom)) if diff.size else 0.0


def max_relative_error(graph: LocalGraph, params: ModelParams,
                       labels: np.ndarray, step: float = 1e-5) -> float:
    packet = backward(graph, params, labels)
    fd = finite_difference(graph, params, labels, step)
    worst = _rel_err(packet.user_grad, fd["user"])
    for e, fd_vec in fd["entities"].items():
        worst = max(worst, _rel_err(packet.entity_grads.entries[e], fd_vec))
    for r, fd_vec in fd["relations"].items():
        worst = max(worst, _rel_err(packet.relation_grads.entries[r], fd_vec))
    for (adw, adb), (fdw, fdb) in zip(packet.model_grads, fd["model"]):
        worst = max(worst, _rel_err(adw, fdw), _rel_err(adb, fdb))
    return worst


def run_gradient_check(instances: int = 100, step: float = 1e-5,
                       tolerance: float = 1e-4, seed: int = 2024) -> GradCheckResult:
    worst = 0.0
    worst_instance = -1
    failures = []
    for i in range(instances):
        graph, params, labels = random_instance(seed, i)
        err = max_relative_error(graph, params, labels, step)
        if err > worst:
            worst = err
            worst_instance = i
        if err > tolerance:
            failures.append(i)
    return GradCheckResult(instances=instances, max_rel_err=worst,
                           worst_instance=worst_instance, failures=failures)
