"""Relation-aware GNN over a merged local graph.

Forward pass: per hop, every center entity's vector becomes
phi(sum_k alpha_k * x_neighbor_k), where alpha is a user-specific softmax
attention over the relation embeddings of its sampled neighbor list.
phi is the raw aggregated sum in `replace` mode, or
tanh(W_hop (x_self + sum) + b_hop) in `transform` mode. The prediction
for an anchor item is sigmoid(<user, final item vector>), trained with
mean binary cross-entropy.

The backward pass is hand-derived and exact (checked against central
finite differences); attention weights are shared across hops, so their
adjoints accumulate over hops before the softmax backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import Subgraph

PROB_CLAMP = 1e-7


@dataclass
class ModelParams:
    """Per-hop transform weights plus the aggregation mode."""

    mode: str  # "replace" | "transform"
    weights: list[np.ndarray]  # depth entries, each (d, d)
    biases: list[np.ndarray]  # depth entries, each (d,)

    def __post_init__(self):
        if self.mode not in ("replace", "transform"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases layer count mismatch")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0] if self.weights else 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.mode, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])


def init_model_params(dim: int, depth: int, mode: str,
                      rng: np.random.Generator) -> ModelParams:
    """Uniform +-1/sqrt(dim) weights, zero biases, one layer per hop."""
    bound = 1.0 / np.sqrt(dim)
    weights = [rng.uniform(-bound, bound, size=(dim, dim)) for _ in range(depth)]
    biases = [np.zeros(dim) for _ in range(depth)]
    return ModelParams(mode=mode, weights=weights, biases=biases)


class SparseGrad:
    """Sparse per-id gradient vectors with accumulation counts."""

    def __init__(self):
        self.entries: dict[int, np.ndarray] = {}
        self.counts: dict[int, int] = {}

    def add(self, idx: int, vec: np.ndarray) -> None:
        idx = int(idx)
        if idx in self.entries:
            self.entries[idx] = self.entries[idx] + vec
            self.counts[idx] += 1
        else:
            self.entries[idx] = np.array(vec, dtype=np.float64)
            self.counts[idx] = 1

    def ids(self) -> list[int]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, idx: int) -> bool:
        return int(idx) in self.entries


@dataclass
class GradientPacket:
    """One client's upload: sparse embedding grads, dense model grads, weight.

    user_grad never leaves the client; ldp_encrypt strips it before upload.
    """

    entity_grads: SparseGrad
    relation_grads: SparseGrad
    model_grads: list[tuple[np.ndarray, np.ndarray]]
    user_grad: np.ndarray | None
    weight: int
    loss: float
    client_id: int = -1

    def all_finite(self) -> bool:
        for grads in (self.entity_grads, self.relation_grads):
            for vec in grads.entries.values():
                if not np.all(np.isfinite(vec)):
                    return False
        for dw, db in self.model_grads:
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                return False
        if self.user_grad is not None and not np.all(np.isfinite(self.user_grad)):
            return False
        return np.isfinite(self.loss)


@dataclass
class LocalGraph:
    """Training graph: anchors with labels, sampled subgraph, gathered vectors."""

    user: np.ndarray
    anchors: list[tuple[int, int]]  # (item, label)
    subgraph: Subgraph
    entity_vectors: dict[int, np.ndarray]
    relation_vectors: dict[int, np.ndarray]

    @property
    def anchor_items(self) -> list[int]:
        return [a for a, _ in self.anchors]

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.anchors], dtype=np.float64)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_weights(user: np.ndarray, relations: list[np.ndarray]) -> np.ndarray:
    """Softmax over inner-product scores between the user and each relation."""
    if len(relations) == 0:
        raise ValueError("attention over an empty neighbor list")
    scores = np.array([float(np.dot(user, r)) for r in relations])
    return softmax(scores)


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def predict(user: np.ndarray, item_final: np.ndarray) -> float:
    """Readout: sigmoid of the user/item inner product."""
    return float(sigmoid(float(np.dot(user, item_final))))


def bce_loss(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("bce_loss over empty predictions")
    if p.shape != y.shape:
        raise ValueError("predictions/labels length mismatch")
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))


# ---------------------------------------------------------------------------
# Forward plan and cache
# ---------------------------------------------------------------------------

@dataclass
class _LayerPlan:
    sampled_rows: np.ndarray  # rows in this depth's entity array that have samples
    isolated_rows: np.ndarray  # rows whose neighbor list is empty (keep raw vector)
    rel_rows: np.ndarray  # (n_sampled, K) rows into the relation matrix
    rel_ids: np.ndarray  # (n_sampled, K) relation ids
    tail_rows: np.ndarray  # (n_sampled, K) rows into the next depth's arrays


@dataclass
class _Plan:
    depth: int
    ents: list[np.ndarray]  # entity ids per depth; depth 0 keeps anchor order
    layers: list[_LayerPlan]
    rel_ids: np.ndarray  # sorted unique relation ids used anywhere


@dataclass
class _ForwardState:
    plan: _Plan
    rel_mat: np.ndarray  # (num_used_relations, d) gathered relation vectors
    alphas: list[np.ndarray]  # per layer (n_sampled, K)
    hops: list[list[np.ndarray]]  # hops[i][depth] -> (n_depth, d) values after hop i
    aggs: list[list[np.ndarray | None]]  # aggregated neighbor sums per hop/layer
    logits: np.ndarray
    predictions: np.ndarray


def _build_plan(graph: LocalGraph) -> _Plan:
    sub = graph.subgraph
    depth = sub.depth
    ents: list[np.ndarray] = [np.array(graph.anchor_items, dtype=np.int64)]
    for layer in sub.layers:
        tails: list[int] = []
        for samples in layer.values():
            if len(samples):
                tails.extend(int(t) for t in samples[:, 1])
        ents.append(np.array(sorted(set(tails)), dtype=np.int64))

    rel_ids = np.array(sorted(sub.relations), dtype=np.int64)
    layers: list[_LayerPlan] = []
    for lvl, layer in enumerate(sub.layers):
        sampled, isolated, rels, tails = [], [], [], []
        for row, ent in enumerate(ents[lvl]):
            samples = layer[int(ent)]
            if len(samples):
                sampled.append(row)
                rels.append(samples[:, 0])
                tails.append(samples[:, 1])
            else:
                isolated.append(row)
        if sampled:
            rel_arr = np.stack(rels)
            tail_arr = np.stack(tails)
            rel_rows = np.searchsorted(rel_ids, rel_arr)
            tail_rows = np.searchsorted(ents[lvl + 1], tail_arr)
        else:
            rel_arr = np.empty((0, 0), dtype=np.int64)
            tail_arr = np.empty((0, 0), dtype=np.int64)
            rel_rows = rel_arr
            tail_rows = tail_arr
        layers.append(_LayerPlan(
            sampled_rows=np.array(sampled, dtype=np.int64),
            isolated_rows=np.array(isolated, dtype=np.int64),
            rel_rows=rel_rows, rel_ids=rel_arr, tail_rows=tail_rows))
    return _Plan(depth=depth, ents=ents, layers=layers, rel_ids=rel_ids)


def _forward(graph: LocalGraph, params: ModelParams) -> _ForwardState:
    plan = _build_plan(graph)
    if params.depth != plan.depth:
        raise ValueError(
            f"model has {params.depth} layers but subgraph depth is {plan.depth}")
    d = len(graph.user)
    u = graph.user

    rel_mat = (np.stack([graph.relation_vectors[int(r)] for r in plan.rel_ids])
               if len(plan.rel_ids) else np.empty((0, d)))

    # Attention is user/relation only, so it is fixed across hops.
    alphas: list[np.ndarray] = []
    for lp in plan.layers:
        if len(lp.sampled_rows):
            scores = rel_mat[lp.rel_rows] @ u  # (n_sampled, K)
            alphas.append(softmax(scores, axis=1))
        else:
            alphas.append(np.empty((0, 0)))

    values0 = [np.stack([graph.entity_vectors[int(e)] for e in ents])
               if len(ents) else np.empty((0, d))
               for ents in plan.ents]
    hops = [values0]
    aggs: list[list[np.ndarray | None]] = []
    for hop in range(1, plan.depth + 1):
        prev = hops[-1]
        cur = [v.copy() for v in prev]
        hop_aggs: list[np.ndarray | None] = []
        for lvl, lp in enumerate(plan.layers):
            if len(lp.sampled_rows) == 0:
                hop_aggs.append(None)
                continue
            nbr = prev[lvl + 1][lp.tail_rows]  # (n_sampled, K, d)
            agg = np.einsum("nk,nkd->nd", alphas[lvl], nbr)
            hop_aggs.append(agg)
            if params.mode == "replace":
                cur[lvl][lp.sampled_rows] = agg
            else:
                w, b = params.weights[hop - 1], params.biases[hop - 1]
                pre = (prev[lvl][lp.sampled_rows] + agg) @ w.T + b
                cur[lvl][lp.sampled_rows] = np.tanh(pre)
        hops.append(cur)
        aggs.append(hop_aggs)

    final_anchor = hops[-1][0]
    logits = final_anchor @ u if len(final_anchor) else np.empty(0)
    preds = sigmoid(logits) if logits.size else np.empty(0)
    return _ForwardState(plan=plan, rel_mat=rel_mat, alphas=alphas, hops=hops,
                         aggs=aggs, logits=logits, predictions=np.atleast_1d(preds))


def propagate(graph: LocalGraph, params: ModelParams, depth: int) -> np.ndarray:
    """Return the (n_anchors, d) matrix of final anchor vectors after `depth` hops."""
    if depth != graph.subgraph.depth:
        raise ValueError(f"requested depth {depth} != subgraph depth {graph.subgraph.depth}")
    return _forward(graph, params).hops[-1][0]


def forward_loss(graph: LocalGraph, params: ModelParams,
                 labels: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Convenience: run the forward pass, return (mean BCE loss, predictions)."""
    state = _forward(graph, params)
    y = graph.labels if labels is None else np.asarray(labels, dtype=np.float64)
    return bce_loss(state.predictions, y), state.predictions


def backward(graph: LocalGraph, params: ModelParams,
             labels: np.ndarray | None = None) -> GradientPacket:
    """Exact gradients of the mean BCE loss w.r.t. every touched parameter.

    Covers all gathered entity vectors, relation vectors (through the
    attention softmax), per-hop transform weights, and the user embedding
    (through both the readout and the attention path). The packet weight is
    the number of anchor items.
    """
    state = _forward(graph, params)
    plan = state.plan
    y = graph.labels if labels is None else np.asarray(labels, dtype=np.float64)
    m = len(y)
    if m == 0:
        raise ValueError("backward over empty anchor list")
    u = graph.user
    d = len(u)
    preds = state.predictions
    loss = bce_loss(preds, y)

    # d(loss)/d(logit); zero where the clamp flattens the loss.
    dz = (preds - y) / m
    clamped = (preds <= PROB_CLAMP) | (preds >= 1.0 - PROB_CLAMP)
    dz[clamped] = 0.0

    user_grad = state.hops[-1][0].T @ dz if m else np.zeros(d)

    # Adjoints per hop state; only the final anchors receive loss gradient.
    adj = [[np.zeros_like(v) for v in hop] for hop in state.hops]
    adj[plan.depth][0] = dz[:, None] * u[None, :]

    dalpha = [np.zeros_like(a) for a in state.alphas]
    model_grads = [(np.zeros((d, d)), np.zeros(d)) for _ in range(params.depth)]

    for hop in range(plan.depth, 0, -1):
        prev = state.hops[hop - 1]
        for lvl, lp in enumerate(plan.layers):
            g_full = adj[hop][lvl]
            if len(lp.isolated_rows):
                adj[hop - 1][lvl][lp.isolated_rows] += g_full[lp.isolated_rows]
            if len(lp.sampled_rows) == 0:
                continue
            g = g_full[lp.sampled_rows]
            agg = state.aggs[hop - 1][lvl]
            if params.mode == "transform":
                out = state.hops[hop][lvl][lp.sampled_rows]
                dpre = g * (1.0 - out * out)
                w = params.weights[hop - 1]
                dw, db = model_grads[hop - 1]
                dw += dpre.T @ (prev[lvl][lp.sampled_rows] + agg)
                db += dpre.sum(axis=0)
                dagg = dpre @ w
                adj[hop - 1][lvl][lp.sampled_rows] += dagg  # self path
            else:
                dagg = g
            nbr = prev[lvl + 1][lp.tail_rows]
            dalpha[lvl] += np.einsum("nd,nkd->nk", dagg, nbr)
            contrib = state.alphas[lvl][:, :, None] * dagg[:, None, :]
            np.add.at(adj[hop - 1][lvl + 1], lp.tail_rows.reshape(-1),
                      contrib.reshape(-1, d))
        # Depths deeper than any center layer (the leaves) carry raw values
        # through every hop; pass their adjoint straight through.
        adj[hop - 1][plan.depth] += adj[hop][plan.depth]

    # Softmax backward, once per layer (weights are shared across hops).
    rel_grad_mat = np.zeros_like(state.rel_mat)
    for lvl, lp in enumerate(plan.layers):
        if len(lp.sampled_rows) == 0:
            continue
        a = state.alphas[lvl]
        da = dalpha[lvl]
        ds = a * (da - np.sum(a * da, axis=1, keepdims=True))
        rel_vecs = state.rel_mat[lp.rel_rows]  # (n, K, d)
        user_grad = user_grad + np.einsum("nk,nkd->d", ds, rel_vecs)
        np.add.at(rel_grad_mat, lp.rel_rows.reshape(-1),
                  ds.reshape(-1)[:, None] * u[None, :])

    entity_grads = SparseGrad()
    for lvl, ents in enumerate(plan.ents):
        rows = adj[0][lvl]
        for row, ent in enumerate(ents):
            entity_grads.add(int(ent), rows[row])
    relation_grads = SparseGrad()
    for row, rid in enumerate(plan.rel_ids):
        relation_grads.add(int(rid), rel_grad_mat[row])

    return GradientPacket(entity_grads=entity_grads, relation_grads=relation_grads,
                          model_grads=model_grads, user_grad=user_grad,
                          weight=m, loss=loss)
