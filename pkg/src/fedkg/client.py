"""Simulated client: request building, graph merging, local training.

The user embedding lives here and is only ever updated by the client
itself; the server sees request item ids and LDP-protected gradients,
nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .messages import RequestMessage, SubgraphResponse
from .model import GradientPacket, LocalGraph, ModelParams, backward
from .privacy import DpConfig, RequestPlan, generate_request_items


class ProtocolError(RuntimeError):
    """Server response does not cover the client's request."""


@dataclass
class ClientState:
    user_id: int
    user_embedding: np.ndarray
    interactions: set[int]  # training-split positives only


def build_request(state: ClientState, negatives_pool: list[int], dp: DpConfig,
                  rng: np.random.Generator) -> tuple[RequestPlan, RequestMessage]:
    """Obfuscate the interaction set into a request; labels stay local."""
    plan = generate_request_items(state.interactions, negatives_pool, dp, rng)
    msg = RequestMessage(client_id=state.user_id, items=list(plan.request_items))
    return plan, msg


def merge_graphs(plan: RequestPlan, response: SubgraphResponse,
                 user_embedding: np.ndarray) -> LocalGraph:
    """Join the KG subgraph with the local labels into one training graph."""
    missing = [a for a in plan.request_items if a not in response.entity_vectors]
    if missing:
        raise ProtocolError(f"response missing anchors {missing[:5]}")
    return LocalGraph(user=user_embedding,
                      anchors=list(zip(plan.request_items, plan.local_labels)),
                      subgraph=response.subgraph,
                      entity_vectors=response.entity_vectors,
                      relation_vectors=response.relation_vectors)


def local_train(state: ClientState, graph: LocalGraph, model: ModelParams,
                eta: float, epochs: int = 1) -> GradientPacket:
    """Run forward/backward `epochs` times, stepping local copies in between.

    The uploaded gradient is the sum over epochs; the client's own user
    embedding takes a step of size eta after every epoch. Gathered
    embedding copies and a model copy are stepped locally so later epochs
    see updated values, the global state is untouched.
    """
    total: GradientPacket | None = None
    for epoch in range(epochs):
        packet = backward(graph, model)
        state.user_embedding -= eta * packet.user_grad
        if total is None:
            total = packet
        else:
            for idx in packet.entity_grads.ids():
                total.entity_grads.add(idx, packet.entity_grads.entries[idx])
            for idx in packet.relation_grads.ids():
                total.relation_grads.add(idx, packet.relation_grads.entries[idx])
            for (tw, tb), (dw, db) in zip(total.model_grads, packet.model_grads):
                tw += dw
                tb += db
            total.user_grad = total.user_grad + packet.user_grad
            total.loss = packet.loss  # most recent epoch's loss
        if epoch + 1 < epochs:
            for idx in packet.entity_grads.ids():
                graph.entity_vectors[idx] = (graph.entity_vectors[idx]
                                             - eta * packet.entity_grads.entries[idx])
            for idx in packet.relation_grads.ids():
                graph.relation_vectors[idx] = (graph.relation_vectors[idx]
                                               - eta * packet.relation_grads.entries[idx])
            if model.mode == "transform":
                model = model.copy()
                for layer, (dw, db) in enumerate(packet.model_grads):
                    model.weights[layer] -= eta * dw
                    model.biases[layer] -= eta * db
    assert total is not None
    total.client_id = state.user_id
    total.weight = len(graph.anchor_items)
    return total
