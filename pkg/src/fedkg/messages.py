"""Server-bound wire messages.

RequestMessage and GradientUpload are the only payloads a client ever
sends; both are versioned with fixed field order and carry no user
embedding, no labels, and no raw interaction set. JSON float encoding
round-trips exactly, so replaying serialized messages is bitwise
equivalent to the in-process path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .kg import Subgraph
from .model import GradientPacket, ModelParams, SparseGrad

WIRE_VERSION = 1

_REQUEST_KEYS = ("version", "type", "client_id", "items")
_UPLOAD_KEYS = ("version", "type", "client_id", "weight", "loss",
                "entities", "relations", "model")
_SPARSE_KEYS = ("ids", "vectors", "counts")


class WireFormatError(ValueError):
    """Malformed or schema-violating message payload."""


@dataclass
class RequestMessage:
    client_id: int
    items: list[int]
    version: int = WIRE_VERSION

    def to_json_bytes(self) -> bytes:
        payload = {"version": self.version, "type": "request",
                   "client_id": self.client_id, "items": list(self.items)}
        return json.dumps(payload, separators=(",", ":")).encode()

    @classmethod
    def from_json_bytes(cls, raw: bytes) -> "RequestMessage":
        payload = json.loads(raw.decode())
        _check_keys(payload, _REQUEST_KEYS, "request")
        return cls(client_id=int(payload["client_id"]),
                   items=[int(i) for i in payload["items"]],
                   version=int(payload["version"]))


@dataclass
class GradientUpload:
    client_id: int
    weight: int
    loss: float
    entities: dict  # {"ids": [...], "vectors": [[...]], "counts": [...]}
    relations: dict
    model: list[dict]  # [{"w": [[...]], "b": [...]}]
    version: int = WIRE_VERSION

    @classmethod
    def from_packet(cls, packet: GradientPacket) -> "GradientUpload":
        if packet.user_grad is not None:
            raise WireFormatError("refusing to build an upload from an unstripped packet")
        return cls(client_id=packet.client_id, weight=packet.weight,
                   loss=float(packet.loss),
                   entities=_sparse_to_wire(packet.entity_grads),
                   relations=_sparse_to_wire(packet.relation_grads),
                   model=[{"w": dw.tolist(), "b": db.tolist()}
                          for dw, db in packet.model_grads])

    def to_packet(self) -> GradientPacket:
        return GradientPacket(entity_grads=_sparse_from_wire(self.entities),
                              relation_grads=_sparse_from_wire(self.relations),
                              model_grads=[(np.array(layer["w"], dtype=np.float64),
                                            np.array(layer["b"], dtype=np.float64))
                                           for layer in self.model],
                              user_grad=None, weight=self.weight, loss=self.loss,
                              client_id=self.client_id)

    def to_json_bytes(self) -> bytes:
        payload = {"version": self.version, "type": "gradient_upload",
                   "client_id": self.client_id, "weight": self.weight,
                   "loss": self.loss, "entities": self.entities,
                   "relations": self.relations, "model": self.model}
        return json.dumps(payload, separators=(",", ":")).encode()

    @classmethod
    def from_json_bytes(cls, raw: bytes) -> "GradientUpload":
        payload = json.loads(raw.decode())
        _check_keys(payload, _UPLOAD_KEYS, "gradient_upload")
        for part in ("entities", "relations"):
            _check_keys(payload[part], _SPARSE_KEYS, part)
        return cls(client_id=int(payload["client_id"]), weight=int(payload["weight"]),
                   loss=float(payload["loss"]), entities=payload["entities"],
                   relations=payload["relations"], model=payload["model"],
                   version=int(payload["version"]))


@dataclass
class SubgraphResponse:
    """Server reply: sampled subgraph, touched embedding rows, full model."""

    subgraph: Subgraph
    entity_vectors: dict[int, np.ndarray]
    relation_vectors: dict[int, np.ndarray]
    model: ModelParams
    anchor_items: list[int] = field(default_factory=list)


def _sparse_to_wire(grads: SparseGrad) -> dict:
    ids = grads.ids()
    return {"ids": ids,
            "vectors": [grads.entries[i].tolist() for i in ids],
            "counts": [grads.counts[i] for i in ids]}


def _sparse_from_wire(payload: dict) -> SparseGrad:
    out = SparseGrad()
    for idx, vec, count in zip(payload["ids"], payload["vectors"], payload["counts"]):
        out.entries[int(idx)] = np.array(vec, dtype=np.float64)
        out.counts[int(idx)] = int(count)
    return out


def _check_keys(payload: dict, expected: tuple[str, ...], kind: str) -> None:
    if set(payload) != set(expected):
        extra = set(payload) - set(expected)
        missing = set(expected) - set(payload)
        raise WireFormatError(
            f"{kind} schema mismatch: extra={sorted(extra)} missing={sorted(missing)}")
