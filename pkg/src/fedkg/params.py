"""Global trainable state: entity/relation embedding tables plus model weights."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .model import ModelParams, init_model_params

if TYPE_CHECKING:
    from .server import AggregatedGradient


@dataclass
class ParameterState:
    """Embeddings and model weights updated only by the server between rounds."""

    entity_emb: np.ndarray  # (num_entities, d)
    relation_emb: np.ndarray  # (num_relations, d)
    model: ModelParams
    dim: int

    @property
    def num_entities(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_emb.shape[0]

    def copy(self) -> "ParameterState":
        return ParameterState(self.entity_emb.copy(), self.relation_emb.copy(),
                              self.model.copy(), self.dim)


def init_params(num_entities: int, num_relations: int, dim: int,
                rng: np.random.Generator, depth: int = 1,
                mode: str = "transform") -> ParameterState:
    """Embeddings i.i.d. uniform on [-1/sqrt(d), +1/sqrt(d)]; model per init_model_params."""
    if num_entities < 1 or num_relations < 1 or dim < 1:
        raise ValueError("counts and dim must be >= 1")
    bound = 1.0 / np.sqrt(dim)
    entity = rng.uniform(-bound, bound, size=(num_entities, dim))
    relation = rng.uniform(-bound, bound, size=(num_relations, dim))
    model = init_model_params(dim, depth, mode, rng)
    return ParameterState(entity_emb=entity, relation_emb=relation, model=model, dim=dim)


def gather(state: ParameterState, entities: set[int] | list[int],
           relations: set[int] | list[int]) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Copy the requested embedding rows; mutating the copies never touches state."""
    ent_out: dict[int, np.ndarray] = {}
    for e in sorted(int(x) for x in entities):
        if not 0 <= e < state.num_entities:
            raise KeyError(f"entity id {e} out of range [0, {state.num_entities})")
        ent_out[e] = state.entity_emb[e].copy()
    rel_out: dict[int, np.ndarray] = {}
    for r in sorted(int(x) for x in relations):
        if not 0 <= r < state.num_relations:
            raise KeyError(f"relation id {r} out of range [0, {state.num_relations})")
        rel_out[r] = state.relation_emb[r].copy()
    return ent_out, rel_out


def apply_global_update(state: ParameterState, avg: "AggregatedGradient",
                        eta: float) -> None:
    """Plain gradient descent: p <- p - eta * avg_p on every touched parameter.

    Rejects non-finite averages before touching anything, so a bad round
    leaves the state bitwise unchanged.
    """
    for vec in avg.entity.values():
        if not np.all(np.isfinite(vec)):
            raise ValueError("non-finite entity gradient in aggregated update")
    for vec in avg.relation.values():
        if not np.all(np.isfinite(vec)):
            raise ValueError("non-finite relation gradient in aggregated update")
    for dw, db in avg.model:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise ValueError("non-finite model gradient in aggregated update")

    for e in sorted(avg.entity):
        state.entity_emb[e] -= eta * avg.entity[e]
    for r in sorted(avg.relation):
        state.relation_emb[r] -= eta * avg.relation[r]
    for layer, (dw, db) in enumerate(avg.model):
        state.model.weights[layer] -= eta * dw
        state.model.biases[layer] -= eta * db


def save_checkpoint(path: str, state: ParameterState,
                    user_emb: np.ndarray | None = None,
                    extra: dict | None = None) -> None:
    """np.savez checkpoint; float64 arrays round-trip bitwise."""
    arrays = {
        "entity_emb": state.entity_emb,
        "relation_emb": state.relation_emb,
        "dim": np.array(state.dim),
        "mode": np.array(state.model.mode),
        "depth": np.array(state.model.depth),
    }
    for i, (w, b) in enumerate(zip(state.model.weights, state.model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    if user_emb is not None:
        arrays["user_emb"] = user_emb
    if extra is not None:
        arrays["extra_json"] = np.array(json.dumps(extra))
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> tuple[ParameterState, np.ndarray | None, dict | None]:
    data = np.load(path, allow_pickle=False)
    depth = int(data["depth"])
    model = ModelParams(mode=str(data["mode"]),
                        weights=[data[f"w{i}"] for i in range(depth)],
                        biases=[data[f"b{i}"] for i in range(depth)])
    state = ParameterState(entity_emb=data["entity_emb"],
                           relation_emb=data["relation_emb"],
                           model=model, dim=int(data["dim"]))
    user_emb = data["user_emb"] if "user_emb" in data else None
    extra = json.loads(str(data["extra_json"])) if "extra_json" in data else None
    return state, user_emb, extra
