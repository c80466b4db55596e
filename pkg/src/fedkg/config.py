"""Experiment configuration: flat key=value files with CLI overrides.

Every hyperparameter of the round loop appears here; the config template
in the README annotates each key with its conventional symbol.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    # dataset source: synthetic generator or ratings+kg files
    synthetic: bool = True
    ratings_file: str | None = None
    kg_file: str | None = None
    rating_threshold: float = 0.0
    users: int = 500
    items: int = 200
    attributes: int = 20
    relations: int = 2
    interactions_per_user: int = 16
    noise: float = 0.1
    prefs_per_user: int = 2

    # round / model hyperparameters
    sample_size: int = 4  # K
    embed_dim: int = 16  # d
    depth: int = 1  # H
    eta: float = 2.0  # learning rate; mean-BCE gradients scale with 1/|request|
    clients_per_round: int = 32
    pseudo_items: int | None = None  # p; None = one per interaction
    flip_rate: float = 0.1  # q
    clip_threshold: float = 0.5  # delta
    noise_scale: float = 1e-4  # lambda
    epochs: int = 1
    mode: str = "transform"  # aggregation phi: replace | transform

    # training schedule
    max_rounds: int = 300
    eval_every: int = 10
    patience: int = 10
    recall_ks: tuple[int, ...] = (5, 10, 20, 50)

    # run plumbing
    seed: int = 7
    out_dir: str = "runs/exp"
    workers: int = 1
    transport: str = "memory"  # memory | json
    checkpoint_every: int = 0  # 0: only at the end

    def validate(self) -> None:
        checks = [
            (self.embed_dim >= 1, "embed_dim (d) must be >= 1"),
            (self.depth >= 0, "depth (H) must be >= 0"),
            (0.0 <= self.flip_rate < 0.5, "flip_rate (q) must be in [0, 0.5)"),
            (self.eta > 0, "eta must be > 0"),
            (self.sample_size >= 1, "sample_size (K) must be >= 1"),
            (self.clients_per_round >= 1, "clients_per_round must be >= 1"),
            (self.clip_threshold > 0, "clip_threshold (delta) must be > 0"),
            (self.noise_scale >= 0, "noise_scale (lambda) must be >= 0"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.max_rounds >= 0, "max_rounds must be >= 0"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.mode in ("replace", "transform"), "mode must be replace or transform"),
            (self.transport in ("memory", "json"), "transport must be memory or json"),
            (self.pseudo_items is None or self.pseudo_items >= 0,
             "pseudo_items must be >= 0 (or unset for parity)"),
        ]
        if not self.synthetic:
            checks.append((bool(self.ratings_file) and bool(self.kg_file),
                           "file datasets need both ratings_file and kg_file"))
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "recall_ks" in data and data["recall_ks"] is not None:
            data = {**data, "recall_ks": tuple(data["recall_ks"])}
        return cls(**data)


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("ratings_file", "kg_file", "out_dir", "mode", "transport"):
        return raw
    if key == "synthetic":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if key == "pseudo_items":
        return None if raw.lower() in ("parity", "none") else int(raw)
    if key == "recall_ks":
        return tuple(int(p) for p in raw.replace(",", " ").split())
    if key in ("rating_threshold", "noise", "eta", "flip_rate",
               "clip_threshold", "noise_scale"):
        return float(raw)
    if key in _FIELD_TYPES:
        return int(raw)
    raise ConfigError(f"unknown config key {key!r}")


def parse_config_file(path: str) -> dict:
    """Read `key = value` lines (# comments allowed) into an override dict."""
    overrides: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            overrides[key] = _parse_value(key, raw)
    return overrides


def config_echo(config: ExperimentConfig) -> str:
    """Render the config back out in the flat file format."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if value is None:
            value = "parity" if f.name == "pseudo_items" else ""
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
