"""Experiment configuration: defaults, file loading, validation and hashing."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .federation import ALPHA_GRID, BETA_GRID, METHODS

PARTITIONS = ("clustered", "dirichlet")
DISTANCES = ("cosine", "l2")
PROBE_KINDS = ("linear", "mlp")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_clients: int = 5
    num_layers: int = 6
    k: int = 2
    hidden_dim: int = 16
    lora_rank: int = 4
    alpha: float = 0.9
    beta: float = 5.0
    local_rounds: int = 2
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 32
    tau: float = 0.1
    mu: float = 0.01
    method: str = "fellrec"
    partition: str = "dirichlet"
    dirichlet_c: float = 0.3
    distance: str = "cosine"
    ks: tuple[int, ...] = (10, 20)
    # synthetic source; ignored when tsv_path is set
    num_users: int = 150
    num_items: int = 100
    num_clusters: int = 5
    events_per_user: int = 20
    temperature: float = 1.0
    tsv_path: str | None = None
    # cost model units
    b: float = 1.0
    c: float = 1.0
    # probe attack
    probe_kinds: tuple[str, ...] = PROBE_KINDS
    probe_hidden_dim: int = 64
    probe_steps: int = 300
    probe_lr: float = 0.01
    probe_client: int = 0
    strict_grid: bool = False
    workers: int = 1
    out: str = "runs/default"

    def __post_init__(self) -> None:
        validate(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ks"] = list(self.ks)
        d["probe_kinds"] = list(self.probe_kinds)
        return d

    def content_dict(self) -> dict:
        """Everything except the output location, which does not change results."""
        d = self.to_dict()
        d.pop("out")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kw) -> ExperimentConfig:
        return from_dict({**self.to_dict(), **kw})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_INT = {n for n, f in _FIELDS.items() if f.type == "int"}
_FLOAT = {n for n, f in _FIELDS.items() if f.type == "float"}


def _bad(msg: str) -> None:
    raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    for name in _INT:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, int):
            _bad(f"{name} must be an integer, got {v!r}")
    for name in _FLOAT:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            _bad(f"{name} must be a finite number, got {v!r}")
    positive = (
        "num_clients", "hidden_dim", "lora_rank", "local_rounds", "batch_size",
        "num_users", "num_items", "num_clusters", "events_per_user",
        "probe_hidden_dim", "probe_steps", "workers",
    )
    for name in positive:
        if getattr(cfg, name) < 1:
            _bad(f"{name} must be >= 1")
    for name in ("alpha", "beta", "lr", "tau", "dirichlet_c", "temperature", "b", "c", "probe_lr"):
        if not getattr(cfg, name) > 0:
            _bad(f"{name} must be > 0")
    if cfg.mu < 0:
        _bad("mu must be >= 0")
    if cfg.epochs < 0:
        _bad("epochs must be >= 0")
    if cfg.num_layers < 3:
        _bad("num_layers must be >= 3")
    if not (1 <= cfg.k and cfg.k + 1 < cfg.num_layers):
        _bad(f"k must satisfy 1 <= k and k + 1 < num_layers; got k={cfg.k}, num_layers={cfg.num_layers}")
    if cfg.lora_rank >= cfg.hidden_dim:
        _bad("lora_rank must be < hidden_dim")
    if cfg.method not in METHODS:
        _bad(f"method must be one of {METHODS}")
    if cfg.partition not in PARTITIONS:
        _bad(f"partition must be one of {PARTITIONS}")
    if cfg.distance not in DISTANCES:
        _bad(f"distance must be one of {DISTANCES}")
    if not cfg.ks or any(isinstance(k, bool) or not isinstance(k, int) or k < 1 for k in cfg.ks):
        _bad("ks must be a non-empty list of positive integers")
    if cfg.tsv_path is None and max(cfg.ks) > cfg.num_items:
        _bad("largest K exceeds the catalog size")
    if cfg.tsv_path is None and cfg.num_clients > cfg.num_users:
        _bad("more clients than users")
    if not cfg.probe_kinds or any(k not in PROBE_KINDS for k in cfg.probe_kinds):
        _bad(f"probe_kinds must be a non-empty subset of {PROBE_KINDS}")
    if not 0 <= cfg.probe_client < cfg.num_clients:
        _bad("probe_client must name an existing client")
    if cfg.strict_grid:
        if cfg.alpha not in ALPHA_GRID:
            _bad(f"alpha {cfg.alpha} is off the search grid {ALPHA_GRID}")
        if cfg.beta not in BETA_GRID:
            _bad(f"beta {cfg.beta} is off the search grid {BETA_GRID}")


def _coerce(name: str, value: Any) -> Any:
    if name in ("ks", "probe_kinds"):
        if isinstance(value, (str, int)):
            value = [value]
        if not isinstance(value, (list, tuple)):
            _bad(f"{name} must be a list")
        return tuple(value)
    if name in _FLOAT and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        _bad("config must be a mapping")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        _bad(f"unknown config keys: {', '.join(unknown)}")
    kw = {k: _coerce(k, v) for k, v in raw.items()}
    try:
        return replace(ExperimentConfig(), **kw) if kw else ExperimentConfig()
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_file(path: str | Path) -> dict:
    """Read a YAML (or JSON, which YAML accepts) key-value document."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config file {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        _bad(f"config file {path} must hold a mapping")
    return data


def resolve(file_path: str | Path | None, overrides: dict) -> ExperimentConfig:
    """Defaults, then the file, then explicit overrides (None means unset)."""
    merged = load_file(file_path) if file_path else {}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(merged)


def field_names() -> list[str]:
    return list(_FIELDS)

