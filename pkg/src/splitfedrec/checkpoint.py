"""JSON checkpoints of per-client adapters.

Frozen weights are never stored: they are regenerated from the model config
seed.  Floats are written with ``repr`` precision, so a load/save round trip
reproduces the adapters bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractViolation, NotFoundError
from .model import LayeredModel, ModelConfig

FORMAT_VERSION = 1


def checkpoint_path(out_dir: str | Path, client_id: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"client_{client_id}.json"


def model_to_dict(model: LayeredModel, client_id: int) -> dict:
    layers = []
    for i, p in enumerate(model.layers, start=1):
        layers.append(
            {
                "layer": i,
                "adapters": {
                    name: {"down": a.down.tolist(), "up": a.up.tolist(), "scale": a.scale}
                    for name, a in sorted(p.adapters.items())
                },
            }
        )
    return {
        "version": FORMAT_VERSION,
        "client_id": client_id,
        "model_config": model.config.to_dict(),
        "layers": layers,
    }


def model_from_dict(payload: dict) -> LayeredModel:
    if payload.get("version") != FORMAT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = ModelConfig(**payload["model_config"])
    model = LayeredModel.initialize(cfg)
    if len(payload["layers"]) != cfg.num_layers:
        raise ContractViolation("checkpoint layer count does not match its config")
    for entry in payload["layers"]:
        adapters = model.layer(entry["layer"]).adapters
        for name, a in entry["adapters"].items():
            ad = adapters[name]
            down = np.asarray(a["down"], dtype=np.float64)
            up = np.asarray(a["up"], dtype=np.float64)
            if down.shape != ad.down.shape or up.shape != ad.up.shape:
                raise ContractViolation(f"adapter {name} of layer {entry['layer']} has the wrong shape")
            ad.down, ad.up, ad.scale = down, up, float(a["scale"])
    model.invalidate()
    return model


def save_checkpoint(model: LayeredModel, client_id: int, out_dir: str | Path) -> Path:
    path = checkpoint_path(out_dir, client_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model, client_id)) + "\n", encoding="utf-8")
    return path


def load_checkpoint(out_dir: str | Path, client_id: int) -> LayeredModel:
    path = checkpoint_path(out_dir, client_id)
    if not path.exists():
        raise NotFoundError(f"missing checkpoint {path}")
    return model_from_dict(json.loads(path.read_text(encoding="utf-8")))


def load_all(out_dir: str | Path, num_clients: int) -> dict[int, LayeredModel]:
    return {c: load_checkpoint(out_dir, c) for c in range(num_clients)}
