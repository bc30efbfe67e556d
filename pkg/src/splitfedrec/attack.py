"""White-box probe attacks: reconstruct input embeddings from layer outputs.

The reconstruction target is the mean-pooled embedding lookup (before any
block runs). The probe input is the mean-pooled output of a given layer. For
the last layer this is the already pooled output embedding.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .model import ActivationTape, HistorySequence, LayeredModel, layer_forward

log = logging.getLogger(__name__)

PROBE_KINDS = ("linear", "mlp")


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "linear"
    hidden_dim: int = 64
    train_steps: int = 500
    lr: float = 0.01
    seed: int = 0
    batch_size: int = 64
    holdout: float = 0.2

    def __post_init__(self) -> None:
        if self.kind not in PROBE_KINDS:
            raise ContractViolation(f"probe kind must be one of {PROBE_KINDS}")
        if self.hidden_dim < 1 or self.train_steps < 1 or self.batch_size < 1:
            raise ContractViolation("probe counts must be positive")
        if not self.lr > 0:
            raise ContractViolation("probe lr must be positive")
        if not 0 < self.holdout < 1:
            raise ContractViolation("holdout fraction must lie in (0, 1)")


@dataclass
class ProbeReport:
    similarities: list[float]
    kind: str

    def __post_init__(self) -> None:
        for s in self.similarities:
            if not -1.0 - 1e-12 <= s <= 1.0 + 1e-12:
                raise ContractViolation(f"similarity {s} outside [-1, 1]")

    def similarity(self, layer_index: int) -> float:
        return self.similarities[layer_index - 1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "similarities": list(self.similarities)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "similarity", "kind"])
        for i, s in enumerate(self.similarities, start=1):
            writer.writerow([i, repr(s), self.kind])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


class Probe:
    """A fitted regressor from intermediate embeddings to input embeddings."""

    def __init__(self, kind: str, mean: np.ndarray, std: np.ndarray, params: dict) -> None:
        self.kind = kind
        self.mean = mean
        self.std = std
        self.params = params

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.std
        p = self.params
        if self.kind == "linear":
            return z @ p["w"] + p["b"]
        h = np.maximum(z @ p["w1"] + p["b1"], 0.0)
        return h @ p["w2"] + p["b2"]


def _sequences(dataset) -> list[np.ndarray]:
    out = []
    for h in dataset:
        if isinstance(h, HistorySequence):
            out.append(np.asarray(h.item_ids, dtype=np.int64))
        elif hasattr(h, "history"):
            out.append(np.asarray(h.history.item_ids, dtype=np.int64))
        else:
            out.append(np.asarray(h, dtype=np.int64))
    return out


def collect_all_intermediates(model: LayeredModel, dataset) -> tuple[np.ndarray, list[np.ndarray]]:
    """Pooled input embeddings and the pooled output of every layer.

    Returns ``(targets, [layer_1, ..., layer_N])``, one row per sequence in
    dataset order.
    """
    seqs = _sequences(dataset)
    n, d = len(seqs), model.hidden_dim
    max_len = model.config.max_len
    targets = np.empty((n, d))
    layers = [np.empty((n, d)) for _ in range(model.num_layers)]
    buckets: dict[int, list[int]] = {}
    for idx, s in enumerate(seqs):
        buckets.setdefault(min(len(s), max_len), []).append(idx)
    for rows in buckets.values():
        ids = np.stack([seqs[r][-max_len:] for r in rows])
        tape = ActivationTape()
        x = ids
        for i in range(1, model.num_layers + 1):
            x = layer_forward(i, x, model, tape)
            layers[i - 1][rows] = x if i == model.num_layers else x.mean(axis=1)
        targets[rows] = tape.get(1)["lookup"].mean(axis=1)
    return targets, layers


def collect_intermediates(model: LayeredModel, dataset, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
    """``(intermediate, input)`` pairs for one layer, one row per sequence."""
    if not 1 <= layer_index <= model.num_layers:
        raise ContractViolation(f"layer_index must lie in 1..{model.num_layers}")
    targets, layers = collect_all_intermediates(model, dataset)
    return layers[layer_index - 1], targets


def _fit_linear(z: np.ndarray, y: np.ndarray) -> dict:
    a = np.hstack([z, np.ones((len(z), 1))])
    sol, *_ = np.linalg.lstsq(a, y, rcond=None)
    return {"w": sol[:-1], "b": sol[-1]}


def _mlp_loss(p: dict, z: np.ndarray, y: np.ndarray) -> float:
    h = np.maximum(z @ p["w1"] + p["b1"], 0.0)
    r = h @ p["w2"] + p["b2"] - y
    return float((r * r).mean())


def _fit_mlp(z: np.ndarray, y: np.ndarray, cfg: ProbeConfig) -> dict:
    # Warm start at the least-squares solution: the first d hidden units carry
    # z shifted to be positive on the training set, so the ReLU is inactive
    # and the network starts out equal to the linear probe.
    n, d = z.shape
    rng = np.random.default_rng(cfg.seed)
    lin = _fit_linear(z, y)
    hdim = cfg.hidden_dim
    w1 = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, hdim))
    b1 = np.zeros(hdim)
    w2 = np.zeros((hdim, y.shape[1]))
    b2 = lin["b"].copy()
    m = min(d, hdim)
    shift = np.maximum(-z.min(axis=0), 0.0)[:m] + 1.0
    w1[:, :m] = 0.0
    w1[np.arange(m), np.arange(m)] = 1.0
    b1[:m] = shift
    w2[:m] = lin["w"][:m]
    b2 = b2 - shift @ lin["w"][:m]
    if m < d:
        log.warning("mlp hidden_dim %d < input dim %d; warm start is partial", hdim, d)
    p = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
    best, best_loss = {k: v.copy() for k, v in p.items()}, _mlp_loss(p, z, y)

    bs = min(cfg.batch_size, n)
    for _ in range(cfg.train_steps):
        idx = rng.choice(n, size=bs, replace=False)
        zb, yb = z[idx], y[idx]
        pre = zb @ p["w1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        r = h @ p["w2"] + p["b2"] - yb
        g = 2.0 * r / r.size
        gw2 = h.T @ g
        gb2 = g.sum(axis=0)
        gh = (g @ p["w2"].T) * (pre > 0)
        p["w1"] -= cfg.lr * (zb.T @ gh)
        p["b1"] -= cfg.lr * gh.sum(axis=0)
        p["w2"] -= cfg.lr * gw2
        p["b2"] -= cfg.lr * gb2
        loss = _mlp_loss(p, z, y)
        if not math.isfinite(loss):
            break
        if loss < best_loss:
            best, best_loss = {k: v.copy() for k, v in p.items()}, loss
    return best


def train_probe(pairs: tuple[np.ndarray, np.ndarray], cfg: ProbeConfig) -> Probe:
    """Fit a probe on ``(intermediate, input)`` pairs."""
    x, y = (np.asarray(a, dtype=np.float64) for a in pairs)
    if len(x) < 2 or len(x) != len(y):
        raise ContractViolation("need at least 2 aligned pairs")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    if np.all(std < 1e-12):
        log.warning("all probe inputs are identical; fitting a constant map")
        d_in, d_out = x.shape[1], y.shape[1]
        params = {"w": np.zeros((d_in, d_out)), "b": y.mean(axis=0)}
        return Probe("linear", mean, np.ones_like(std), params)
    std = np.where(std < 1e-12, 1.0, std)
    z = (x - mean) / std
    params = _fit_linear(z, y) if cfg.kind == "linear" else _fit_mlp(z, y, cfg)
    return Probe(cfg.kind, mean, std, params)


def mean_cosine(pred: np.ndarray, true: np.ndarray) -> float:
    num = (pred * true).sum(axis=1)
    den = np.sqrt((pred * pred).sum(axis=1) * (true * true).sum(axis=1))
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.clip(cos, -1.0, 1.0).mean())


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint (train, eval) index split; eval gets ceil(fraction * n)."""
    if n < 3:
        raise ContractViolation("need at least 3 pairs for a held-out split")
    n_eval = min(n - 2, max(1, math.ceil(fraction * n)))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def probe_similarity(pairs: tuple[np.ndarray, np.ndarray], cfg: ProbeConfig) -> float:
    """Held-out mean cosine between reconstructed and true inputs."""
    x, y = pairs
    tr, ev = holdout_split(len(x), cfg.holdout, cfg.seed)
    probe = train_probe((x[tr], y[tr]), cfg)
    return mean_cosine(probe.predict(x[ev]), y[ev])


def probe_sweep(model: LayeredModel, dataset, cfg: ProbeConfig) -> ProbeReport:
    targets, layers = collect_all_intermediates(model, dataset)
    sims = [probe_similarity((inter, targets), cfg) for inter in layers]
    return ProbeReport(sims, cfg.kind)


def probe_trend_holds(report: ProbeReport, margin: float = 0.05) -> bool:
    """Layer-1 similarity beats the weakest middle layer by ``margin``."""
    middle = report.similarities[1:-1]
    if not middle:
        raise ContractViolation("trend needs at least one middle layer")
    return report.similarities[0] - min(middle) >= margin


def sweep_many(model: LayeredModel, dataset: Sequence, cfgs: Sequence[ProbeConfig]) -> list[ProbeReport]:
    targets, layers = collect_all_intermediates(model, dataset)
    return [ProbeReport([probe_similarity((i, targets), c) for i in layers], c.kind) for c in cfgs]
