"""Full-catalog ranking, Recall@K / NDCG@K and the client imbalance degree."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Example
from .errors import ContractViolation, NumericError
from .model import LayeredModel, model_forward

log = logging.getLogger(__name__)

DISTANCES = ("cosine", "l2")


@dataclass(frozen=True)
class RankingList:
    user_id: int
    items: tuple[int, ...]
    scores: tuple[float, ...]

    @property
    def k(self) -> int:
        return len(self.items)


def distances(user_embedding: np.ndarray, item_embeddings: np.ndarray, distance: str = "cosine") -> np.ndarray:
    u = np.asarray(user_embedding, dtype=np.float64).reshape(-1)
    items = np.asarray(item_embeddings, dtype=np.float64)
    if distance == "cosine":
        un = math.sqrt(float(u @ u))
        inorm = np.sqrt((items * items).sum(axis=1))
        if un == 0.0 or np.any(inorm == 0.0):
            raise NumericError("cosine distance with a zero-norm embedding")
        return 1.0 - (items @ u) / (inorm * un)
    if distance == "l2":
        diff = items - u
        return np.sqrt((diff * diff).sum(axis=1))
    raise ContractViolation(f"distance must be one of {DISTANCES}")


def rank_items(
    user_embedding: np.ndarray,
    item_embeddings: np.ndarray,
    k: int,
    distance: str = "cosine",
    user_id: int = -1,
) -> RankingList:
    """The ``k`` items closest to the user, ascending, ties to the smaller id.

    Any size-``k`` subset minimising the summed distance consists of the ``k``
    individually closest items, so sorting is enough.
    """
    n = len(item_embeddings)
    if not 1 <= k <= n:
        raise ContractViolation(f"K={k} must lie in 1..{n}")
    dist = distances(user_embedding, item_embeddings, distance)
    order = np.lexsort((np.arange(n), dist))[:k]
    return RankingList(user_id, tuple(int(i) for i in order), tuple(float(dist[i]) for i in order))


def target_rank(ranking: RankingList, target: int) -> int | None:
    """1-based position of ``target`` in the list, or None."""
    try:
        return ranking.items.index(int(target)) + 1
    except ValueError:
        return None


def recall_at_k(ranking: RankingList, target: int) -> float:
    return 0.0 if target_rank(ranking, target) is None else 1.0


def ndcg_at_k(ranking: RankingList, target: int) -> float:
    r = target_rank(ranking, target)
    return 0.0 if r is None else 1.0 / math.log2(r + 1)


def imbalance_degree(per_client_metric: Sequence[float]) -> float:
    """(best - worst) / worst; +inf when the worst client scores zero."""
    values = [float(v) for v in per_client_metric]
    if not values:
        raise ContractViolation("need at least one client")
    worst, best = min(values), max(values)
    if worst < 0:
        raise ContractViolation("metrics must be non-negative")
    if worst == 0.0:
        log.warning("worst client metric is 0; imbalance degree is infinite")
        return math.inf
    return (best - worst) / worst


def metric_names(ks: Sequence[int]) -> list[str]:
    return [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]


def user_embeddings(model: LayeredModel, examples: Sequence[Example]) -> np.ndarray:
    """Output embeddings for each example's history, batched by length."""
    max_len = model.config.max_len
    out = np.empty((len(examples), model.hidden_dim))
    buckets: dict[int, list[int]] = {}
    for n, ex in enumerate(examples):
        buckets.setdefault(min(len(ex.history.item_ids), max_len), []).append(n)
    for idx in buckets.values():
        ids = np.array([examples[n].history.item_ids[-max_len:] for n in idx], dtype=np.int64)
        emb, _ = model_forward(ids, model)
        out[idx] = emb
    return out


def evaluate_examples(
    model: LayeredModel,
    examples: Sequence[Example],
    ks: Sequence[int] = (10, 20),
    distance: str = "cosine",
) -> dict[str, float]:
    """Mean per-example Recall@K and NDCG@K under full-catalog ranking."""
    names = metric_names(ks)
    if not examples:
        return {name: 0.0 for name in names}
    table = model.item_table()
    kmax = max(ks)
    sums = dict.fromkeys(names, 0.0)
    for ex, emb in zip(examples, user_embeddings(model, examples)):
        ranking = rank_items(emb, table, kmax, distance, ex.history.user_id)
        r = target_rank(ranking, ex.target)
        for k in ks:
            if r is not None and r <= k:
                sums[f"recall@{k}"] += 1.0
                sums[f"ndcg@{k}"] += 1.0 / math.log2(r + 1)
    return {name: sums[name] / len(examples) for name in names}


@dataclass
class MetricsReport:
    per_client: dict[int, dict[str, float]]
    macro: dict[str, float]
    imbalance_degree: float
    imbalance_metric: str = "recall@10"

    @classmethod
    def from_clients(cls, per_client: dict[int, dict[str, float]], imbalance_metric: str = "recall@10") -> MetricsReport:
        names = list(next(iter(per_client.values())))
        ids = sorted(per_client)
        macro = {n: sum(per_client[c][n] for c in ids) / len(ids) for n in names}
        imb = imbalance_degree([per_client[c][imbalance_metric] for c in ids])
        return cls({c: per_client[c] for c in ids}, macro, imb, imbalance_metric)

    def to_dict(self) -> dict:
        return {
            "per_client": {str(c): m for c, m in self.per_client.items()},
            "macro": self.macro,
            "imbalance_metric": self.imbalance_metric,
            "imbalance_degree": self.imbalance_degree if math.isfinite(self.imbalance_degree) else "inf",
        }

    def to_csv(self) -> str:
        names = list(self.macro)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["client", *names])
        for c, m in self.per_client.items():
            writer.writerow([c, *(repr(m[n]) for n in names)])
        writer.writerow(["macro", *(repr(self.macro[n]) for n in names)])
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "metrics") -> None:
        out_dir = Path(out_dir)
        (out_dir / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def evaluate_clients(
    models: dict[int, LayeredModel],
    examples: dict[int, Sequence[Example]],
    ks: Sequence[int] = (10, 20),
    distance: str = "cosine",
) -> MetricsReport:
    per_client = {c: evaluate_examples(models[c], examples[c], ks, distance) for c in sorted(models)}
    return MetricsReport.from_clients(per_client, f"recall@{min(ks)}" if 10 not in ks else "recall@10")
