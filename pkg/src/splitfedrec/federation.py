"""Federated training: local SGD, similarity-weighted aggregation and baselines."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Example
from .errors import ContractViolation, NumericError
from .model import LayeredModel, ModelConfig, batch_loss, model_backward, model_forward
from .split import (
    CLIENT_TO_SERVER,
    SERVER_TO_CLIENT,
    MessageChannel,
    SplitPlan,
    split_backward,
    split_forward,
)

log = logging.getLogger(__name__)

METHODS = ("fellrec", "fedavg", "fedprox", "local", "central")
WARMUP_FLOOR = 1e-6
ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3)
BETA_GRID = (1, 3, 5, 10, 15, 20)


@dataclass(frozen=True)
class WarmupConfig:
    alpha: float = 0.9
    beta: float = 5.0

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ContractViolation("alpha and beta must be positive")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "fellrec"
    epochs: int = 30
    local_rounds: int = 2
    lr: float = 0.01
    batch_size: int = 32
    tau: float = 0.1
    mu: float = 0.01
    warmup: WarmupConfig = WarmupConfig()
    loss_reduction: str = "mean"
    seed: int = 0
    workers: int = 1
    embedding_units: float = 1.0
    layer_units: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ContractViolation(f"method must be one of {METHODS}")
        if self.epochs < 0 or self.local_rounds < 1 or self.batch_size < 1:
            raise ContractViolation("epochs >= 0, local_rounds >= 1, batch_size >= 1 required")
        if self.lr < 0 or self.mu < 0 or self.tau <= 0:
            raise ContractViolation("lr >= 0, mu >= 0, tau > 0 required")
        if self.loss_reduction not in ("mean", "sum"):
            raise ContractViolation("loss_reduction must be 'mean' or 'sum'")


@dataclass
class ClientState:
    client_id: int
    dataset: list[Example]
    model: LayeredModel
    accum_loss: float = 0.0
    epoch: int = 0
    local_rounds: int = 0
    channel: MessageChannel = field(default_factory=MessageChannel)
    seed: int | None = None  # batch-shuffling stream; defaults to client_id

    @property
    def size(self) -> int:
        return len(self.dataset)

    def adapter_vector(self) -> np.ndarray:
        return self.model.adapter_vector()


def client_adapter_seed(seed: int, client_id: int) -> int:
    return seed * 1_000_003 + client_id + 1


def make_clients(
    datasets: Sequence[list[Example]],
    model_config: ModelConfig,
    shared_init: bool = False,
    embedding_units: float = 1.0,
    layer_units: float = 1.0,
) -> list[ClientState]:
    """One client per dataset; frozen weights shared, adapters seeded per client."""
    base = LayeredModel.initialize(model_config)
    clients = []
    for cid, ds in enumerate(datasets):
        model = base.copy()
        if not shared_init:
            model.reset_adapters(client_adapter_seed(model_config.seed, cid))
        clients.append(
            ClientState(cid, list(ds), model, channel=MessageChannel(embedding_units, layer_units))
        )
    return clients


# -- local training ---------------------------------------------------------


def make_batches(
    dataset: Sequence[Example], batch_size: int, max_len: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Index batches with equal (truncated) history length, shuffled."""
    buckets: dict[int, list[int]] = {}
    for n, ex in enumerate(dataset):
        buckets.setdefault(min(len(ex.history.item_ids), max_len), []).append(n)
    batches = []
    for length in sorted(buckets):
        idx = np.array(buckets[length])
        rng.shuffle(idx)
        batches.extend(idx[s : s + batch_size] for s in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[o] for o in order]


def batch_arrays(dataset: Sequence[Example], idx: np.ndarray, max_len: int):
    ids = np.array([dataset[n].history.item_ids[-max_len:] for n in idx], dtype=np.int64)
    targets = np.array([dataset[n].target for n in idx], dtype=np.int64)
    return ids, targets


def _flatten_grads(model: LayeredModel, grads) -> np.ndarray:
    return np.concatenate(
        [getattr(grads[i][name], part).ravel() for i, name, part, _ in model.adapter_layout()]
    )


def fedprox_local_step(
    local: np.ndarray,
    grad: np.ndarray,
    global_params: np.ndarray | None,
    mu: float,
    lr: float,
) -> np.ndarray:
    """SGD step on ``loss + mu/2 * ||local - global||^2``."""
    if mu < 0:
        raise ContractViolation("mu must be >= 0")
    if global_params is not None and mu > 0:
        grad = grad + mu * (local - global_params)
    return local - lr * grad


def loss_and_grads(
    model: LayeredModel,
    ids: np.ndarray,
    targets: np.ndarray,
    item_table: np.ndarray,
    tau: float,
    plan: SplitPlan | None = None,
    channel: MessageChannel | None = None,
):
    """Per-example losses and adapter gradients of their batch mean."""
    if plan is None:
        emb, tape = model_forward(ids, model)
    else:
        emb, tape, _ = split_forward(ids, model, plan, channel)
    losses, g = batch_loss(emb, targets, item_table, tau)
    g = g / len(targets)
    if plan is None:
        grads = model_backward(g, model, tape)
    else:
        grads, _ = split_backward(g, model, plan, tape, channel)
    return losses, grads


def local_train(
    client: ClientState,
    plan: SplitPlan | None,
    cfg: TrainConfig,
    rounds: int | None = None,
    global_params: np.ndarray | None = None,
) -> ClientState:
    """Run ``rounds`` passes of minibatch SGD over the client's data.

    The item-embedding table used by the loss is refreshed at the start of
    each round and held fixed within it.  Each round adds its loss (mean or
    sum over examples, per ``cfg.loss_reduction``) to ``accum_loss``.
    """
    rounds = cfg.local_rounds if rounds is None else rounds
    if rounds < 1:
        raise ContractViolation("rounds must be >= 1")
    if not client.dataset:
        log.warning("client %s has no training data; skipping", client.client_id)
        return client
    model = client.model
    mu = cfg.mu if cfg.method == "fedprox" else 0.0
    max_len = model.config.max_len
    for _ in range(rounds):
        stream = client.client_id if client.seed is None else client.seed
        rng = np.random.default_rng([cfg.seed, stream, client.epoch, client.local_rounds])
        table = model.item_table()
        per_example = np.zeros(len(client.dataset))
        for idx in make_batches(client.dataset, cfg.batch_size, max_len, rng):
            ids, targets = batch_arrays(client.dataset, idx, max_len)
            losses, grads = loss_and_grads(model, ids, targets, table, cfg.tau, plan, client.channel)
            per_example[idx] = losses
            vec = model.adapter_vector()
            vec = fedprox_local_step(vec, _flatten_grads(model, grads), global_params, mu, cfg.lr)
            model.load_adapter_vector(vec)
        round_loss = float(per_example.sum())
        if cfg.loss_reduction == "mean":
            round_loss /= len(client.dataset)
        client.accum_loss += round_loss
        client.local_rounds += 1
    return client


# -- aggregation --------------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractViolation("vectors must have equal length")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity of a zero vector")
    return float(min(1.0, max(-1.0, float(a @ b) / (na * nb))))


def warmup_coefficient(losses: Sequence[float], client: int, t: float, cfg: WarmupConfig) -> float:
    """``tanh(alpha / softmax(losses)[client] ** (t / beta))``, evaluated in log space."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 2:
        raise ContractViolation("warm-up needs at least two clients")
    if t < 0:
        raise ContractViolation("t must be >= 0")
    m = losses.max()
    log_softmax = losses[client] - m - math.log(float(np.exp(losses - m).sum()))
    exponent = -(t / cfg.beta) * log_softmax
    # tanh(x) == 1.0 in float64 well before x = 40
    if math.log(cfg.alpha) + exponent > math.log(40.0):
        return 1.0
    return math.tanh(cfg.alpha * math.exp(exponent))


@dataclass
class AggregationWeights:
    s: np.ndarray  # raw cosine similarities
    w: np.ndarray  # warm-up coefficients (floored)
    d: np.ndarray  # final weights, unit diagonal

    def to_dict(self) -> dict:
        return {"s": self.s.tolist(), "w": self.w.tolist(), "d": self.d.tolist()}


def similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    n = len(vectors)
    s = np.eye(n)
    for a in range(n):
        for b in range(a + 1, n):
            s[a, b] = s[b, a] = cosine_similarity(vectors[a], vectors[b])
    return s


def aggregation_weights(
    vectors: np.ndarray, losses: Sequence[float], t: float, cfg: WarmupConfig
) -> AggregationWeights:
    """``d[c, c'] = w_c * max(s[c, c'], 0)`` off the diagonal, ``d[c, c] = 1``."""
    vectors = np.asarray(vectors, dtype=np.float64)
    s = similarity_matrix(vectors)
    w = np.array(
        [max(warmup_coefficient(losses, c, t, cfg), WARMUP_FLOOR) for c in range(len(vectors))]
    )
    d = w[:, None] * np.maximum(s, 0.0)
    np.fill_diagonal(d, 1.0)
    return AggregationWeights(s, w, d)


def fellrec_aggregate(vectors: np.ndarray, weights: AggregationWeights | np.ndarray) -> np.ndarray:
    """Row-normalised weighted average of client vectors, one output per client.

    Written as ``v_c + sum_c' p[c, c'] (v_c' - v_c)`` so that consensus and
    zero cross-weights are exact fixed points.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    d = weights.d if isinstance(weights, AggregationWeights) else np.asarray(weights, dtype=np.float64)
    if d.shape != (len(vectors), len(vectors)):
        raise ContractViolation("weight matrix must be |C| x |C|")
    rows = d.sum(axis=1)
    if np.any(rows <= 0):
        raise ContractViolation("every weight row must have a positive sum")
    p = d / rows[:, None]
    out = np.empty_like(vectors)
    for c in range(len(vectors)):
        diff = vectors - vectors[c]
        out[c] = vectors[c] + p[c] @ diff
    return out


def fedavg_aggregate(vectors: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Dataset-size weighted mean, clipped to the per-coordinate client envelope."""
    vectors = np.asarray(vectors, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape != (len(vectors),) or np.any(sizes <= 0):
        raise ContractViolation("one positive size per client required")
    p = sizes / sizes.sum()
    out = vectors[0] + p @ (vectors - vectors[0])
    return np.clip(out, vectors.min(axis=0), vectors.max(axis=0))


# -- training loop ----------------------------------------------------------


@dataclass
class TrainingResult:
    clients: list[ClientState]
    history: list[dict]


def _local_phase(clients, plan, cfg, anchors):
    def job(pair):
        client, anchor = pair
        return local_train(client, plan, cfg, global_params=anchor)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(job, zip(clients, anchors)))
    else:
        for pair in zip(clients, anchors):
            job(pair)


def run_training(
    clients: list[ClientState],
    plan: SplitPlan | None,
    cfg: TrainConfig,
    evaluate: Callable[[list[ClientState]], dict] | None = None,
) -> TrainingResult:
    """Epoch loop: reset losses, local rounds, upload, aggregate, send back.

    ``central`` trains a single pooled client and hands each original client
    a copy of the result.  ``evaluate``, when given, is called after every
    epoch and its return value stored in the history.
    """
    if not clients:
        raise ContractViolation("no clients")
    if cfg.method == "central":
        pooled = ClientState(
            0,
            [ex for c in clients for ex in c.dataset],
            clients[0].model,
            channel=clients[0].channel,
        )
        workers = [pooled]
    else:
        workers = clients

    history: list[dict] = []
    for t in range(1, cfg.epochs + 1):
        anchors = []
        for c in workers:
            c.accum_loss = 0.0
            c.epoch = t
            c.channel.round = t
            anchors.append(c.adapter_vector() if cfg.method == "fedprox" else None)
        _local_phase(workers, plan, cfg, anchors)
        entry: dict = {"epoch": t, "losses": [c.accum_loss for c in workers], "w": None, "d": None}

        if cfg.method in ("fellrec", "fedavg", "fedprox"):
            uploaded = plan.client_layers if plan is not None else tuple(range(1, workers[0].model.num_layers + 1))
            for c in workers:
                c.channel.send_layers(CLIENT_TO_SERVER, uploaded)
            vectors = np.stack([c.adapter_vector() for c in workers])
            if cfg.method == "fellrec":
                weights = aggregation_weights(vectors, entry["losses"], t, cfg.warmup)
                new = fellrec_aggregate(vectors, weights)
                entry["w"] = weights.w.tolist()
                entry["d"] = weights.d.tolist()
                entry["s"] = weights.s.tolist()
            else:
                sizes = [max(c.size, 1) for c in workers]
                new = np.broadcast_to(fedavg_aggregate(vectors, sizes), vectors.shape)
            for c, vec in zip(workers, new):
                c.model.load_adapter_vector(vec)
                c.channel.send_layers(SERVER_TO_CLIENT, uploaded)

        if evaluate is not None:
            entry["eval"] = evaluate(_expand(clients, workers, cfg))
        history.append(entry)

    return TrainingResult(_expand(clients, workers, cfg), history)


def _expand(clients, workers, cfg):
    if cfg.method != "central":
        return clients
    for c in clients[1:]:
        c.model = workers[0].model.copy()
    clients[0].model = workers[0].model
    return clients
