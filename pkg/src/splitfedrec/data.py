"""Interaction logs, chronological splits and client partitioning."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .model import HistorySequence

log = logging.getLogger(__name__)

KMEANS_MAX_ITER = 50


@dataclass
class InteractionLog:
    events: list[tuple[int, int, int]]  # (user_id, item_id, timestamp)
    num_users: int
    num_items: int

    def __post_init__(self) -> None:
        for u, i, _ in self.events:
            if not (0 <= u < self.num_users and 0 <= i < self.num_items):
                raise ContractViolation(f"event ({u}, {i}) outside id ranges")

    def by_user(self) -> dict[int, list[int]]:
        """Item sequences per user in chronological order (stable on ties)."""
        seqs: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
        for pos, (u, i, ts) in enumerate(self.events):
            seqs[u].append((ts, pos, i))
        return {u: [i for _, _, i in sorted(rows)] for u, rows in sorted(seqs.items())}


@dataclass(frozen=True)
class SyntheticData:
    log: InteractionLog
    latents: np.ndarray  # (num_users, latent_dim)
    clusters: np.ndarray  # (num_users,) preference cluster per user
    item_clusters: np.ndarray  # (num_items,) home cluster per item


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_clusters: int,
    events_per_user: int,
    seed: int,
    latent_dim: int = 8,
    separation: float = 3.0,
    temperature: float = 1.0,
    with_replacement: bool = True,
) -> SyntheticData:
    """Users and items drawn around shared cluster centres.

    Each event draws an item from ``softmax(-||user - item||^2 / (2 * temperature))``
    (i.i.d., or without replacement via Gumbel top-k), with strictly
    increasing timestamps.
    """
    if min(num_users, num_items, num_clusters, events_per_user) < 1:
        raise ContractViolation("all counts must be >= 1")
    if not with_replacement and events_per_user > num_items:
        raise ContractViolation("events_per_user cannot exceed num_items without replacement")
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation / math.sqrt(latent_dim), size=(num_clusters, latent_dim))
    clusters = rng.integers(0, num_clusters, size=num_users)
    item_clusters = rng.integers(0, num_clusters, size=num_items)
    noise = 0.5 / math.sqrt(latent_dim)
    latents = centres[clusters] + rng.normal(0.0, noise, size=(num_users, latent_dim))
    item_latents = centres[item_clusters] + rng.normal(0.0, noise, size=(num_items, latent_dim))

    events: list[tuple[int, int, int]] = []
    for u in range(num_users):
        sq = ((item_latents - latents[u]) ** 2).sum(axis=1)
        logits = -sq / (2.0 * temperature)
        if with_replacement:
            p = np.exp(logits - logits.max())
            chosen = rng.choice(num_items, size=events_per_user, p=p / p.sum())
        else:
            keys = logits + rng.gumbel(size=num_items)
            chosen = np.argsort(-keys, kind="stable")[:events_per_user]
        ts = 1_000_000 + np.cumsum(rng.integers(1, 3600, size=events_per_user))
        events.extend((u, int(i), int(t)) for i, t in zip(chosen, ts))
    log_ = InteractionLog(events, num_users, num_items)
    return SyntheticData(log_, latents, clusters, item_clusters)


# -- files ------------------------------------------------------------------


def write_tsv(log_: InteractionLog, path: str | Path) -> None:
    lines = [f"# num_users={log_.num_users}\tnum_items={log_.num_items}", "user_id\titem_id\ttimestamp"]
    lines += [f"{u}\t{i}\t{t}" for u, i, t in log_.events]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv(path: str | Path) -> InteractionLog:
    """Load a ``user_id<TAB>item_id<TAB>timestamp`` file.

    A leading ``# num_users=..\\tnum_items=..`` line pins the id ranges;
    without it raw ids are remapped to dense indices in sorted order.
    """
    counts: dict[str, int] = {}
    rows: list[tuple[str, str, int]] = []
    header_seen = False
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for part in line[1:].split():
                key, _, value = part.partition("=")
                if value:
                    counts[key.strip()] = int(value)
            continue
        cols = line.split("\t")
        if not header_seen:
            if [c.strip() for c in cols] != ["user_id", "item_id", "timestamp"]:
                raise ContractViolation(f"{path}: expected header user_id, item_id, timestamp")
            header_seen = True
            continue
        if len(cols) != 3:
            raise ContractViolation(f"{path}:{lineno}: expected 3 columns")
        rows.append((cols[0].strip(), cols[1].strip(), int(cols[2])))
    if "num_users" in counts and "num_items" in counts:
        events = [(int(u), int(i), t) for u, i, t in rows]
        return InteractionLog(events, counts["num_users"], counts["num_items"])

    def dense(values: set[str]) -> dict[str, int]:
        try:
            ordered = sorted(values, key=int)
        except ValueError:
            ordered = sorted(values)
        return {v: n for n, v in enumerate(ordered)}

    umap = dense({u for u, _, _ in rows})
    imap = dense({i for _, i, _ in rows})
    events = [(umap[u], imap[i], t) for u, i, t in rows]
    return InteractionLog(events, len(umap), len(imap))


@dataclass
class ClientPartition:
    assignment: dict[int, int]  # user_id -> client_id
    num_clients: int

    def __post_init__(self) -> None:
        used = set(self.assignment.values())
        if used - set(range(self.num_clients)):
            raise ContractViolation("client ids outside [0, num_clients)")
        if len(used) != self.num_clients:
            raise ContractViolation("every client must hold at least one user")

    def users_of(self, client_id: int) -> list[int]:
        return sorted(u for u, c in self.assignment.items() if c == client_id)

    def to_json(self, path: str | Path) -> None:
        payload = {str(u): c for u, c in sorted(self.assignment.items())}
        Path(path).write_text(json.dumps(payload, indent=0, sort_keys=False) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> ClientPartition:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        assignment = {int(u): int(c) for u, c in raw.items()}
        return cls(assignment, max(assignment.values()) + 1)


# -- chronological split ----------------------------------------------------


@dataclass(frozen=True)
class Example:
    history: HistorySequence
    target: int


@dataclass
class SplitDataset:
    train: dict[int, list[Example]] = field(default_factory=dict)
    valid: dict[int, list[Example]] = field(default_factory=dict)
    test: dict[int, list[Example]] = field(default_factory=dict)

    def examples(self, split: str, users) -> list[Example]:
        table = getattr(self, split)
        return [ex for u in sorted(users) for ex in table.get(u, [])]

    @property
    def users(self) -> list[int]:
        return sorted(self.train)


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, valid, test) counts: each eval split gets ceil(n / 10), at least 1."""
    n_eval = max(1, math.ceil(0.1 * n))
    return n - 2 * n_eval, n_eval, n_eval


def _examples(user: int, items: list[int], lo: int, hi: int) -> list[Example]:
    return [Example(HistorySequence(user, tuple(items[:j])), items[j]) for j in range(max(lo, 1), hi)]


def chronological_split(log_: InteractionLog, min_events: int = 3) -> SplitDataset:
    """Per-user 8:1:1 chronological split into (prefix history, next item) pairs.

    Evaluation histories include every earlier interaction, so the valid
    target precedes the test target; no target index is shared across splits.
    """
    out = SplitDataset()
    dropped = 0
    for u, items in log_.by_user().items():
        n = len(items)
        if n < min_events:
            dropped += 1
            continue
        n_train, n_valid, _ = split_sizes(n)
        out.train[u] = _examples(u, items, 0, n_train)
        out.valid[u] = _examples(u, items, n_train, n_train + n_valid)
        out.test[u] = _examples(u, items, n_train + n_valid, n)
    if dropped:
        log.warning("excluded %d users with fewer than %d events", dropped, min_events)
    return out


# -- partitioning -----------------------------------------------------------


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centres)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0.0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centres.append(x[idx])
    return np.array(centres, dtype=np.float64)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = KMEANS_MAX_ITER) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns labels.

    An empty cluster takes the point of the largest cluster that lies
    farthest from that cluster's centre.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ContractViolation(f"need 1 <= k <= {n}, got {k}")
    rng = np.random.default_rng(seed)
    centres = _kmeans_pp_init(x, k, rng)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centres[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        for c in range(k):
            if np.any(new == c):
                continue
            sizes = np.bincount(new, minlength=k)
            big = int(np.argmax(sizes))
            members = np.flatnonzero(new == big)
            far = members[np.argmax(((x[members] - centres[big]) ** 2).sum(-1))]
            new[far] = c
        if np.array_equal(new, labels):
            break
        labels = new
        centres = np.array([x[labels == c].mean(axis=0) for c in range(k)])
    return labels


def partition_clustered(latents: np.ndarray, num_clients: int, seed: int) -> ClientPartition:
    latents = np.asarray(latents, dtype=np.float64)
    if num_clients > len(latents):
        raise ContractViolation("more clients than users")
    labels = kmeans(latents, num_clients, seed)
    return ClientPartition({u: int(c) for u, c in enumerate(labels)}, num_clients)


def partition_dirichlet(
    groups: np.ndarray,
    num_clients: int,
    concentration: float,
    seed: int,
) -> ClientPartition:
    """Spread each preference group over clients with Dirichlet(c) proportions.

    ``groups[u]`` is user ``u``'s group label.  Smaller ``concentration``
    concentrates each group on fewer clients.
    """
    if not concentration > 0:
        raise ContractViolation("concentration must be > 0")
    groups = np.asarray(groups)
    if num_clients > len(groups):
        raise ContractViolation("more clients than users")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(groups), dtype=np.int64)
    for g in np.unique(groups):
        members = np.flatnonzero(groups == g)
        rng.shuffle(members)
        props = rng.dirichlet(np.full(num_clients, float(concentration)))
        cuts = np.floor(np.cumsum(props)[:-1] * len(members)).astype(int)
        for client, chunk in enumerate(np.split(members, cuts)):
            assignment[chunk] = client
    sizes = np.bincount(assignment, minlength=num_clients)
    for c in np.flatnonzero(sizes == 0):
        big = int(np.argmax(sizes))
        donor = np.flatnonzero(assignment == big)[-1]
        assignment[donor] = c
        sizes[big] -= 1
        sizes[c] += 1
    return ClientPartition({u: int(c) for u, c in enumerate(assignment)}, num_clients)


def svd_user_embeddings(log_: InteractionLog, dim: int = 8) -> np.ndarray:
    """Truncated-SVD user factors of the binary interaction matrix."""
    m = np.zeros((log_.num_users, log_.num_items))
    for u, i, _ in log_.events:
        m[u, i] = 1.0
    u_, s, _ = np.linalg.svd(m, full_matrices=False)
    dim = min(dim, len(s))
    return u_[:, :dim] * s[:dim]


def group_distribution(partition: ClientPartition, groups: np.ndarray, num_groups: int) -> np.ndarray:
    """(num_clients, num_groups) row-normalised group histogram per client."""
    hist = np.zeros((partition.num_clients, num_groups))
    for u, c in partition.assignment.items():
        hist[c, groups[u]] += 1
    return hist / hist.sum(axis=1, keepdims=True)
