"""Client/server layer placement, split execution and the cost model.

The client keeps layers ``1..k`` and the output layer ``N``; the server runs
``k+1..N-1``.  Activations and gradients cross the boundary only through a
``MessageChannel``, which copies payloads and logs every exchange.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractViolation
from .model import ActivationTape, LayeredModel, LoraGrad, layer_backward, layer_forward

CLIENT_TO_SERVER = "client->server"
SERVER_TO_CLIENT = "server->client"
PAYLOAD_KINDS = ("embedding", "layer_params", "gradient")


@dataclass(frozen=True)
class SplitPlan:
    k: int
    num_layers: int

    def __post_init__(self) -> None:
        if self.k < 1 or self.k + 1 >= self.num_layers:
            raise ContractViolation(
                f"split needs 1 <= k and k + 1 < N; got k={self.k}, N={self.num_layers}"
            )

    @property
    def client_layers(self) -> tuple[int, ...]:
        return tuple(range(1, self.k + 1)) + (self.num_layers,)

    @property
    def server_layers(self) -> tuple[int, ...]:
        return tuple(range(self.k + 1, self.num_layers))

    @classmethod
    def all_legal(cls, num_layers: int) -> list[SplitPlan]:
        return [cls(k, num_layers) for k in range(1, num_layers - 1)]


@dataclass(frozen=True)
class ExchangeRecord:
    direction: str
    payload_kind: str
    size_units: float
    round: int = 0

    def __post_init__(self) -> None:
        if self.direction not in (CLIENT_TO_SERVER, SERVER_TO_CLIENT):
            raise ContractViolation(f"unknown direction {self.direction!r}")
        if self.payload_kind not in PAYLOAD_KINDS:
            raise ContractViolation(f"unknown payload kind {self.payload_kind!r}")
        if not self.size_units > 0:
            raise ContractViolation("size_units must be positive")


class MessageChannel:
    """In-process transport between one client and the server.

    ``embedding_units`` is the cost of moving one sequence's activation (or
    its gradient); ``layer_units`` the cost of moving one layer's adapters.
    """

    def __init__(self, embedding_units: float = 1.0, layer_units: float = 1.0) -> None:
        self.embedding_units = float(embedding_units)
        self.layer_units = float(layer_units)
        self.round = 0
        self.records: list[ExchangeRecord] = []

    def transfer(self, direction: str, kind: str, payload, size_units: float):
        self.records.append(ExchangeRecord(direction, kind, float(size_units), self.round))
        if isinstance(payload, np.ndarray):
            return payload.copy()
        return payload

    def send_activation(self, direction: str, kind: str, payload: np.ndarray) -> np.ndarray:
        batch = payload.shape[0] if payload.ndim == 3 else 1
        return self.transfer(direction, kind, payload, self.embedding_units * batch)

    def send_layers(self, direction: str, layers: Iterable[int], payload=None):
        n = len(tuple(layers))
        return self.transfer(direction, "layer_params", payload, self.layer_units * n)

    def to_jsonl(self, path: str | Path | None = None) -> str:
        lines = "".join(
            json.dumps(
                {
                    "round": r.round,
                    "direction": r.direction,
                    "payload_kind": r.payload_kind,
                    "size_units": r.size_units,
                }
            )
            + "\n"
            for r in self.records
        )
        if path is not None:
            Path(path).write_text(lines, encoding="utf-8")
        return lines


def read_exchange_log(path: str | Path) -> list[ExchangeRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            out.append(
                ExchangeRecord(row["direction"], row["payload_kind"], row["size_units"], row["round"])
            )
    return out


class ServerComponent:
    """Runs the offloaded middle layers of one client's model."""

    def __init__(self, model: LayeredModel, plan: SplitPlan) -> None:
        self.model = model
        self.plan = plan

    def forward(self, x: np.ndarray, tape: ActivationTape) -> np.ndarray:
        for i in self.plan.server_layers:
            x = layer_forward(i, x, self.model, tape)
        return x

    def backward(self, g: np.ndarray, tape: ActivationTape) -> tuple[np.ndarray, dict]:
        grads = {}
        for i in reversed(self.plan.server_layers):
            g, grads[i] = layer_backward(i, g, self.model, tape)
        return g, grads


def _check_plan(model: LayeredModel, plan: SplitPlan) -> None:
    if plan.num_layers != model.num_layers:
        raise ContractViolation(
            f"plan is for {plan.num_layers} layers, model has {model.num_layers}"
        )


def split_forward(
    h,
    model: LayeredModel,
    plan: SplitPlan,
    channel: MessageChannel | None = None,
) -> tuple[np.ndarray, ActivationTape, list[ExchangeRecord]]:
    _check_plan(model, plan)
    channel = channel or MessageChannel()
    start = len(channel.records)
    tape = ActivationTape()
    tape.plan = plan
    server = ServerComponent(model, plan)

    x = h
    for i in range(1, plan.k + 1):
        x = layer_forward(i, x, model, tape)
    x = channel.send_activation(CLIENT_TO_SERVER, "embedding", x)
    x = server.forward(x, tape)
    x = channel.send_activation(SERVER_TO_CLIENT, "embedding", x)
    out = layer_forward(plan.num_layers, x, model, tape)
    return out, tape, channel.records[start:]


def split_backward(
    grad: np.ndarray,
    model: LayeredModel,
    plan: SplitPlan,
    tape: ActivationTape,
    channel: MessageChannel | None = None,
) -> tuple[dict[int, dict[str, LoraGrad]], list[ExchangeRecord]]:
    _check_plan(model, plan)
    if tape.plan != plan:
        raise ContractViolation("tape was not produced by split_forward with this plan")
    missing = set(range(1, plan.num_layers + 1)) - set(tape.layers())
    if missing:
        raise ContractViolation(f"tape lacks forward records for layers {sorted(missing)}")
    channel = channel or MessageChannel()
    start = len(channel.records)
    server = ServerComponent(model, plan)

    grads: dict[int, dict[str, LoraGrad]] = {}
    g, grads[plan.num_layers] = layer_backward(plan.num_layers, grad, model, tape)
    g = channel.send_activation(CLIENT_TO_SERVER, "gradient", g)
    g, server_grads = server.backward(g, tape)
    grads.update(server_grads)
    g = channel.send_activation(SERVER_TO_CLIENT, "gradient", g)
    for i in range(plan.k, 0, -1):
        g, grads[i] = layer_backward(i, g, model, tape)
    tape.clear()
    return grads, channel.records[start:]


# -- cost model -------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    method: str
    storage_units: float
    inference_units: float
    communication_units: float
    b: float
    c: float

    def to_dict(self) -> dict:
        return asdict(self)


def cost_report(plan: SplitPlan, b: float, c: float) -> CostReport:
    """Client-side cost of the split deployment in layer/embedding units."""
    if not (b > 0 and c > 0):
        raise ContractViolation("b and c must be positive")
    kept = plan.k + 1
    return CostReport("fellrec", kept, kept, kept * b + 2 * c, b, c)


def fedavg_cost_report(num_layers: int, b: float, c: float = 0.0) -> CostReport:
    """Reference cost when every client holds and uploads the whole model."""
    if not b > 0:
        raise ContractViolation("b must be positive")
    return CostReport("fedavg", num_layers, num_layers, num_layers * b, b, c)


def split_is_cheaper(plan: SplitPlan, b: float, c: float) -> bool:
    """Whether split communication undercuts full-model FedAvg."""
    return (
        cost_report(plan, b, c).communication_units
        < fedavg_cost_report(plan.num_layers, b, c).communication_units
    )


def break_even_embedding_cost(plan: SplitPlan, b: float) -> float:
    """Largest embedding cost ``c`` (exclusive) at which splitting still pays off."""
    return (plan.num_layers - plan.k - 1) * b / 2
