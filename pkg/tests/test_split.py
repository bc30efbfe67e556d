import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from splitfedrec.errors import ContractViolation
from splitfedrec.model import LayeredModel, ModelConfig, batch_loss, model_backward, model_forward
from splitfedrec.split import (
    ExchangeRecord,
    MessageChannel,
    SplitPlan,
    break_even_embedding_cost,
    cost_report,
    fedavg_cost_report,
    read_exchange_log,
    split_backward,
    split_forward,
    split_is_cheaper,
)

from conftest import perturb_adapters


@pytest.mark.parametrize("k,n", [(0, 6), (5, 6), (6, 6), (1, 2), (2, 3)])
def test_illegal_plans_rejected(k, n):
    with pytest.raises(ContractViolation):
        SplitPlan(k, n)


def test_plan_layer_sets():
    plan = SplitPlan(2, 6)
    assert plan.client_layers == (1, 2, 6)
    assert plan.server_layers == (3, 4, 5)
    assert [p.k for p in SplitPlan.all_legal(6)] == [1, 2, 3, 4]


@given(n=st.integers(3, 64), data=st.data())
def test_client_and_server_layers_partition_the_model(n, data):
    k = data.draw(st.integers(1, n - 2))
    plan = SplitPlan(k, n)
    both = plan.client_layers + plan.server_layers
    assert sorted(both) == list(range(1, n + 1))
    assert len(plan.client_layers) == k + 1


def _model():
    cfg = ModelConfig(num_items=15, hidden_dim=8, num_layers=6, lora_rank=2, seed=1)
    return perturb_adapters(LayeredModel.initialize(cfg), seed=4)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_split_execution_is_bit_identical(k):
    m = _model()
    plan = SplitPlan(k, 6)
    ids = np.array([[1, 3, 5], [2, 4, 6]])
    table = m.item_table()
    mono, tape = model_forward(ids, m)
    split, stape, recs = split_forward(ids, m, plan)
    assert np.array_equal(mono, split)
    _, g = batch_loss(mono, np.array([7, 8]), table)
    ref = model_backward(g, m, tape)
    got, brecs = split_backward(g, m, plan, stape)
    for layer in ref:
        for name in ("q", "v"):
            assert np.array_equal(ref[layer][name].down, got[layer][name].down)
            assert np.array_equal(ref[layer][name].up, got[layer][name].up)
    assert [r.payload_kind for r in recs + brecs] == ["embedding", "embedding", "gradient", "gradient"]


def test_channel_copies_payload():
    ch = MessageChannel()
    x = np.ones((2, 3))
    y = ch.send_activation("client->server", "embedding", x)
    y[0, 0] = 5.0
    assert x[0, 0] == 1.0


def test_exchange_sizes_scale_with_batch_and_layers():
    ch = MessageChannel(embedding_units=0.5, layer_units=2.0)
    ch.send_activation("client->server", "embedding", np.zeros((4, 3, 2)))
    ch.send_layers("client->server", (1, 2, 6))
    assert [r.size_units for r in ch.records] == [2.0, 6.0]


def test_bad_exchange_records_rejected():
    with pytest.raises(ContractViolation):
        ExchangeRecord("sideways", "embedding", 1.0)
    with pytest.raises(ContractViolation):
        ExchangeRecord("client->server", "weights", 1.0)
    with pytest.raises(ContractViolation):
        ExchangeRecord("client->server", "embedding", 0.0)


def test_exchange_log_round_trip(tmp_path):
    m = _model()
    ch = MessageChannel()
    ch.round = 3
    split_forward(np.array([1, 2]), m, SplitPlan(2, 6), ch)
    path = tmp_path / "log.jsonl"
    ch.to_jsonl(path)
    assert read_exchange_log(path) == ch.records


def test_backward_rejects_foreign_or_incomplete_tape():
    m = _model()
    emb, tape = split_forward(np.array([1, 2]), m, SplitPlan(2, 6))[:2]
    with pytest.raises(ContractViolation):
        split_backward(np.ones_like(emb), m, SplitPlan(3, 6), tape)
    tape.pop(4)
    with pytest.raises(ContractViolation):
        split_backward(np.ones_like(emb), m, SplitPlan(2, 6), tape)
    _, mono = model_forward(np.array([1, 2]), m)
    with pytest.raises(ContractViolation):
        split_backward(np.ones_like(emb), m, SplitPlan(2, 6), mono)


def test_plan_model_mismatch_rejected():
    with pytest.raises(ContractViolation):
        split_forward(np.array([1]), _model(), SplitPlan(2, 5))


def test_cost_formulas_on_grid():
    for n in range(3, 65):
        for k in range(1, n - 1):
            r = cost_report(SplitPlan(k, n), 2.0, 0.5)
            assert (r.storage_units, r.inference_units) == (k + 1, k + 1)
            assert r.communication_units == (k + 1) * 2.0 + 2 * 0.5
            f = fedavg_cost_report(n, 2.0)
            assert (f.storage_units, f.inference_units, f.communication_units) == (n, n, n * 2.0)


def test_break_even_predicate_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(3, 65))
        k = int(rng.integers(1, n - 1))
        b, c = float(rng.uniform(0.01, 10)), float(rng.uniform(0.01, 40))
        plan = SplitPlan(k, n)
        assert split_is_cheaper(plan, b, c) == (c < (n - k - 1) * b / 2)
        assert break_even_embedding_cost(plan, b) == (n - k - 1) * b / 2


def test_cost_rejects_non_positive_units():
    with pytest.raises(ContractViolation):
        cost_report(SplitPlan(1, 3), 0.0, 1.0)
    with pytest.raises(ContractViolation):
        cost_report(SplitPlan(1, 3), 1.0, -1.0)


def test_known_cost_values():
    r = cost_report(SplitPlan(2, 6), 1.0, 1.0)
    assert r.to_dict() == {
        "method": "fellrec", "storage_units": 3, "inference_units": 3,
        "communication_units": 5.0, "b": 1.0, "c": 1.0,
    }
    assert not split_is_cheaper(SplitPlan(4, 6), 1.0, 0.5)
    assert list(itertools.islice(SplitPlan.all_legal(3), 2)) == [SplitPlan(1, 3)]
