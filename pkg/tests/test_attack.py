import logging

import numpy as np
import pytest

from splitfedrec.attack import (
    ProbeConfig,
    ProbeReport,
    collect_all_intermediates,
    collect_intermediates,
    holdout_split,
    mean_cosine,
    probe_similarity,
    probe_sweep,
    probe_trend_holds,
    train_probe,
)
from splitfedrec.data import chronological_split, generate_synthetic
from splitfedrec.errors import ContractViolation
from splitfedrec.model import LayeredModel, ModelConfig, layer_forward


def _train_mse(probe, x, y):
    r = probe.predict(x) - y
    return float((r * r).mean())


def test_identity_data_is_reconstructed():
    x = np.random.default_rng(0).standard_normal((300, 16))
    for kind in ("linear", "mlp"):
        assert probe_similarity((x, x), ProbeConfig(kind=kind, train_steps=50)) > 0.999


def test_random_pairs_give_near_zero_similarity():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((500, 16)), rng.standard_normal((500, 16))
        assert abs(probe_similarity((x, y), ProbeConfig(kind="linear", seed=seed))) < 0.2


def test_mlp_at_least_matches_linear_on_linear_data():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((200, 8))
        y = x @ rng.standard_normal((8, 8)) + 0.1 * rng.standard_normal((200, 8))
        lin = train_probe((x, y), ProbeConfig(kind="linear"))
        mlp = train_probe((x, y), ProbeConfig(kind="mlp", hidden_dim=8, train_steps=200, seed=seed))
        assert _train_mse(mlp, x, y) <= _train_mse(lin, x, y) + 1e-12


def test_mlp_beats_linear_on_nonlinear_data():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 4))
    y = np.abs(x)
    lin = train_probe((x, y), ProbeConfig(kind="linear"))
    mlp = train_probe((x, y), ProbeConfig(kind="mlp", hidden_dim=32, train_steps=2000, lr=0.05))
    assert _train_mse(mlp, x, y) < 0.5 * _train_mse(lin, x, y)


def test_degenerate_inputs_fit_constant(caplog):
    x = np.ones((10, 4))
    y = np.random.default_rng(1).standard_normal((10, 4))
    with caplog.at_level(logging.WARNING):
        probe = train_probe((x, y), ProbeConfig(kind="mlp"))
    assert "identical" in caplog.text
    np.testing.assert_allclose(probe.predict(x[:2]), np.tile(y.mean(axis=0), (2, 1)))


def test_probe_config_and_pairs_validation():
    with pytest.raises(ContractViolation):
        ProbeConfig(kind="tree")
    with pytest.raises(ContractViolation):
        ProbeConfig(train_steps=0)
    with pytest.raises(ContractViolation):
        train_probe((np.ones((1, 2)), np.ones((1, 2))), ProbeConfig())
    with pytest.raises(ContractViolation):
        ProbeReport([1.5], "linear")


def test_holdout_split_is_seeded_and_disjoint():
    tr, ev = holdout_split(50, 0.2, seed=3)
    assert len(ev) == 10 and len(tr) == 40
    assert not set(tr) & set(ev)
    tr2, ev2 = holdout_split(50, 0.2, seed=3)
    assert np.array_equal(tr, tr2) and np.array_equal(ev, ev2)


def test_mean_cosine_bounds():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert mean_cosine(a, a) == pytest.approx(1.0)
    assert mean_cosine(a, -a) == pytest.approx(-1.0)


@pytest.fixture
def probe_setup(toy_data):
    _, split, _ = toy_data
    cfg = ModelConfig(num_items=20, hidden_dim=8, num_layers=4, lora_rank=2, seed=1)
    return LayeredModel.initialize(cfg), split.examples("train", split.users)


def test_collect_intermediates_shapes_and_layer1(probe_setup):
    model, sample = probe_setup
    inter, target = collect_intermediates(model, sample, 1)
    assert inter.shape == target.shape == (len(sample), 8)
    ex = sample[5]
    ids = np.array(ex.history.item_ids[-model.config.max_len:])
    lookup = model.layer(1).frozen["item_emb"][ids].mean(axis=0)
    np.testing.assert_allclose(target[5], lookup, atol=1e-15)
    np.testing.assert_allclose(inter[5], layer_forward(1, ids, model).mean(axis=0), atol=1e-12)
    last, _ = collect_intermediates(model, sample, 4)
    assert last.shape == (len(sample), 8)
    with pytest.raises(ContractViolation):
        collect_intermediates(model, sample, 5)


def test_sweep_length_determinism_and_csv(probe_setup, tmp_path):
    model, sample = probe_setup
    cfg = ProbeConfig(kind="mlp", train_steps=30, seed=2)
    a = probe_sweep(model, sample, cfg)
    b = probe_sweep(model, sample, cfg)
    assert len(a.similarities) == model.num_layers
    assert a.similarities == b.similarities
    a.write(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "layer,similarity,kind"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2", "3", "4"]


def test_untrained_model_leaks_most_at_layer_one():
    syn = generate_synthetic(400, 100, 5, 20, seed=0)
    sample = chronological_split(syn.log).examples("test", range(400))
    model = LayeredModel.initialize(ModelConfig(num_items=100, hidden_dim=16, num_layers=6, seed=0))
    report = probe_sweep(model, sample, ProbeConfig(kind="linear"))
    assert report.similarity(1) > report.similarity(5)
    assert probe_trend_holds(report, margin=0.0)
    targets, layers = collect_all_intermediates(model, sample)
    assert len(layers) == 6 and targets.shape == (len(sample), 16)
