import numpy as np
import pytest

from splitfedrec.data import chronological_split, generate_synthetic, partition_dirichlet
from splitfedrec.model import LayeredModel, ModelConfig


def perturb_adapters(model: LayeredModel, seed: int, scale: float = 0.3) -> LayeredModel:
    """Give every adapter a non-zero ``up`` so LoRA paths carry signal."""
    rng = np.random.default_rng(seed)
    vec = model.adapter_vector()
    model.load_adapter_vector(vec + scale * rng.standard_normal(vec.shape))
    return model


@pytest.fixture
def small_config():
    return ModelConfig(num_items=12, hidden_dim=8, num_layers=4, lora_rank=2, max_len=5, seed=3)


@pytest.fixture
def small_model(small_config):
    return perturb_adapters(LayeredModel.initialize(small_config), seed=11)


@pytest.fixture(scope="session")
def toy_data():
    syn = generate_synthetic(40, 20, 3, 10, seed=5)
    split = chronological_split(syn.log)
    part = partition_dirichlet(syn.clusters, 3, 0.5, seed=5)
    return syn, split, part


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance check for the terminal summary."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
