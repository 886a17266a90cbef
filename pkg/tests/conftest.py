from pathlib import Path

import numpy as np
import pytest

from rank1pool.ago import PastRegistry, register_task
from rank1pool.core_math import SeededRng
from rank1pool.model import AdaptedModel, FrozenBackbone, normalize_rows
from rank1pool.router import ActivationMemory

DATA = Path(__file__).parent / "data"

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def published_matrix_path():
    return DATA / "published_accuracy_matrix.csv"


def tiny_model(seed, d=4, r=3, n_layers=2, n_classes=3, temperature=0.5,
               random_b=True, with_past=True):
    """Small adapted model with nonzero ``b`` columns and one past task per layer."""
    rng = SeededRng(seed)
    bb = FrozenBackbone.init(d, d, n_layers, rng.derive("backbone"), temperature)
    model = AdaptedModel.attach(bb, r, rng.derive("adapter"))
    if random_b:
        for pool in model.pools:
            pool.B[:] = rng.derive("b", pool.layer_id).normal(pool.B.shape)
    model.prototypes = normalize_rows(rng.derive("protos").normal((n_classes, d)))
    registry = PastRegistry()
    if with_past:
        for pool in model.pools:
            past = pool.copy()
            past.B[:] = rng.derive("past", pool.layer_id).normal(pool.B.shape)
            mem = ActivationMemory(np.array([2, 1, 3] + [0] * (r - 3))[:r], 3)
            register_task(registry, pool.layer_id, 1, past, mem, 2)
    return model, registry, rng


@pytest.fixture
def make_tiny_model():
    return tiny_model
