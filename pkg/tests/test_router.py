import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rank1pool.core_math import ContractViolation, SeededRng
from rank1pool.router import (
    ActivationMemory,
    Router,
    SelectionConfig,
    critical_set,
    gate,
    record,
    route_batch,
    scores,
    select_batch,
    select_sample,
)


def sort_select(s, R):
    return tuple(sorted(range(len(s)), key=lambda i: (-s[i], i))[:R])


def test_scores_examples():
    np.testing.assert_array_equal(scores(Router(np.eye(2)), [0.3, -0.7]), [0.3, -0.7])
    np.testing.assert_array_equal(scores(Router(np.zeros((3, 2))), [1.0, 2.0]), np.zeros(3))
    rng = SeededRng(1)
    W, phi = rng.normal((5, 4)), rng.normal(4)
    np.testing.assert_allclose(scores(Router(W), phi), W @ phi, atol=1e-12)
    with pytest.raises(ContractViolation):
        scores(Router(W), np.ones(3))


def test_select_sample_examples():
    assert select_sample([0.5, 0.2, 0.9, 0.5], 2) == (2, 0)
    assert sorted(select_sample([0.1, 0.3, 0.2], 3)) == [0, 1, 2]


def test_select_sample_matches_full_sort():
    rng = SeededRng(2)
    for _ in range(1000):
        r = 1 + rng.integers(12)
        R = 1 + rng.integers(r)
        s = np.round(rng.normal(r), 1)  # rounding forces ties
        assert select_sample(s, R) == sort_select(list(s), R)


def test_select_batch_examples():
    assert select_batch([{0, 1}, {1, 2}, {1, 3}], 2, 4) == (1, 0)
    assert select_batch([(3, 1)], 2, 4) == (1, 3)
    assert select_batch([(2, 0)] * 5, 2, 4) == (0, 2)


def test_gate_examples():
    np.testing.assert_array_equal(gate(np.zeros(4), [1, 3], "binary").weights, [0, 1, 0, 1])
    np.testing.assert_allclose(gate(np.zeros(4), [0, 1], "masked_softmax").weights,
                               [0.5, 0.5, 0, 0])
    g = gate(np.array([1.0, 0.0]), [0, 1], "masked_softmax").weights
    np.testing.assert_allclose(g, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-15)
    assert abs(g[0] - 0.7311) < 1e-4 and abs(g[1] - 0.2689) < 1e-4
    empty = gate(np.ones(3), [], "masked_softmax")
    np.testing.assert_array_equal(empty.weights, np.zeros(3))
    assert empty.support == ()


def test_record_and_critical_set_examples():
    mem = ActivationMemory.zeros(4)
    assert critical_set(mem, 2) == (0, 1)
    for s in [(0, 1), (1, 2), (1, 3)]:
        record(mem, s)
    np.testing.assert_array_equal(mem.counts, [1, 3, 1, 1])
    assert mem.samples_seen == 3
    assert mem.counts.sum() == mem.samples_seen * 2
    assert critical_set(mem, 2) == (1, 0)
    assert sorted(critical_set(mem, 4)) == [0, 1, 2, 3]


def test_route_batch_rejects_oversized_R():
    with pytest.raises(ContractViolation):
        route_batch(Router(np.eye(3)), np.ones((2, 3)), SelectionConfig(4))


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 12), st.data())
def test_route_batch_properties(seed, N, r, data):
    R = data.draw(st.integers(1, r))
    mode = data.draw(st.sampled_from(["binary", "masked_softmax"]))
    rng = SeededRng(seed)
    router = Router(rng.normal((r, 3)))
    phi = rng.normal((N, 3))
    mem = ActivationMemory.zeros(r)
    sel = route_batch(router, phi, SelectionConfig(R, mode), mem)
    votes = np.zeros(r, dtype=int)
    for s in sel.sample_sets:
        votes[list(s)] += 1
    assert votes.sum() == N * R
    assert all(votes[i] >= 1 for i in sel.batch_set)
    assert mem.counts.sum() == mem.samples_seen * R
    if mode == "binary":
        assert set(np.unique(sel.gates)) <= {0.0, 1.0}
    else:
        np.testing.assert_allclose(sel.gates.sum(axis=1), 1.0, atol=1e-12)
    outside = [i for i in range(r) if i not in sel.batch_set]
    assert np.all(sel.gates[:, outside] == 0)
