import numpy as np
import pytest

from rank1pool.ago import (
    PastRegistry,
    ago_grad,
    ago_loss,
    l_orth_dense,
    register_task,
)
from rank1pool.core_math import ContractViolation, SeededRng, finite_diff_grad
from rank1pool.expert_pool import from_dense, init_pool
from rank1pool.router import ActivationMemory

e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])


def registry_with(cols, layer="l"):
    reg = PastRegistry()
    B = np.stack(cols, axis=1)
    pool = from_dense(B, np.ones((B.shape[1], 1)), layer_id=layer)
    counts = np.arange(B.shape[1], 0, -1)
    register_task(reg, layer, 1, pool, ActivationMemory(counts, 1), B.shape[1])
    return reg


def test_l_orth_dense_examples():
    assert l_orth_dense([e1], [e2]) == 0.0
    assert l_orth_dense([e1], [np.array([1.0, 1.0])]) == 1.0
    assert l_orth_dense([e1, e2], [np.array([3.0, 4.0])]) == 3.5
    assert l_orth_dense([], [e1]) == 0.0


def test_ago_loss_examples():
    pool = from_dense(np.array([[0.5, 9.0], [0.2, 9.0]]), np.ones((2, 3)), layer_id="l")
    assert ago_loss([], pool, [0]) == 0.0
    fresh = init_pool(2, 3, 2, SeededRng(0), layer_id="l")
    assert ago_loss(registry_with([e1]).layer("l"), fresh, [0, 1]) == 0.0
    assert ago_loss(registry_with([e1]).layer("l"), pool, [0]) == 0.5


def test_ago_grad_example_matches_finite_differences():
    pool = from_dense(np.array([[0.5], [0.2]]), np.ones((1, 2)), layer_id="l")
    recs = registry_with([e1]).layer("l")
    gB, gA = ago_grad(recs, pool, [0])
    np.testing.assert_allclose(gB[:, 0], [1.0, 0.0])
    assert not gA.any()

    def f(b):
        p = pool.copy()
        p.B[:, 0] = b
        return ago_loss(recs, p, [0])

    np.testing.assert_allclose(finite_diff_grad(f, pool.B[:, 0], 1e-6), [1.0, 0.0], atol=1e-8)


def test_ago_grad_zero_at_exact_orthogonality():
    pool = from_dense(np.array([[0.0], [1.0]]), np.ones((1, 2)), layer_id="l")
    gB, _ = ago_grad(registry_with([e1]).layer("l"), pool, [0])
    assert not gB.any()


def test_ago_grad_random_against_finite_differences():
    rng = SeededRng(21)
    checked = 0
    while checked < 100:
        d = 2 + rng.integers(7)
        m, n = 1 + rng.integers(4), 1 + rng.integers(4)
        r = n + rng.integers(3)
        past = [rng.normal(d) for _ in range(m)]
        pool = from_dense(rng.normal((d, r)), rng.normal((r, 2)), layer_id="l")
        k_curr = [int(i) for i in rng.integers(r, size=n)]
        k_curr = list(dict.fromkeys(k_curr))
        recs = registry_with(past).layer("l")
        inner = np.stack(past, axis=1).T @ pool.B[:, k_curr]
        if np.abs(inner).min() <= 1e-4:
            continue
        gB, _ = ago_grad(recs, pool, k_curr)

        def f(flat):
            p = pool.copy()
            p.B[:] = flat.reshape(p.B.shape)
            return ago_loss(recs, p, k_curr)

        fd = finite_diff_grad(f, pool.B.reshape(-1), 1e-6).reshape(pool.B.shape)
        scale = max(np.abs(fd).max(), 1e-12)
        assert np.abs(fd - gB).max() / scale < 1e-6
        outside = [i for i in range(r) if i not in k_curr]
        assert not gB[:, outside].any()
        checked += 1


def test_scale_covariance_and_full_cover():
    rng = SeededRng(22)
    past = [rng.normal(5) for _ in range(3)]
    recs = registry_with(past).layer("l")
    pool = from_dense(rng.normal((5, 4)), rng.normal((4, 2)), layer_id="l")
    base = ago_loss(recs, pool, [0, 1, 2, 3])
    scaled = pool.copy()
    scaled.B *= 2.5
    assert abs(ago_loss(recs, scaled, [0, 1, 2, 3]) - 2.5 * base) < 1e-12
    assert ago_loss(recs, pool, [0, 1, 2, 3]) == l_orth_dense(np.stack(past, 1), pool.B)


def test_register_task_snapshot_and_order():
    reg = PastRegistry()
    B = np.arange(8.0).reshape(2, 4)
    pool = from_dense(B, np.ones((4, 1)), layer_id="l")
    mem = ActivationMemory(np.array([1, 3, 1, 1]), 3)
    register_task(reg, "l", 1, pool, mem, 2)
    rec = reg.layer("l")[0]
    assert rec.critical_indices == (1, 0)
    np.testing.assert_array_equal(rec.critical_b, B[:, [1, 0]])
    assert rec.frequencies == (3, 1)
    pool.B[:] = -1.0
    np.testing.assert_array_equal(rec.critical_b, np.arange(8.0).reshape(2, 4)[:, [1, 0]])
    register_task(reg, "l", 2, pool, mem, 2)
    assert len(reg.layer("l")) == 2
    with pytest.raises(ContractViolation):
        register_task(reg, "l", 2, pool, mem, 2)


def test_dimension_mismatch_across_tasks():
    reg = registry_with([e1])
    pool = from_dense(np.ones((3, 1)), np.ones((1, 1)), layer_id="l")
    with pytest.raises(ContractViolation):
        ago_loss(reg.layer("l"), pool, [0])
