"""Past-task registry and the activation-guided orthogonality penalty.

The penalty is the mean absolute inner product between the ``b`` columns that
past tasks used most and the ``b`` columns the current task is using most.
Only ``b`` vectors take part; ``a`` vectors are unconstrained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_math import ContractViolation
from .expert_pool import ExpertPool
from .router import ActivationMemory, critical_set

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PastTaskRecord:
    task_id: int
    critical_indices: tuple[int, ...]
    critical_b: np.ndarray  # d_out x m, one column per kept expert
    frequencies: tuple[int, ...]

    @property
    def m(self) -> int:
        return self.critical_b.shape[1]


@dataclass
class PastRegistry:
    layers: dict[str, list[PastTaskRecord]] = field(default_factory=dict)

    def layer(self, layer_id: str) -> list[PastTaskRecord]:
        return self.layers.get(layer_id, [])

    def past_columns(self, layer_id: str) -> np.ndarray | None:
        records = self.layer(layer_id)
        if not records:
            return None
        dims = {rec.critical_b.shape[0] for rec in records}
        if len(dims) != 1:
            raise ContractViolation(f"layer {layer_id}: past records disagree on dimension")
        return np.concatenate([rec.critical_b for rec in records], axis=1)

    def task_ids(self) -> list[int]:
        ids = sorted({rec.task_id for recs in self.layers.values() for rec in recs})
        return ids


def l_orth_dense(past_cols, cur_cols) -> float:
    """Mean of ``|<past_i, cur_j>|`` over all column pairs.

    Both arguments are (d x m) and (d x n) arrays or lists of vectors.
    """
    P = _columns(past_cols)
    C = _columns(cur_cols)
    if P.shape[1] == 0 or C.shape[1] == 0:
        log.debug("orthogonality penalty is vacuous: empty column set")
        return 0.0
    if P.shape[0] != C.shape[0]:
        raise ContractViolation(f"column dims differ: {P.shape[0]} vs {C.shape[0]}")
    return float(np.abs(P.T @ C).mean())


def l_orth_dense_grad(past_cols, cur_cols) -> np.ndarray:
    """Subgradient of :func:`l_orth_dense` w.r.t. the current columns (sign(0) = 0)."""
    P = _columns(past_cols)
    C = _columns(cur_cols)
    m, n = P.shape[1], C.shape[1]
    if m == 0 or n == 0:
        return np.zeros_like(C)
    return P @ np.sign(P.T @ C) / (m * n)


def _columns(cols) -> np.ndarray:
    if isinstance(cols, np.ndarray):
        arr = np.asarray(cols, dtype=np.float64)
        return arr if arr.ndim == 2 else arr[:, None]
    cols = list(cols)
    if not cols:
        return np.zeros((0, 0))
    return np.stack([np.asarray(c, dtype=np.float64) for c in cols], axis=1)


def _check_k(pool: ExpertPool, k_curr: Sequence[int]) -> list[int]:
    idx = [int(i) for i in k_curr]
    for i in idx:
        if not 0 <= i < pool.r:
            raise ContractViolation(f"critical index {i} outside [0, {pool.r})")
    return idx


def ago_loss(records: Sequence[PastTaskRecord], pool: ExpertPool, k_curr: Sequence[int]) -> float:
    idx = _check_k(pool, k_curr)
    if not records or not idx:
        return 0.0
    past = np.concatenate([rec.critical_b for rec in records], axis=1)
    if past.shape[0] != pool.d_out:
        raise ContractViolation("past record dimension does not match the pool")
    return l_orth_dense(past, pool.B[:, idx])


def ago_grad(records: Sequence[PastTaskRecord], pool: ExpertPool, k_curr: Sequence[int]):
    """Gradients of :func:`ago_loss`.

    Returns ``(grad_B, grad_A)`` shaped like the pool; only the columns of
    ``grad_B`` listed in ``k_curr`` can be nonzero and ``grad_A`` is all zero.
    """
    idx = _check_k(pool, k_curr)
    grad_B = np.zeros_like(pool.B)
    grad_A = np.zeros_like(pool.A)
    if not records or not idx:
        return grad_B, grad_A
    past = np.concatenate([rec.critical_b for rec in records], axis=1)
    if past.shape[0] != pool.d_out:
        raise ContractViolation("past record dimension does not match the pool")
    grad_B[:, idx] = l_orth_dense_grad(past, pool.B[:, idx])
    return grad_B, grad_A


def register_task(registry: PastRegistry, layer_id: str, task_id: int, pool: ExpertPool,
                  memory: ActivationMemory, R: int) -> PastRegistry:
    """Append a snapshot of this task's top-R ``b`` columns for ``layer_id``."""
    records = registry.layers.setdefault(layer_id, [])
    if records and task_id <= records[-1].task_id:
        raise ContractViolation(
            f"layer {layer_id}: task {task_id} not after task {records[-1].task_id}"
        )
    idx = critical_set(memory, min(R, pool.r))
    records.append(
        PastTaskRecord(
            task_id=task_id,
            critical_indices=idx,
            critical_b=pool.B[:, list(idx)].copy(),
            frequencies=tuple(int(memory.counts[i]) for i in idx),
        )
    )
    return registry
