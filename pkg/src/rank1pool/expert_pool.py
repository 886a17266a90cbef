"""A LoRA update held as a pool of rank-1 experts.

The pool stores ``B`` (d_out x r) and ``A`` (r x d_in) as dense arrays; expert
``i`` is the pair (column ``i`` of ``B``, row ``i`` of ``A``) and contributes
``b_i a_i^T``. Gated application never forms the dense update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .core_math import ContractViolation, SeededRng, as_matrix, top_k


@dataclass(frozen=True)
class Rank1Expert:
    b: np.ndarray
    a: np.ndarray


@dataclass
class ExpertPool:
    layer_id: str
    B: np.ndarray
    A: np.ndarray
    forward_scale: float = 1.0

    def __post_init__(self):
        self.B = as_matrix(self.B, "B")
        self.A = as_matrix(self.A, "A")
        if self.B.shape[1] != self.A.shape[0]:
            raise ContractViolation(
                f"B has {self.B.shape[1]} columns but A has {self.A.shape[0]} rows"
            )
        if self.B.shape[1] < 1:
            raise ContractViolation("pool needs at least one expert")
        if not self.forward_scale > 0:
            raise ContractViolation("forward_scale must be positive")

    @property
    def r(self) -> int:
        return self.B.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def experts(self) -> list[Rank1Expert]:
        return [Rank1Expert(self.B[:, i].copy(), self.A[i].copy()) for i in range(self.r)]

    def copy(self) -> "ExpertPool":
        return ExpertPool(self.layer_id, self.B.copy(), self.A.copy(), self.forward_scale)


@dataclass(frozen=True)
class GateVector:
    """Per-expert gate weights; ``support`` lists the indices with weight > 0."""

    weights: np.ndarray
    support: tuple[int, ...] = field(default=())

    @classmethod
    def binary(cls, r: int, support: Sequence[int]) -> "GateVector":
        w = np.zeros(r)
        support = tuple(int(i) for i in support)
        _check_indices(support, r)
        w[list(support)] = 1.0
        return cls(w, support)

    @classmethod
    def full(cls, r: int) -> "GateVector":
        return cls.binary(r, range(r))

    @classmethod
    def empty(cls, r: int) -> "GateVector":
        return cls(np.zeros(r), ())

    @classmethod
    def from_weights(cls, weights) -> "GateVector":
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w < 0):
            raise ContractViolation("gate weights must be nonnegative")
        return cls(w, tuple(int(i) for i in np.flatnonzero(w > 0)))


@dataclass(frozen=True)
class UniformTopK:
    k: int


@dataclass(frozen=True)
class FrequencyWeighted:
    k: int
    alpha: float


MergeStrategy = Union[UniformTopK, FrequencyWeighted]


def _check_indices(indices: Sequence[int], r: int) -> None:
    if len(set(indices)) != len(indices):
        raise ContractViolation(f"duplicate expert indices in {indices}")
    for i in indices:
        if not 0 <= i < r:
            raise ContractViolation(f"expert index {i} outside [0, {r})")


def init_pool(d_out: int, d_in: int, r: int, rng: SeededRng, layer_id: str = "0",
              forward_scale: float = 1.0) -> ExpertPool:
    """Fresh pool with Gaussian(0, 1/d_in) ``a`` vectors and zero ``b`` vectors."""
    if r < 1:
        raise ContractViolation("r must be >= 1")
    A = rng.normal((r, d_in), scale=1.0 / np.sqrt(d_in))
    B = np.zeros((d_out, r))
    return ExpertPool(layer_id, B, A, forward_scale)


def from_dense(B, A, layer_id: str = "0", forward_scale: float = 1.0) -> ExpertPool:
    return ExpertPool(layer_id, np.array(B, dtype=np.float64), np.array(A, dtype=np.float64),
                      forward_scale)


def _gate_weights(pool: ExpertPool, gate) -> np.ndarray:
    w = gate.weights if isinstance(gate, GateVector) else np.asarray(gate, dtype=np.float64)
    if w.shape[-1] != pool.r:
        raise ContractViolation(f"gate has {w.shape[-1]} entries, pool has r={pool.r}")
    return w


def to_dense_update(pool: ExpertPool, gate) -> np.ndarray:
    w = _gate_weights(pool, gate)
    if w.ndim != 1:
        raise ContractViolation("dense update needs a single gate vector")
    # columns of B outside the support are multiplied by an exact zero
    return pool.forward_scale * ((pool.B * w) @ pool.A)


def apply(pool: ExpertPool, gate, W0, bias, x) -> np.ndarray:
    """Pre-activation output ``W0 x + bias + scale * sum_i g_i b_i (a_i . x)``.

    ``x`` may be one vector or a batch (N x d_in); ``gate`` may be a single
    gate or an (N x r) array of per-sample weights.
    """
    W0 = np.asarray(W0, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W0.shape != (pool.d_out, pool.d_in):
        raise ContractViolation(f"W0 shape {W0.shape} != ({pool.d_out}, {pool.d_in})")
    if bias.shape != (pool.d_out,):
        raise ContractViolation(f"bias shape {bias.shape} != ({pool.d_out},)")
    if x.shape[-1] != pool.d_in:
        raise ContractViolation(f"input dim {x.shape[-1]} != {pool.d_in}")
    w = _gate_weights(pool, gate)
    proj = x @ pool.A.T  # a_i . x for every expert
    return x @ W0.T + bias + pool.forward_scale * ((w * proj) @ pool.B.T)


def merge_weights(pool: ExpertPool, memory, strategy: MergeStrategy,
                  exclude: Sequence[int] = ()) -> GateVector:
    """Per-expert coefficients that ``merge_into`` folds into the base weight.

    ``exclude`` forces the listed experts to zero after selection, which is
    how the rank-ablation diagnostic drops experts from a merge.
    """
    counts = np.asarray(memory.counts)
    if counts.shape != (pool.r,):
        raise ContractViolation("memory size does not match the pool")
    if strategy.k > pool.r or strategy.k < 0:
        raise ContractViolation(f"merge k={strategy.k} outside [0, {pool.r}]")
    chosen = [i for i in top_k(counts, strategy.k) if i not in set(exclude)]
    w = np.zeros(pool.r)
    if isinstance(strategy, UniformTopK):
        w[chosen] = pool.forward_scale
    elif isinstance(strategy, FrequencyWeighted):
        seen = memory.samples_seen
        for i in chosen:
            w[i] = strategy.alpha * (counts[i] / seen if seen else 0.0)
    else:
        raise ContractViolation(f"unknown merge strategy {strategy!r}")
    return GateVector(w, tuple(i for i in chosen if w[i] > 0))


def merge_into(W0, pool: ExpertPool, memory, strategy: MergeStrategy,
               exclude: Sequence[int] = ()) -> np.ndarray:
    """New base weight with the selected experts folded in; ``W0`` is not modified."""
    W0 = np.asarray(W0, dtype=np.float64)
    w = merge_weights(pool, memory, strategy, exclude).weights
    return W0 + (pool.B * w) @ pool.A
