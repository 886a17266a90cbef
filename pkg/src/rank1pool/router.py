"""Expert scoring, two-stage top-R selection, gating and activation counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_math import ContractViolation, SeededRng, as_matrix, top_k
from .expert_pool import GateVector

GATE_MODES = ("binary", "masked_softmax")


@dataclass
class Router:
    W: np.ndarray  # r x d_cls

    def __post_init__(self):
        self.W = as_matrix(self.W, "router weight")

    @property
    def r(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, r: int, d_cls: int, rng: SeededRng) -> "Router":
        return cls(rng.normal((r, d_cls), scale=1.0 / np.sqrt(d_cls)))


@dataclass
class ActivationMemory:
    counts: np.ndarray
    samples_seen: int = 0

    @classmethod
    def zeros(cls, r: int) -> "ActivationMemory":
        return cls(np.zeros(r, dtype=np.int64), 0)

    def copy(self) -> "ActivationMemory":
        return ActivationMemory(self.counts.copy(), self.samples_seen)


@dataclass(frozen=True)
class SelectionConfig:
    R: int
    gate_mode: str = "binary"

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ContractViolation(f"gate_mode must be one of {GATE_MODES}")
        if self.R < 1:
            raise ContractViolation("R must be >= 1")


def scores(router: Router, phi) -> np.ndarray:
    """``W_router @ phi`` for one feature vector or row-wise for a batch."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != router.W.shape[1]:
        raise ContractViolation(
            f"feature dim {phi.shape[-1]} != router input dim {router.W.shape[1]}"
        )
    return phi @ router.W.T


def select_sample(s, R: int) -> tuple[int, ...]:
    return top_k(s, R)


def select_batch(sample_sets: Sequence[Sequence[int]], R: int, r: int | None = None) -> tuple[int, ...]:
    """Second stage: count how many samples picked each expert, keep the top R."""
    if r is None:
        r = 1 + max((i for s in sample_sets for i in s), default=R - 1)
    votes = np.zeros(r, dtype=np.int64)
    for s in sample_sets:
        for i in s:
            if not 0 <= i < r:
                raise ContractViolation(f"expert index {i} outside [0, {r})")
            votes[i] += 1
    return top_k(votes, R)


def gate(s, batch_set: Sequence[int], mode: str) -> GateVector:
    s = np.asarray(s, dtype=np.float64)
    r = s.shape[0]
    support = tuple(int(i) for i in batch_set)
    if mode == "binary":
        return GateVector.binary(r, support)
    if mode != "masked_softmax":
        raise ContractViolation(f"unknown gate mode {mode!r}")
    if not support:
        return GateVector.empty(r)
    w = np.zeros(r)
    w[list(support)] = masked_softmax(s[None, :], support)[0, list(support)]
    return GateVector(w, support)


def masked_softmax(S: np.ndarray, support: Sequence[int]) -> np.ndarray:
    """Row-wise softmax restricted to ``support``; zero elsewhere."""
    out = np.zeros_like(S)
    if not support:
        return out
    idx = list(support)
    sub = S[:, idx]
    sub = np.exp(sub - sub.max(axis=1, keepdims=True))
    out[:, idx] = sub / sub.sum(axis=1, keepdims=True)
    return out


def record(memory: ActivationMemory, sample_set: Sequence[int]) -> None:
    for i in sample_set:
        memory.counts[i] += 1
    memory.samples_seen += 1


def critical_set(memory: ActivationMemory, R: int) -> tuple[int, ...]:
    return top_k(memory.counts, R)


@dataclass
class BatchSelection:
    """Everything the two-stage selection produced for one layer and batch."""

    scores: np.ndarray  # N x r
    sample_sets: list[tuple[int, ...]]
    batch_set: tuple[int, ...]
    gates: np.ndarray = field(repr=False)  # N x r


def route_batch(router: Router, phi: np.ndarray, cfg: SelectionConfig,
                memory: ActivationMemory | None = None) -> BatchSelection:
    """Score every sample, select per sample and per batch, and build gates.

    When ``memory`` is given each per-sample set is recorded into it.
    """
    if cfg.R > router.r:
        raise ContractViolation(f"R={cfg.R} exceeds pool size {router.r}")
    S = scores(router, phi)
    sample_sets = [select_sample(row, cfg.R) for row in S]
    if memory is not None:
        for s in sample_sets:
            record(memory, s)
    batch_set = select_batch(sample_sets, cfg.R, router.r)
    if cfg.gate_mode == "binary":
        G = np.zeros_like(S)
        G[:, list(batch_set)] = 1.0
    else:
        G = masked_softmax(S, batch_set)
    return BatchSelection(S, sample_sets, batch_set, G)
