"""Diagnostics over trained pools: norm-based rank importance, rank ablation
during merging, inter-task collision and activation heatmaps.

Functions here return plain rows (lists of dicts) so callers can write CSV
without further reshaping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .ago import PastTaskRecord, ago_loss
from .bench import TaskDataset, evaluate
from .core_math import top_k
from .expert_pool import ExpertPool, MergeStrategy, merge_into
from .router import ActivationMemory


@dataclass
class RankImportance:
    scores: np.ndarray
    order: tuple[int, ...]  # ascending score, ties by index


def frob_rank_importance(pool: ExpertPool) -> RankImportance:
    """Frobenius norm of each rank-1 term, ``|b_i| * |a_i|``."""
    scores = np.linalg.norm(pool.B, axis=0) * np.linalg.norm(pool.A, axis=1)
    order = tuple(int(i) for i in np.lexsort((np.arange(pool.r), scores)))
    return RankImportance(scores, order)


def rank_zero_ablation(base_backbone, pools: Sequence[ExpertPool],
                       memories: Sequence[ActivationMemory], dataset: TaskDataset,
                       prototypes, zero_sets: Mapping[int, Sequence[int]],
                       strategy: MergeStrategy) -> float:
    """Accuracy change when the listed experts are dropped from the merge.

    ``zero_sets`` maps layer index to the experts forced to zero in that
    layer. Returns ``acc(ablated merge) - acc(full merge)`` in points.
    """
    full = _merged(base_backbone, pools, memories, strategy, {})
    ablated = _merged(base_backbone, pools, memories, strategy, zero_sets)
    return evaluate(ablated, dataset, prototypes) - evaluate(full, dataset, prototypes)


def _merged(base, pools, memories, strategy, zero_sets):
    bb = base.copy()
    for l, (layer, pool, mem) in enumerate(zip(bb.layers, pools, memories)):
        layer.W0 = merge_into(layer.W0, pool, mem, strategy, exclude=zero_sets.get(l, ()))
    return bb


def collision_rate(records: Sequence[PastTaskRecord], pool: ExpertPool,
                   k_curr: Sequence[int]) -> float:
    # a larger orthogonality penalty means more shared update directions
    return ago_loss(records, pool, k_curr)


def heatmap_rows(task_memories: Sequence[Sequence[ActivationMemory]],
                 layer_ids: Sequence[str], merge_k: int,
                 task_ids: Sequence[int] | None = None) -> list[dict]:
    """One row per (task, layer, expert) with raw and normalised counts."""
    rows = []
    if task_ids is None:
        task_ids = range(1, len(task_memories) + 1)
    for task_id, mems in zip(task_ids, task_memories):
        for layer_id, mem in zip(layer_ids, mems):
            merged = set(top_k(mem.counts, merge_k))
            seen = mem.samples_seen
            for i, count in enumerate(mem.counts):
                rows.append({
                    "task_id": int(task_id),
                    "layer_id": layer_id,
                    "expert_index": i,
                    "count": int(count),
                    "normalized_frequency": float(count) / seen if seen else 0.0,
                    "merged_flag": i in merged,
                })
    return rows


def frob_rows(task_id: int, pools: Sequence[ExpertPool]) -> list[dict]:
    rows = []
    for pool in pools:
        imp = frob_rank_importance(pool)
        for pos, i in enumerate(imp.order):
            rows.append({
                "task_id": task_id,
                "layer_id": pool.layer_id,
                "position": pos,
                "expert_index": i,
                "b_norm": float(np.linalg.norm(pool.B[:, i])),
                "a_norm": float(np.linalg.norm(pool.A[i])),
                "score": float(imp.scores[i]),
            })
    return rows


def ablation_rows(task_id: int, base_backbone, pools, memories, dataset, prototypes,
                  strategy: MergeStrategy) -> list[dict]:
    """Drop one merged rank, then two adjacent ones, in ascending norm order per layer."""
    full_acc = evaluate(_merged(base_backbone, pools, memories, strategy, {}), dataset, prototypes)
    rows = []
    for l, (pool, mem) in enumerate(zip(pools, memories)):
        merged = set(top_k(mem.counts, strategy.k))
        order = [i for i in frob_rank_importance(pool).order if i in merged]
        groups = [("single", (order[p],), p) for p in range(len(order))]
        groups += [("adjacent", (order[p], order[p + 1]), p) for p in range(len(order) - 1)]
        for mode, experts, pos in groups:
            acc = evaluate(_merged(base_backbone, pools, memories, strategy, {l: experts}),
                           dataset, prototypes)
            rows.append({
                "task_id": task_id,
                "layer_id": pool.layer_id,
                "mode": mode,
                "position": pos,
                "experts": " ".join(str(e) for e in experts),
                "accuracy_full": full_acc,
                "accuracy_ablated": acc,
                "delta": acc - full_acc,
            })
    return rows
