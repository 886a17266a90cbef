"""AdamW, the per-task training loop, end-of-task merging and the task sequence."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .ago import PastRegistry, ago_loss, register_task
from .bench import TaskDataset, evaluate
from .core_math import ContractViolation, NumericFailure, SeededRng
from .expert_pool import FrequencyWeighted, UniformTopK, merge_into, merge_weights
from .model import (
    AdaptedModel,
    FrozenBackbone,
    backward,
    current_critical_sets,
    forward_train,
    prototypes_from_inputs,
    total_loss,
)
from .router import ActivationMemory, SelectionConfig

log = logging.getLogger(__name__)

MERGE_STRATEGIES = ("uniform_topk", "frequency_weighted")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 32
    steps_per_task: int = 500
    lam: float = 0.1
    r: int = 12
    R: int = 8
    merge_k: int = 4
    ago_R: int | None = None  # None: same as R
    gate_mode: str = "binary"
    merge_strategy: str = "uniform_topk"
    merge_alpha: float | None = None  # None: 1/r
    forward_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    d_model: int = 32
    n_layers: int = 2
    temperature: float = 0.1
    collision_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.merge_k <= self.R <= self.r:
            raise ContractViolation("need 0 <= merge_k <= R <= r")
        if self.R < 1:
            raise ContractViolation("R must be >= 1")
        for name in ("lr", "eps", "temperature", "forward_scale"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")
        if self.lam < 0 or self.weight_decay < 0:
            raise ContractViolation("lam and weight_decay must be nonnegative")
        for name in ("batch_size", "steps_per_task", "d_model", "n_layers", "collision_every"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.gate_mode not in ("binary", "masked_softmax"):
            raise ContractViolation(f"unknown gate_mode {self.gate_mode!r}")
        if self.merge_strategy not in MERGE_STRATEGIES:
            raise ContractViolation(f"unknown merge_strategy {self.merge_strategy!r}")
        if self.ago_R is not None and not 1 <= self.ago_R <= self.r:
            raise ContractViolation("ago_R must lie in [1, r]")

    @property
    def selection(self) -> SelectionConfig:
        return SelectionConfig(self.R, self.gate_mode)

    @property
    def critical_R(self) -> int:
        return self.R if self.ago_R is None else self.ago_R

    def strategy(self, k: int | None = None):
        k = self.merge_k if k is None else k
        if self.merge_strategy == "uniform_topk":
            return UniformTopK(k)
        alpha = 1.0 / self.r if self.merge_alpha is None else self.merge_alpha
        return FrequencyWeighted(k, alpha)

    def to_dict(self) -> dict:
        return asdict(self)


def dense_lora_baseline(cfg: TrainConfig) -> TrainConfig:
    """Plain sequential LoRA: every expert always on, no penalty, full merge."""
    return replace(cfg, R=cfg.r, merge_k=cfg.r, lam=0.0, gate_mode="binary",
                   merge_strategy="uniform_topk", ago_R=None)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, cfg: TrainConfig) -> None:
    """In-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractViolation(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.lr * ((m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p)


@dataclass
class TaskResult:
    task_id: int
    final_loss: float
    merged_sets: list[tuple[int, ...]]
    collision_series: list[tuple[int, float]]
    final_collision: float = 0.0
    checkpoint: dict | None = None
    checkpoint_path: str | None = None


def train_task(model: AdaptedModel, dataset: TaskDataset, registry: PastRegistry,
               cfg: TrainConfig, rng: SeededRng) -> TaskResult:
    """Train the model's fresh pools and routers on one task.

    ``model.prototypes`` must already hold this task's class prototypes.
    """
    params = model.parameters()
    state = AdamWState()
    sel = cfg.selection
    n = dataset.X_train.shape[0]
    tail_start = cfg.steps_per_task - max(1, cfg.steps_per_task // 10)
    tail_losses = []
    series = []
    for step in range(1, cfg.steps_per_task + 1):
        idx = rng.integers(n, size=cfg.batch_size)
        X, y = dataset.X_train[idx], dataset.y_train[idx]
        _, trace = forward_train(model, X, sel, record=True)
        k_curr = current_critical_sets(model, cfg.critical_R)
        loss, _, _ = total_loss(model, trace, y, cfg.lam, registry, k_curr)
        if not math.isfinite(loss):
            raise NumericFailure(f"task {dataset.task_id}: loss is {loss} at step {step}")
        if step % cfg.collision_every == 0:
            series.append((step, collision_value(model, registry, k_curr)))
        grads = backward(model, trace, y, cfg.lam, registry, k_curr)
        adamw_step(params, grads, state, cfg)
        model.bump()
        if step > tail_start:
            tail_losses.append(loss)
    final = float(np.mean(tail_losses))
    collision = collision_value(model, registry, current_critical_sets(model, cfg.critical_R))
    log.info("task %d trained: tail loss %.4f, collision %.6f", dataset.task_id, final, collision)
    return TaskResult(dataset.task_id, final, [], series, collision)


def collision_value(model: AdaptedModel, registry: PastRegistry, k_curr) -> float:
    """Sum over layers of the orthogonality penalty for the current critical sets."""
    return float(sum(ago_loss(registry.layer(p.layer_id), p, k_curr[l])
                     for l, p in enumerate(model.pools)))


def end_of_task(model: AdaptedModel, registry: PastRegistry, cfg: TrainConfig,
                task_id: int) -> list[tuple[int, ...]]:
    """Fold the top experts into the backbone and register the task's critical columns.

    Returns the merged index set per layer.
    """
    strategy = cfg.strategy()
    merged = []
    for l, (layer, pool, mem) in enumerate(zip(model.backbone.layers, model.pools, model.memories)):
        merged.append(merge_weights(pool, mem, strategy).support)
        layer.W0 = merge_into(layer.W0, pool, mem, strategy)
        register_task(registry, pool.layer_id, task_id, pool, mem, cfg.critical_R)
    model.bump()
    return merged


@dataclass
class SequenceResult:
    matrix: np.ndarray
    tasks: list[TaskResult]
    memories: list[list[ActivationMemory]]
    registry: PastRegistry
    zero_shot: list[float]
    pristine: FrozenBackbone
    final_backbone: FrozenBackbone


def build_backbone(cfg: TrainConfig, d_in: int) -> FrozenBackbone:
    return FrozenBackbone.init(d_in, cfg.d_model, cfg.n_layers,
                               SeededRng(cfg.seed).derive("backbone"), cfg.temperature)


def run_sequence(tasks: list[TaskDataset], cfg: TrainConfig,
                 on_task_end: Callable[[int, AdaptedModel, TaskResult], None] | None = None,
                 ) -> SequenceResult:
    """Train on each task in order and evaluate every snapshot on every task.

    Row ``t`` of the returned matrix holds test accuracies (%) on all tasks
    after training task ``t``. ``on_task_end`` is called after each merge,
    before the pools are discarded.
    """
    if not tasks:
        raise ContractViolation("need at least one task")
    root = SeededRng(cfg.seed)
    pristine = build_backbone(cfg, tasks[0].X_train.shape[1])
    protos = [prototypes_from_inputs(pristine, t.class_inputs) for t in tasks]
    backbone = pristine.copy()
    registry = PastRegistry()
    rows, results, memories = [], [], []
    for t, task in enumerate(tasks):
        model = AdaptedModel.attach(backbone, cfg.r, root.derive("adapter", t),
                                    forward_scale=cfg.forward_scale)
        model.prototypes = protos[t]
        result = train_task(model, task, registry, cfg, root.derive("batches", t))
        result.merged_sets = end_of_task(model, registry, cfg, task.task_id)
        memories.append([m.copy() for m in model.memories])
        if on_task_end is not None:
            on_task_end(t, model, result)
        snapshot = backbone.copy()
        rows.append([evaluate(snapshot, other, protos[j]) for j, other in enumerate(tasks)])
        results.append(result)
    zero_shot = [evaluate(pristine, task, protos[j]) for j, task in enumerate(tasks)]
    return SequenceResult(np.array(rows), results, memories, registry, zero_shot,
                          pristine, backbone)
