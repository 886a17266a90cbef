"""Continual learning with a decomposable pool of rank-1 LoRA experts."""

from .ago import PastRegistry, PastTaskRecord, ago_grad, ago_loss, l_orth_dense, register_task
from .bench import (
    SyntheticTaskSpec,
    TaskDataset,
    average_metric,
    evaluate,
    gen_tasks,
    last_metric,
    metrics_report,
    transfer_metric,
)
from .core_math import (
    ContractViolation,
    NumericFailure,
    OracleFailure,
    SeededRng,
    finite_diff_grad,
    matmul,
    outer,
    top_k,
)
from .estimator import ExpertPoolContinualClassifier
from .expert_pool import (
    ExpertPool,
    FrequencyWeighted,
    GateVector,
    UniformTopK,
    apply,
    from_dense,
    init_pool,
    merge_into,
    to_dense_update,
)
from .router import ActivationMemory, Router, SelectionConfig
from .trainer import TrainConfig, dense_lora_baseline, run_sequence

__version__ = "0.1.0"
