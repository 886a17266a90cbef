"""Synthetic multi-domain task sequence and the Transfer / Average / Last metrics.

Each task draws its own class prototypes and a random orthogonal rotation of
the shared input space; samples are rotated noisy copies of the prototypes.
The rotation keeps class geometry intact, so a frozen model classifies the
new domain above chance while still benefiting from adaptation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core_math import ContractViolation, SeededRng
from .model import forward_eval


@dataclass(frozen=True)
class SyntheticTaskSpec:
    T: int = 5
    C: int = 10
    d_in: int = 32
    n_train: int = 25
    n_test: int = 40
    separation: float = 1.0
    noise: float = 0.35

    def __post_init__(self):
        for name in ("T", "C", "d_in", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if not self.noise > 0:
            raise ContractViolation("noise must be positive")
        if not self.separation > 0:
            raise ContractViolation("separation must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskDataset:
    task_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    class_inputs: np.ndarray  # C x d_in, rotated noiseless prototypes
    rotation: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.class_inputs.shape[0]


def random_rotation(d: int, rng: SeededRng) -> np.ndarray:
    """Orthogonal matrix from the QR factorisation of a Gaussian matrix.

    Column signs are fixed by the diagonal of R so the result is unique.
    """
    Q, R = np.linalg.qr(rng.normal((d, d)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def gen_tasks(spec: SyntheticTaskSpec, rng: SeededRng) -> list[TaskDataset]:
    tasks = []
    for t in range(spec.T):
        trng = rng.derive("task", t)
        dirs = trng.normal((spec.C, spec.d_in))
        protos = spec.separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        Q = random_rotation(spec.d_in, trng.derive("rotation"))

        def draw(n_per_class: int, stream: SeededRng):
            noise = stream.normal((spec.C * n_per_class, spec.d_in), scale=spec.noise)
            y = np.repeat(np.arange(spec.C), n_per_class)
            return (protos[y] + noise) @ Q.T, y

        X_tr, y_tr = draw(spec.n_train, trng.derive("train"))
        X_te, y_te = draw(spec.n_test, trng.derive("test"))
        tasks.append(TaskDataset(t + 1, X_tr, y_tr, X_te, y_te, protos @ Q.T, Q))
    return tasks


def evaluate(backbone, dataset: TaskDataset, prototypes) -> float:
    """Test accuracy in percent of argmax cosine-similarity predictions."""
    logits = forward_eval(backbone, dataset.X_test, prototypes)
    pred = np.argmax(logits, axis=1)
    return 100.0 * float(np.mean(pred == dataset.y_test))


@dataclass
class Metric:
    per_task: list[float | None]
    overall: float | None


def _matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise ContractViolation(f"accuracy matrix must be square and non-empty, got {M.shape}")
    return M


def transfer_metric(M) -> Metric:
    """Column ``j`` averaged over the rows trained before task ``j``; j >= 2 only."""
    M = _matrix(M)
    T = M.shape[0]
    per = [None] + [float(np.mean(M[:j, j])) for j in range(1, T)]
    defined = [v for v in per if v is not None]
    return Metric(per, float(np.mean(defined)) if defined else None)


def average_metric(M) -> Metric:
    M = _matrix(M)
    per = [float(v) for v in M.mean(axis=0)]
    return Metric(per, float(np.mean(per)))


def last_metric(M) -> Metric:
    M = _matrix(M)
    per = [float(v) for v in M[-1]]
    return Metric(per, float(np.mean(per)))


def metrics_report(M) -> dict:
    out = {}
    for name, fn in (("transfer", transfer_metric), ("average", average_metric),
                     ("last", last_metric)):
        m = fn(M)
        out[name] = {"overall": m.overall, "per_task": m.per_task}
    return out


def accuracy_matrix(rows: Sequence[Sequence[float]]) -> np.ndarray:
    M = _matrix(rows)
    if np.any(M < 0) or np.any(M > 100):
        raise ContractViolation("accuracies must lie in [0, 100]")
    return M
