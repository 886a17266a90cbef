"""On-disk formats: run config, task bundles, adapter checkpoints and CSV tables.

Floats go through ``json`` (shortest round-trip repr), so save -> load -> save
reproduces files byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .ago import PastRegistry, PastTaskRecord
from .bench import SyntheticTaskSpec, TaskDataset
from .core_math import ContractViolation, fnv1a64
from .expert_pool import ExpertPool
from .router import ActivationMemory, Router
from .trainer import TrainConfig

FORMAT_VERSION = 1


def _field_schema(tp) -> dict:
    tp = str(tp)
    if tp.startswith("int | None"):
        return {"type": ["integer", "null"]}
    if tp.startswith("float | None"):
        return {"type": ["number", "null"]}
    if tp.startswith("int"):
        return {"type": "integer"}
    if tp.startswith("float"):
        return {"type": "number"}
    if tp.startswith("str"):
        return {"type": "string"}
    raise TypeError(tp)


def run_config_schema() -> dict:
    props = {}
    for cls in (TrainConfig, SyntheticTaskSpec):
        for f in fields(cls):
            props[f.name] = _field_schema(f.type)
    props["out_dir"] = {"type": "string"}
    return {"type": "object", "properties": props, "additionalProperties": False}


@dataclass
class RunConfig:
    train: TrainConfig
    tasks: SyntheticTaskSpec
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None) -> "RunConfig":
        try:
            jsonschema.validate(doc, run_config_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "config"
            raise ContractViolation(f"{where}: {exc.message}") from None
        doc = dict(doc)
        if seed is not None:
            doc["seed"] = seed
        train_keys = {f.name for f in fields(TrainConfig)}
        task_keys = {f.name for f in fields(SyntheticTaskSpec)}
        train = TrainConfig(**{k: v for k, v in doc.items() if k in train_keys})
        tasks = SyntheticTaskSpec(**{k: v for k, v in doc.items() if k in task_keys})
        return cls(train, tasks, doc.get("out_dir"))

    def to_dict(self) -> dict:
        out = {**self.train.to_dict(), **self.tasks.to_dict()}
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        return out

    def digest(self) -> str:
        return config_digest(self.to_dict())


def load_run_config(path, seed: int | None = None) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractViolation(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(doc, seed)


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_digest(doc: dict) -> str:
    return f"{fnv1a64(canonical_json(doc).encode('utf-8')):016x}"


def write_json(path, doc: Any) -> None:
    Path(path).write_text(canonical_json(doc) + "\n")


def read_json(path) -> Any:
    with open(path) as fh:
        return json.load(fh)


# task bundles

def tasks_to_dict(tasks: Sequence[TaskDataset], spec: SyntheticTaskSpec, seed: int) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "spec": spec.to_dict(),
        "tasks": [
            {
                "task_id": t.task_id,
                "X_train": t.X_train.tolist(),
                "y_train": t.y_train.tolist(),
                "X_test": t.X_test.tolist(),
                "y_test": t.y_test.tolist(),
                "class_inputs": t.class_inputs.tolist(),
                "rotation": t.rotation.tolist(),
            }
            for t in tasks
        ],
    }


def tasks_from_dict(doc: dict) -> list[TaskDataset]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractViolation("unsupported task bundle version")
    try:
        return [
            TaskDataset(
                int(t["task_id"]),
                np.array(t["X_train"], dtype=np.float64),
                np.array(t["y_train"], dtype=np.int64),
                np.array(t["X_test"], dtype=np.float64),
                np.array(t["y_test"], dtype=np.int64),
                np.array(t["class_inputs"], dtype=np.float64),
                np.array(t["rotation"], dtype=np.float64),
            )
            for t in doc["tasks"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractViolation(f"malformed task bundle: {exc}") from None


# adapter checkpoints

@dataclass
class LayerCheckpoint:
    pool: ExpertPool
    router: Router
    memory: ActivationMemory
    merged_set: tuple[int, ...]
    merge_weights: np.ndarray
    merge_strategy: dict
    critical_set: tuple[int, ...]


@dataclass
class AdapterCheckpoint:
    task_id: int
    layers: list[LayerCheckpoint]
    config_digest: str
    collision_series: list[tuple[int, float]]
    final_collision: float

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "task_id": self.task_id,
            "config_digest": self.config_digest,
            "final_collision": self.final_collision,
            "collision_series": [[s, v] for s, v in self.collision_series],
            "layers": [
                {
                    "layer_id": lc.pool.layer_id,
                    "d_out": lc.pool.d_out,
                    "d_in": lc.pool.d_in,
                    "r": lc.pool.r,
                    "forward_scale": lc.pool.forward_scale,
                    "experts": [
                        {"b": lc.pool.B[:, i].tolist(), "a": lc.pool.A[i].tolist()}
                        for i in range(lc.pool.r)
                    ],
                    "frequencies": [int(c) for c in lc.memory.counts],
                    "samples_seen": int(lc.memory.samples_seen),
                    "router": lc.router.W.tolist(),
                    "merged_set": list(lc.merged_set),
                    "merge_weights": lc.merge_weights.tolist(),
                    "merge_strategy": lc.merge_strategy,
                    "critical_set": list(lc.critical_set),
                }
                for lc in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AdapterCheckpoint":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ContractViolation("unsupported checkpoint version")
        try:
            layers = []
            for ld in doc["layers"]:
                B = np.array([e["b"] for e in ld["experts"]], dtype=np.float64).T
                A = np.array([e["a"] for e in ld["experts"]], dtype=np.float64)
                if B.shape != (ld["d_out"], ld["r"]) or A.shape != (ld["r"], ld["d_in"]):
                    raise ContractViolation(f"layer {ld['layer_id']}: expert shapes disagree")
                layers.append(LayerCheckpoint(
                    pool=ExpertPool(ld["layer_id"], B, A, ld["forward_scale"]),
                    router=Router(np.array(ld["router"], dtype=np.float64)),
                    memory=ActivationMemory(np.array(ld["frequencies"], dtype=np.int64),
                                            int(ld["samples_seen"])),
                    merged_set=tuple(ld["merged_set"]),
                    merge_weights=np.array(ld["merge_weights"], dtype=np.float64),
                    merge_strategy=ld["merge_strategy"],
                    critical_set=tuple(ld["critical_set"]),
                ))
            return cls(int(doc["task_id"]), layers, doc["config_digest"],
                       [(int(s), float(v)) for s, v in doc["collision_series"]],
                       float(doc["final_collision"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractViolation(f"malformed checkpoint: {exc}") from None

    def past_records(self) -> dict[str, PastTaskRecord]:
        """The registry entries this task contributed, rebuilt from the pools."""
        out = {}
        for lc in self.layers:
            idx = lc.critical_set
            out[lc.pool.layer_id] = PastTaskRecord(
                self.task_id, idx, lc.pool.B[:, list(idx)].copy(),
                tuple(int(lc.memory.counts[i]) for i in idx))
        return out


def save_checkpoint(path, ckpt: AdapterCheckpoint) -> None:
    write_json(path, ckpt.to_dict())


def load_checkpoint(path) -> AdapterCheckpoint:
    return AdapterCheckpoint.from_dict(read_json(path))


def registry_from_checkpoints(ckpts: Sequence[AdapterCheckpoint]) -> PastRegistry:
    reg = PastRegistry()
    for ck in sorted(ckpts, key=lambda c: c.task_id):
        for layer_id, rec in ck.past_records().items():
            reg.layers.setdefault(layer_id, []).append(rec)
    return reg


# CSV tables

def matrix_to_csv(M) -> str:
    M = np.asarray(M)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"task_{j + 1}" for j in range(M.shape[1])])
    for row in M:
        w.writerow([f"{v:.2f}" for v in row])
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        raise ContractViolation("empty matrix CSV")
    header, body = rows[0], rows[1:]
    T = len(header)
    if header != [f"task_{j + 1}" for j in range(T)]:
        raise ContractViolation(f"matrix header must be task_1..task_{T}")
    if len(body) != T:
        raise ContractViolation(f"expected {T} rows, found {len(body)}")
    for i, row in enumerate(body, start=1):
        if len(row) != T:
            raise ContractViolation(f"row {i} has {len(row)} values, expected {T}")
    try:
        return np.array([[float(v) for v in row] for row in body])
    except ValueError as exc:
        raise ContractViolation(f"non-numeric matrix entry: {exc}") from None


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """CSV with floats in fixed point (6 decimals) and booleans as true/false."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
