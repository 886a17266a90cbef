"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .bench import gen_tasks, metrics_report
from .core_math import ContractViolation, NumericFailure, SeededRng
from .expert_pool import merge_weights
from .model import prototypes_from_inputs
from .router import critical_set
from .serialization import (
    AdapterCheckpoint,
    LayerCheckpoint,
    load_checkpoint,
    load_run_config,
    matrix_from_csv,
    matrix_to_csv,
    read_json,
    rows_to_csv,
    save_checkpoint,
    tasks_from_dict,
    tasks_to_dict,
    write_json,
)
from .trainer import build_backbone, run_sequence

log = logging.getLogger("rank1pool")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def cmd_gen_tasks(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    tasks = gen_tasks(cfg.tasks, SeededRng(cfg.train.seed).derive("data"))
    write_json(args.out, tasks_to_dict(tasks, cfg.tasks, cfg.train.seed))
    return EXIT_OK


def collision_rows(task_series) -> list[dict]:
    return [{"task_id": task_id, "step": step, "value": value}
            for task_id, series in task_series for step, value in series]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    tasks = tasks_from_dict(read_json(args.tasks))
    out = Path(args.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    tc = cfg.train

    def on_task_end(t, model, result):
        layers = []
        for pool, router, mem in zip(model.pools, model.routers, model.memories):
            gate = merge_weights(pool, mem, tc.strategy())
            strategy = {"name": tc.merge_strategy, "k": tc.merge_k}
            if tc.merge_strategy == "frequency_weighted":
                strategy["alpha"] = tc.strategy().alpha
            layers.append(LayerCheckpoint(pool.copy(), router, mem.copy(), gate.support,
                                          gate.weights, strategy,
                                          critical_set(mem, tc.critical_R)))
        ckpt = AdapterCheckpoint(result.task_id, layers, digest, result.collision_series,
                                 result.final_collision)
        path = ckpt_dir / f"task_{result.task_id}.json"
        save_checkpoint(path, ckpt)
        result.checkpoint_path = str(path)

    res = run_sequence(tasks, tc, on_task_end=on_task_end)
    matrix_csv = matrix_to_csv(res.matrix)
    (out / "matrix.csv").write_text(matrix_csv)
    write_json(out / "metrics.json", metrics_report(matrix_from_csv(matrix_csv)))
    (out / "collision.csv").write_text(
        rows_to_csv(collision_rows((r.task_id, r.collision_series) for r in res.tasks),
                    ["task_id", "step", "value"]))
    log.info("wrote %d checkpoints to %s", len(res.tasks), ckpt_dir)
    return EXIT_OK


def cmd_report(args) -> int:
    M = matrix_from_csv(Path(args.matrix).read_text())
    print(json.dumps(metrics_report(M), indent=2, sort_keys=True))
    return EXIT_OK


def _load_checkpoints(paths) -> list[AdapterCheckpoint]:
    return sorted((load_checkpoint(p) for p in paths), key=lambda c: c.task_id)


def cmd_analyze(args) -> int:
    ckpts = _load_checkpoints(args.checkpoint)
    if args.kind == "frob":
        rows = [row for ck in ckpts for row in analysis.frob_rows(ck.task_id, [l.pool for l in ck.layers])]
    elif args.kind == "heatmap":
        rows = []
        for ck in ckpts:
            k = ck.layers[0].merge_strategy["k"]
            rows += analysis.heatmap_rows([[l.memory for l in ck.layers]],
                                          [l.pool.layer_id for l in ck.layers], k, [ck.task_id])
    elif args.kind == "collision":
        rows = collision_rows((ck.task_id, ck.collision_series) for ck in ckpts)
    else:
        rows = _ablation(args, ckpts)
    text = rows_to_csv(rows, _COLUMNS[args.kind])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


_COLUMNS = {
    "frob": ["task_id", "layer_id", "position", "expert_index", "b_norm", "a_norm", "score"],
    "heatmap": ["task_id", "layer_id", "expert_index", "count", "normalized_frequency",
                "merged_flag"],
    "collision": ["task_id", "step", "value"],
    "ablate": ["task_id", "layer_id", "mode", "position", "experts", "accuracy_full",
               "accuracy_ablated", "delta"],
}


def _ablation(args, ckpts) -> list[dict]:
    if not (args.config and args.tasks):
        raise ContractViolation("ablate needs --config and --tasks")
    cfg = load_run_config(args.config, args.seed)
    for ck in ckpts:
        if ck.config_digest != cfg.digest():
            raise ContractViolation(f"checkpoint for task {ck.task_id} was made with another config")
    ids = [ck.task_id for ck in ckpts]
    if ids != list(range(1, len(ids) + 1)):
        raise ContractViolation("ablate needs the checkpoints of tasks 1..t without gaps")
    tasks = tasks_from_dict(read_json(args.tasks))
    pristine = build_backbone(cfg.train, tasks[0].X_train.shape[1])
    base = pristine.copy()
    for ck in ckpts[:-1]:
        for layer, lc in zip(base.layers, ck.layers):
            layer.W0 = layer.W0 + (lc.pool.B * lc.merge_weights) @ lc.pool.A
    target = ckpts[-1]
    task = tasks[target.task_id - 1]
    protos = prototypes_from_inputs(pristine, task.class_inputs)
    return analysis.ablation_rows(target.task_id, base, [l.pool for l in target.layers],
                                  [l.memory for l in target.layers], task, protos,
                                  cfg.train.strategy())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rank1pool", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="write a synthetic task bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train", help="train the task sequence and write checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="Transfer/Average/Last from an accuracy matrix CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("analyze", help="diagnostic tables from checkpoints")
    p.add_argument("kind", choices=["frob", "ablate", "collision", "heatmap"])
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--config")
    p.add_argument("--tasks")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
