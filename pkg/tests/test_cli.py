import json

import pytest

from rank1pool.cli import main
from rank1pool.serialization import load_checkpoint, read_json, save_checkpoint

SMALL = {"T": 2, "C": 4, "d_in": 12, "n_train": 10, "n_test": 15, "steps_per_task": 30,
         "d_model": 16, "r": 6, "R": 4, "merge_k": 2, "batch_size": 16}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def trained(tmp_path, config):
    tasks = tmp_path / "tasks.json"
    assert main(["gen-tasks", "--config", str(config), "--out", str(tasks)]) == 0
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--tasks", str(tasks),
                 "--out-dir", str(out)]) == 0
    return tmp_path, config, tasks, out


def test_gen_tasks_default_sizes_and_determinism(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen-tasks", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["gen-tasks", "--config", str(cfg), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = read_json(a)
    assert len(doc["tasks"]) == 5
    assert all(len(t["y_train"]) == 250 and len(t["y_test"]) == 400 for t in doc["tasks"])


def test_seed_override_changes_output(tmp_path, config):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["gen-tasks", "--config", str(config), "--out", str(a)])
    main(["gen-tasks", "--config", str(config), "--out", str(b), "--seed", "7"])
    assert a.read_bytes() != b.read_bytes()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["gen-tasks", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_outputs(trained, capsys):
    _, _, _, out = trained
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["task_1.json",
                                                                      "task_2.json"]
    lines = (out / "matrix.csv").read_text().splitlines()
    assert lines[0] == "task_1,task_2" and len(lines) == 3
    assert main(["report", "--matrix", str(out / "matrix.csv")]) == 0
    assert json.loads(capsys.readouterr().out) == read_json(out / "metrics.json")


def test_checkpoint_round_trip_is_byte_identical(trained, tmp_path):
    _, _, _, out = trained
    src = out / "checkpoints" / "task_2.json"
    copy = tmp_path / "copy.json"
    save_checkpoint(copy, load_checkpoint(src))
    assert copy.read_bytes() == src.read_bytes()


def test_analyze_outputs(trained, capsys):
    _, config, tasks, out = trained
    ckpts = [str(out / "checkpoints" / f"task_{t}.json") for t in (1, 2)]
    coll = out / "coll.csv"
    assert main(["analyze", "collision", "--checkpoint", *ckpts, "--out", str(coll)]) == 0
    assert coll.read_bytes() == (out / "collision.csv").read_bytes()

    assert main(["analyze", "frob", "--checkpoint", ckpts[0]]) == 0
    rows = capsys.readouterr().out.splitlines()
    header = rows[0].split(",")
    scores = [float(r.split(",")[header.index("score")]) for r in rows[1:]
              if r.split(",")[header.index("layer_id")] == "layer_0"]
    assert scores == sorted(scores) and len(scores) == 6

    assert main(["analyze", "heatmap", "--checkpoint", *ckpts]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1 + 2 * 2 * 6

    assert main(["analyze", "ablate", "--checkpoint", *ckpts, "--config", str(config),
                 "--tasks", str(tasks)]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1 + 2 * 3


def test_missing_checkpoint_exits_4(tmp_path):
    assert main(["analyze", "frob", "--checkpoint", str(tmp_path / "nope.json")]) == 4


def test_report_on_published_matrix(published_matrix_path, capsys):
    assert main(["report", "--matrix", str(published_matrix_path)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert abs(rep["last"]["overall"] - 77.92) < 0.01
    assert rep["transfer"]["per_task"][0] is None


def test_report_edge_cases(tmp_path, capsys):
    one = tmp_path / "one.csv"
    one.write_text("task_1\n55.00\n")
    assert main(["report", "--matrix", str(one)]) == 0
    assert json.loads(capsys.readouterr().out)["transfer"]["overall"] is None
    bad = tmp_path / "bad.csv"
    bad.write_text("task_1,task_2\n1.00,2.00\n3.00\n")
    assert main(["report", "--matrix", str(bad)]) == 2
