import json
import subprocess
import sys

import numpy as np
import pytest

from tinyaction.cli import main
from tinyaction.fusion import write_labels_csv, write_scores_csv, ScoreMatrix
from tinyaction.synthdata import DatasetSpec, load_splits

TINY = DatasetSpec(num_classes=4, head_class_count=8, tail_ratio=0.7, frames=8, height=4, width=4,
                   downsample=2, num_groups=2, seed=5)
TINY_TRAIN = {"epochs": 4, "hidden": 8, "clips": 4, "batch_size": 8}


def write_tiny_manifest(root, **extra):
    (root / "spec.cfg").write_text(TINY.to_text())
    manifest = {"dataset_spec": "spec.cfg", "output_dir": "out", "replicates": 1, "train": TINY_TRAIN,
                "ensemble_epochs": [2, 4], "ensemble_size": 3}
    manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root / "manifest.json"


# -- gen-data --------------------------------------------------------------------

def test_gen_data_byte_identical(tmp_path):
    (tmp_path / "spec.cfg").write_text(TINY.to_text())
    assert main(["gen-data", "--spec", str(tmp_path / "spec.cfg"), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--spec", str(tmp_path / "spec.cfg"), "--out", str(tmp_path / "b")]) == 0
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.bin").read_bytes() == (tmp_path / "b" / f"{split}.bin").read_bytes()


def test_gen_data_missing_key(tmp_path, capsys):
    text = "\n".join(ln for ln in TINY.to_text().splitlines() if not ln.startswith("noise_sr")) + "\n"
    (tmp_path / "spec.cfg").write_text(text)
    assert main(["gen-data", "--spec", str(tmp_path / "spec.cfg"), "--out", str(tmp_path / "a")]) == 1
    err = capsys.readouterr().err
    assert "tinyaction gen-data: error:" in err and "noise_sr" in err
    assert not (tmp_path / "a").exists()


def test_gen_data_print_counts(tmp_path, capsys):
    (tmp_path / "spec.cfg").write_text(TINY.to_text())
    main(["gen-data", "--spec", str(tmp_path / "spec.cfg"), "--out", str(tmp_path / "d"), "--print-counts"])
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["class", "group", "train", "val", "test"]
    splits = load_splits(tmp_path / "d")
    for c, line in enumerate(lines[1:]):
        cols = [int(v) for v in line.split("\t")]
        assert cols[0] == c and cols[1] == splits[0].group_map[c]
        assert cols[2:] == [int(ds.label_matrix()[:, c].sum()) for ds in splits]


# -- train / distill / fuse ------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.cfg").write_text(TINY.to_text())
    (root / "train.cfg").write_text("".join(f"{k} = {v}\n" for k, v in TINY_TRAIN.items()))
    assert main(["gen-data", "--spec", str(root / "spec.cfg"), "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "train.cfg"),
                 "--out", str(root / "lr"), "--balance", "0.5"]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "train.cfg"), "--tier", "sr",
                 "--out", str(root / "sr"), "--balance", "0.5"]) == 0
    assert main(["distill", "--data", str(root / "data"), "--config", str(root / "train.cfg"),
                 "--teacher", str(root / "sr" / "epoch_4.ckpt"), "--alpha", "0.5", "--balance", "0.5",
                 "--out", str(root / "kd")]) == 0
    _, val, test = load_splits(root / "data")
    write_labels_csv(root / "labels_val.csv", val.ids, val.label_matrix())
    write_labels_csv(root / "labels_test.csv", test.ids, test.label_matrix())
    return root


def test_train_outputs(trained):
    rep = json.loads((trained / "lr" / "report.json").read_text())
    assert len(rep["losses"]) == 4 and rep["checkpoints"][-1] == "epoch_4.ckpt"
    assert (trained / "lr" / "scores_test.csv").read_text().startswith("sample_id,class_0,")
    assert (trained / "kd" / "knowledge.csv").is_file()


def test_fuse_and_eval(trained, tmp_path):
    # validation scores are the test scores here; the command only checks ids and shapes
    scores = [str(trained / m / "scores_test.csv") for m in ("lr", "sr", "kd")]
    out = tmp_path / "fuse.json"
    assert main(["fuse", "--scores", *scores, "--weights", "1,2,1", "--val-scores", *scores,
                 "--val-labels", str(trained / "labels_test.csv"), "--labels", str(trained / "labels_test.csv"),
                 "--out-scores", str(tmp_path / "fused.csv"), "--out-thresholds", str(tmp_path / "th.csv"),
                 "--out", str(out)]) == 0
    metrics = json.loads(out.read_text())
    assert metrics["weights"] == [1.0, 2.0, 1.0] and len(metrics["thresholds"]) == TINY.num_classes
    assert main(["eval", "--scores", str(tmp_path / "fused.csv"), "--labels", str(trained / "labels_test.csv"),
                 "--thresholds", str(tmp_path / "th.csv"), "--fallback-argmax", "--out", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text()) == metrics["test"]


def test_fuse_weight_count_mismatch(trained, capsys):
    s = str(trained / "lr" / "scores_test.csv")
    assert main(["fuse", "--scores", s, s, "--weights", "1", "--val-scores", s,
                 "--val-labels", str(trained / "labels_test.csv"), "--out", "/dev/null"]) == 1
    assert "--weights" in capsys.readouterr().err


# -- eval ------------------------------------------------------------------------

def _eval_files(tmp_path, scores, labels):
    ids = np.arange(len(labels))
    write_scores_csv(tmp_path / "s.csv", ScoreMatrix(ids, np.asarray(scores, dtype=float)))
    write_labels_csv(tmp_path / "l.csv", ids, np.asarray(labels))
    return ["eval", "--scores", str(tmp_path / "s.csv"), "--labels", str(tmp_path / "l.csv")]


def test_eval_perfect(tmp_path, capsys):
    y = [[1, 0, 1], [0, 1, 0]]
    assert main(_eval_files(tmp_path, y, y)) == 0
    assert json.loads(capsys.readouterr().out) == {"macro_f1": 1.0, "micro_f1": 1.0, "sample_f1": 1.0}


def test_eval_worked_case(tmp_path, capsys):
    assert main(_eval_files(tmp_path, [[0.9, 0.1], [0.8, 0.7]], [[1, 1], [0, 1]])) == 0
    assert json.loads(capsys.readouterr().out)["sample_f1"] == pytest.approx(2 / 3, abs=1e-15)


def test_eval_malformed_header(tmp_path, capsys):
    args = _eval_files(tmp_path, [[0.5]], [[1]])
    (tmp_path / "s.csv").write_text("id,score\n0,0.5\n")
    assert main(args) == 1
    assert "sample_id,class_0" in capsys.readouterr().err


def test_eval_missing_label_row(tmp_path, capsys):
    args = _eval_files(tmp_path, [[0.5], [0.2]], [[1], [0]])
    write_labels_csv(tmp_path / "l.csv", [0], np.array([[1]]))
    assert main(args) == 1
    assert "sample id 1" in capsys.readouterr().err


def test_eval_output_is_canonical(tmp_path, capsys):
    main(_eval_files(tmp_path, [[0.9, 0.1]], [[1, 0]]))
    text = capsys.readouterr().out
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"


# -- pipeline --------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert main(["pipeline", "--manifest", str(write_tiny_manifest(root))]) == 0
    return root


def test_pipeline_emits_all_fields(tiny_pipeline):
    from tinyaction.experiment import F1_FIELDS
    report = json.loads((tiny_pipeline / "out" / "report.json").read_text())
    assert len(F1_FIELDS) == 7
    assert set(report["replicates"][0]["f1"]) == set(F1_FIELDS)
    assert set(report["summary"]["f1"]) == set(F1_FIELDS)
    assert all(0.0 <= v <= 1.0 for v in report["replicates"][0]["f1"].values())


def _eval(args, tmp_path):
    out = tmp_path / "m.json"
    assert main(args + ["--out", str(out)]) == 0
    return json.loads(out.read_text())["sample_f1"]


def test_report_recomputable_with_eval(tiny_pipeline, tmp_path):
    rep_dir = tiny_pipeline / "out" / "rep_0"
    rep = json.loads((tiny_pipeline / "out" / "report.json").read_text())["replicates"][0]
    labels = ["--labels", str(rep_dir / "labels_test.csv")]
    plain = {"baseline_lr": "baseline", "uniform_sampling": "uniform", "data_balance": "balance",
             "sr_teacher": "teacher", "sr_kd_student": "student"}
    for field, model in plain.items():
        got = _eval(["eval", "--scores", str(rep_dir / model / "scores_test.csv")] + labels, tmp_path)
        assert abs(got - rep["f1"][field]) <= 1e-12, field
    post = ["--groups", str(rep_dir / "groups.csv"), "--fallback-argmax"]
    got = _eval(["eval", "--scores", str(rep_dir / "ensemble" / "scores_test.csv"),
                 "--thresholds", str(rep_dir / "ensemble" / "thresholds.csv")] + labels + post, tmp_path)
    assert abs(got - rep["f1"]["ensemble_postproc"]) <= 1e-12
    model, epoch = rep["best_single_by_val"].split("@")
    got = _eval(["eval", "--scores", str(rep_dir / model / f"scores_test_epoch_{epoch}.csv"),
                 "--thresholds", str(rep_dir / "singles" / f"{model}_epoch_{epoch}_thresholds.csv")]
                + labels + post, tmp_path)
    assert abs(got - rep["f1"]["best_single_calibrated"]) <= 1e-12


def test_pipeline_missing_dataset(tmp_path, capsys):
    manifest = write_tiny_manifest(tmp_path, dataset="nowhere")
    assert main(["pipeline", "--manifest", str(manifest)]) == 1
    assert "nowhere" in capsys.readouterr().err
    assert not (tmp_path / "out" / "report.json").exists()


def test_pipeline_stage_failure_names_stage(tmp_path, capsys):
    manifest = write_tiny_manifest(tmp_path, ensemble_epochs=[99])
    assert main(["pipeline", "--manifest", str(manifest)]) == 1
    err = capsys.readouterr().err
    assert "stage 'ensemble'" in err and "seed 0" in err
    assert not (tmp_path / "out" / "report.json").exists()


def test_pipeline_unknown_manifest_key(tmp_path, capsys):
    manifest = write_tiny_manifest(tmp_path, epochs=3)
    assert main(["pipeline", "--manifest", str(manifest)]) == 1
    assert "unknown manifest key 'epochs'" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "tinyaction", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "distill", "fuse", "eval", "pipeline"):
        assert cmd in res.stdout


def test_bad_log_level(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TINYACTION_LOG", "loud")
    assert main(_eval_files(tmp_path, [[0.5]], [[1]])) == 1
    assert "TINYACTION_LOG" in capsys.readouterr().err
