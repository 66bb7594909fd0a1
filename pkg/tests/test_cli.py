import csv
import json

import numpy as np
import pytest

from icepll import cli, nn
from icepll.experiments import SUMMARY_COLUMNS
from icepll.labels import EggCode, write_polygon_file


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["--out", str(out), "gen-data", "--n-samples", "200", "--patch-size", "8"]) == 0
    return out / "manifest.json"


def test_gen_data_manifest(manifest):
    meta = json.loads(manifest.read_text())
    assert meta["meta"]["seed"] == 0


def test_train_evaluate(tmp_path, manifest, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"encoding": "one_hot", "loss": {"kind": "cce"}, "class_weights_enabled": True,
                               "train": {"epochs": 2, "batch_size": 32, "seed": 1}}))
    assert cli.main(["--out", str(tmp_path), "train", "--config", str(cfg), "--data", str(manifest)]) == 0
    hist = json.loads((tmp_path / "history.json").read_text())
    assert len(hist["history"]) == 2
    assert hist["train"]["loss"]["class_weights"] is not None
    net, meta = nn.load_checkpoint(tmp_path / "model.tnet")
    assert meta["config"]["encoding"] == "one_hot"
    assert cli.main(["--out", str(tmp_path), "evaluate", "--checkpoint", str(tmp_path / "model.tnet"),
                     "--data", str(manifest), "--split", "val"]) == 0
    report = json.loads((tmp_path / "metrics_val.json").read_text())
    assert abs(report["weighted_recall"] - report["accuracy"]) <= 1e-12
    assert "rows=true class" in capsys.readouterr().out


def test_sweep_outputs(tmp_path, manifest):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({"groups": [{"loss": "focal", "encodings": ["confidence_partial"],
                                            "alphas": [0.25], "gammas": [1, 2]}], "repetitions": 1}))
    out = tmp_path / "s"
    assert cli.main(["--out", str(out), "sweep", "--grid", str(grid), "--data", str(manifest), "--epochs", "1"]) == 0
    with open(out / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == SUMMARY_COLUMNS and len(rows) == 3
    assert len(list((out / "reports").glob("*.json"))) == 2
    sens = json.loads((out / "sensitivity.json").read_text())
    assert np.array(sens["confidence_partial"]["metrics"]["weighted_f1"]).shape == (1, 2)


def test_encode(tmp_path):
    write_polygon_file(tmp_path / "p.json", {7: EggCode(sa=86, ca=79, sb=83, cb=24), 8: EggCode(ice_free=True)})
    assert cli.main(["--out", str(tmp_path), "encode", str(tmp_path / "p.json")]) == 0
    with open(tmp_path / "labels.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(rows[0][f"confidence_{c}"]) for c in ("YI", "FYI")] == [0.25, 0.75]
    assert rows[1]["onehot_W"] == "1"


def test_loss_eval(capsys):
    assert cli.main(["loss-eval", "--logits", "0,0,0,0,0,0", "--labels", "0,0,0,1,0,0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["loss"] == pytest.approx(np.log(6), abs=1e-12)
    assert cli.main(["loss-eval", "--logits", "1,2", "--labels", "1,0"]) == 2
    assert "6 values" in capsys.readouterr().err


def test_bad_inputs_exit_nonzero(tmp_path, capsys):
    assert cli.main(["--out", str(tmp_path), "encode", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["--profile", "huge", "gen-data"])
