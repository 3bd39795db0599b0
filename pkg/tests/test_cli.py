import csv
import json

import pytest

from leakaudit import cli


@pytest.fixture
def config(tmp_path):
  doc = {
      "data": {"n_features": 8, "n_classes": 3},
      "n_train": 40,
      "gammas": [1.0],
      "training": {"hidden_width": 16, "batch_size": 20, "epochs": 10},
      "attacks": ["yeom", "merlin", "morgan"],
      "merlin": {"trials": 5},
      "runs": 1,
  }
  path = tmp_path / "cfg.json"
  path.write_text(json.dumps(doc))
  return path


def test_bounds(tmp_path, capsys):
  out = tmp_path / "b.csv"
  assert cli.main(["bounds", "--epsilons", "1", "--alphas", "0.1,0.5",
                   "--gammas", "1", "--out", str(out)]) == 0
  rows = list(csv.reader(out.open()))
  assert len(rows) > 1


def test_pipeline(tmp_path, config, capsys):
  ds, model, hold = (tmp_path / n for n in ("ds.bin", "m.ckpt", "h.ckpt"))
  assert cli.main(["gen-data", "--config", str(config), "--seed", "3",
                   "--out", str(ds), "--csv", str(tmp_path / "ds.csv")]) == 0
  sizes = json.loads(capsys.readouterr().out)
  assert sizes["train"] == 40
  assert cli.main(["train", "--data", str(ds), "--config", str(config),
                   "--out", str(model)]) == 0
  assert "train_accuracy" in json.loads(capsys.readouterr().out)
  assert cli.main(["train", "--data", str(ds), "--config", str(config),
                   "--holdout", "--epsilon", "2", "--out", str(hold)]) == 0
  report = json.loads(capsys.readouterr().out)
  assert report["epsilon"] == pytest.approx(2.0, rel=0.01)
  scores = tmp_path / "s.csv"
  assert cli.main(["attack", "--data", str(ds), "--model", str(model),
                   "--holdout-model", str(hold), "--goal", "max_adv",
                   "--out", str(scores)]) == 0
  err = capsys.readouterr().err.splitlines()
  assert json.loads(err[0])["goal"] == "max_adv"
  assert len(scores.read_text().splitlines()) == 1 + 80


def test_experiment_and_report(tmp_path, config, capsys):
  out = tmp_path / "exp"
  assert cli.main(["experiment", "--config", str(config), "--out",
                   str(out)]) == 0
  first = (out / "results.csv").read_bytes()
  capsys.readouterr()
  assert cli.main(["report", str(out), "--out", str(tmp_path / "again")]) == 0
  assert (tmp_path / "again" / "results.csv").read_bytes() == first
  assert capsys.readouterr().out.encode() == first


def test_unknown_command():
  with pytest.raises(SystemExit):
    cli.main(["nope"])
