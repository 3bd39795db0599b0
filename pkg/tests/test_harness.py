import dataclasses
import filecmp
import json
import math

import numpy as np
import pytest

from leakaudit import attacks, data, harness, metrics
from leakaudit.attacks import MerlinConfig, ShadowConfig
from leakaudit.data import SyntheticSpec
from leakaudit.harness import ExperimentConfig
from leakaudit.learner import TrainConfig

TINY = ExperimentConfig(
    data=SyntheticSpec(n_features=10, n_classes=4),
    n_train=60,
    gammas=(0.5, 2.0),
    training=TrainConfig(hidden_width=16, batch_size=20, epochs=15),
    privacy=(None, 5.0),
    merlin=MerlinConfig(trials=10),
    shadow=ShadowConfig(n_shadows=2, inference_hidden_width=8,
                        inference_epochs=5, min_fold_size=5),
    morgan_alphas=(0.05, 0.2, 1.0),
    runs=2,
    seed=11,
)


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
  return harness.run_experiment(TINY, tmp_path_factory.mktemp("sweep"))


def test_minimal_config_smoke(tmp_path):
  cfg = dataclasses.replace(TINY, gammas=(1.0,), privacy=(None,),
                            attacks=("yeom",), goals=("max_ppv",), runs=1,
                            n_train=100, seed=2,
                            training=TrainConfig(hidden_width=32, batch_size=20,
                                                 epochs=60))
  rows = harness.emit_table(harness.load_cells(
      harness.run_experiment(cfg, tmp_path)))
  assert len(rows) == 1
  # epsilon None marks the non-private model.
  assert rows[0]["epsilon"] is None
  assert all(v is not None for k, v in rows[0].items() if k != "epsilon")
  assert rows[0]["attack"] == "yeom" and rows[0]["goal"] == "max_ppv"


def test_gamma_scales_pool_only():
  ds = data.generate(SyntheticSpec(n_features=5, n_classes=3), 40, 10)
  one = harness.restrict(ds, 1.0)
  assert len(one.train) == len(ds.train) == 40
  assert len(ds.target_test) == 10 * len(one.target_test)
  with pytest.raises(ValueError):
    harness.restrict(one, 10.0)


def test_config_round_trip():
  doc = json.loads(json.dumps(TINY.to_dict()))
  assert ExperimentConfig.from_dict(doc) == TINY
  with pytest.raises(ValueError):
    dataclasses.replace(TINY, runs=0)
  with pytest.raises(ValueError):
    dataclasses.replace(TINY, gammas=(0.0,))
  with pytest.raises(ValueError):
    dataclasses.replace(TINY, attacks=("nope",))


def _scores(seed, n=40):
  rng = np.random.default_rng(seed)
  members = np.arange(n) < n // 2
  loss = np.where(members, rng.exponential(0.2, n), rng.exponential(1.0, n))
  ratio = np.clip(np.where(members, 0.6, 0.4) + rng.normal(0, 0.2, n), 0, 1)
  labels = rng.integers(3, size=n)
  ids = np.arange(n, dtype=np.uint64)
  from leakaudit.scores import HIGH, LOW, AttackScores
  return (AttackScores.build(loss, members, LOW, labels, ids),
          AttackScores.build(np.round(ratio, 2), members, HIGH, labels, ids))


@pytest.mark.parametrize("name", ["yeom", "yeom_cbt", "merlin"])
def test_poisoned_target_bits_leave_selection_unchanged(name):
  hold_l, hold_r = _scores(0)
  tgt_l, tgt_r = _scores(1)
  hold, tgt = (hold_r, tgt_r) if name == "merlin" else (hold_l, tgt_l)
  flipped = tgt.with_membership(~tgt.is_member)
  a = harness.evaluate_attack(name, hold, tgt, harness.DEFAULT_GOALS, 0.3)
  b = harness.evaluate_attack(name, hold, flipped, harness.DEFAULT_GOALS, 0.3)
  assert a.keys() == b.keys()
  for goal in a:
    assert a[goal]["phi"] == b[goal]["phi"]
    assert a[goal]["target"]["decisions"] == b[goal]["target"]["decisions"]
  a = harness.evaluate_morgan(hold_l, hold_r, tgt_l, tgt_r, (0.1, 1.0))
  b = harness.evaluate_morgan(hold_l, hold_r,
                              tgt_l.with_membership(~tgt_l.is_member),
                              tgt_r.with_membership(~tgt_r.is_member), (0.1, 1.0))
  assert a["max_ppv"]["phi"] == b["max_ppv"]["phi"]


def test_tree_layout(tree):
  cells = sorted(p.relative_to(tree).as_posix()
                 for p in tree.glob("cells/*/*/*.json"))
  assert len(cells) == 2 * 2 * 2
  assert "cells/gamma=0.5/epsilon=inf/run0.json" in cells
  assert "cells/gamma=2/epsilon=5/run1.json" in cells
  assert (tree / "config.json").exists()


def test_table_schema(tree):
  header = (tree / "results.csv").read_text().splitlines()[0]
  assert header == ",".join(harness.TABLE_HEADER)
  rows = harness.read_table_json(tree / "results.json")
  assert all(tuple(r) == harness.TABLE_HEADER for r in rows)
  morgan = [r for r in rows if r["attack"] == "morgan"]
  assert morgan and all(r["phi"] == "-" or r["phi"].count(";") == 2
                        for r in morgan)
  assert {r["attack"] for r in rows} == set(harness.ALL_ATTACKS)


def test_csv_and_json_agree(tree):
  assert (harness.read_table_csv(tree / "results.csv") ==
          harness.read_table_json(tree / "results.json"))


def test_reported_budget(tree):
  for cell in harness.load_cells(tree):
    if cell["epsilon"] is not None:
      assert cell["model"]["reported_epsilon"] == pytest.approx(
          cell["epsilon"], rel=0.01)
    else:
      assert cell["model"]["reported_epsilon"] is None


def _decisions(entry):
  c = entry["target"]["counts"]
  n = sum(c.values())
  bits = np.unpackbits(np.frombuffer(bytes.fromhex(entry["target"]["decisions"]),
                                     np.uint8))
  return bits[:n].astype(bool), c["tp"] + c["fn"]


def test_rows_rederive_from_decisions(tree):
  cells = harness.load_cells(tree)
  rows = harness.emit_table(cells)
  assert rows == harness.read_table_json(tree / "results.json")
  for row in rows:
    runs = []
    for cell in cells:
      if (cell["gamma"], cell["epsilon"]) != (row["gamma"], row["epsilon"]):
        continue
      entry = cell["attacks"][row["attack"]][row["goal"]]
      pred, n_mem = _decisions(entry)
      member = np.arange(len(pred)) < n_mem
      tp, fp = int(np.sum(pred & member)), int(np.sum(pred & ~member))
      c = metrics.ConfusionCounts(tp, fp, int(np.sum(~member)) - fp, n_mem - tp)
      assert c.as_dict() == entry["target"]["counts"]
      if not entry["feasible"]:
        runs.append({"adv": None, "ppv": None})
      else:
        runs.append({"adv": c.tpr - c.fpr,
                     "ppv": tp / (tp + fp) if tp + fp else None})
    agg = metrics.aggregate(runs)
    assert row["adv_mean"] == agg.metrics["adv"].mean
    assert row["ppv_mean"] == agg.metrics["ppv"].mean
    assert row["excluded_runs"] == agg.metrics["ppv"].excluded_runs


def test_dash_when_ppv_undefined_everywhere(tmp_path):
  entry = {"phi": "-inf", "feasible": False,
           "holdout": {"alpha": 0.0},
           "target": {"counts": {"tp": 0, "fp": 0, "tn": 5, "fn": 5},
                      "decisions": "0000"}}
  cells = [{"gamma": 1.0, "epsilon": None, "run": r,
            "attacks": {"yeom": {"fixed_fpr@0.01": entry}}} for r in range(3)]
  rows = harness.emit_table(cells)
  harness.write_table(rows, tmp_path)
  line = (tmp_path / "results.csv").read_text().splitlines()[1]
  assert line == "1.0,inf,yeom,fixed_fpr@0.01,0.0,-,-,-,-,-,3"


def test_same_seed_same_bytes(tree, tmp_path):
  again = harness.run_experiment(TINY, tmp_path)
  cmp = filecmp.dircmp(tree, again)
  assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
  for path in tree.rglob("*"):
    if path.is_file():
      assert path.read_bytes() == (again / path.relative_to(tree)).read_bytes()


def test_unreachable_selection_recorded_not_raised():
  from leakaudit.scores import LOW, AttackScores
  hold = AttackScores.build([0.5] * 6, [1, 0] * 3, LOW)
  out = harness.evaluate_attack("yeom", hold, hold, ("fixed_fpr@0.01",))
  entry = out["fixed_fpr@0.01"]
  assert not entry["feasible"] and entry["phi"] == -math.inf
  assert entry["target"]["counts"]["tp"] == 0
