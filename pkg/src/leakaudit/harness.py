"""End-to-end membership experiments and their result tables."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import pathlib
from collections.abc import Sequence

import numpy as np

from leakaudit import accountant, attacks, data, learner, metrics, thresholds
from leakaudit.attacks import MerlinConfig, ShadowConfig
from leakaudit.data import Records, SplitDataset, SyntheticSpec
from leakaudit.learner import TrainConfig
from leakaudit.scores import AttackScores
from leakaudit.thresholds import FixedPhi, MaxPPV

log = logging.getLogger(__name__)

TABLE_HEADER = ("gamma", "epsilon", "attack", "goal", "alpha", "phi",
                "adv_mean", "adv_std", "ppv_mean", "ppv_std", "excluded_runs")
ALL_ATTACKS = ("yeom", "yeom_cbt", "shokri", "shokri_cbt", "merlin", "morgan")
DEFAULT_GOALS = ("min_fpr", "fixed_fpr@0.01", "fixed_phi", "max_ppv", "max_adv")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
  """Full sweep description; ``None`` in ``privacy`` means non-private."""

  data: SyntheticSpec = SyntheticSpec()
  n_train: int = 500
  gammas: tuple[float, ...] = (1.0,)
  training: TrainConfig = TrainConfig()
  privacy: tuple[float | None, ...] = (None,)
  attacks: tuple[str, ...] = ALL_ATTACKS
  goals: tuple[str, ...] = DEFAULT_GOALS
  merlin: MerlinConfig = MerlinConfig()
  shadow: ShadowConfig = ShadowConfig()
  morgan_alphas: tuple[float, ...] = thresholds.DEFAULT_MORGAN_ALPHAS
  runs: int = 5
  seed: int = 0
  output_dir: str = "results"

  def __post_init__(self):
    if self.runs < 1:
      raise ValueError(f"runs must be >= 1, got {self.runs}.")
    if not self.gammas or any(not g > 0 for g in self.gammas):
      raise ValueError(f"gammas must be positive, got {self.gammas}.")
    unknown = set(self.attacks) - set(ALL_ATTACKS)
    if unknown:
      raise ValueError(f"unknown attacks: {sorted(unknown)}.")
    for eps in self.privacy:
      if eps is not None and not eps > 0:
        raise ValueError(f"privacy budgets must be > 0, got {eps}.")
    for goal in self.goals:
      thresholds.parse_goal(goal, phi=0.0)

  def to_dict(self) -> dict:
    return dataclasses.asdict(self)

  @classmethod
  def from_dict(cls, doc: dict) -> "ExperimentConfig":
    doc = dict(doc)
    nested = {"data": SyntheticSpec, "training": TrainConfig,
              "merlin": MerlinConfig, "shadow": ShadowConfig}
    for key, kind in nested.items():
      if key in doc:
        doc[key] = kind(**doc[key])
    for key in ("gammas", "privacy", "attacks", "goals", "morgan_alphas"):
      if key in doc:
        doc[key] = tuple(doc[key])
    return cls(**doc)


def _seed(*parts: int) -> int:
  return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def restrict(ds: SplitDataset, gamma: float) -> SplitDataset:
  """The dataset ``generate`` would give at a smaller ``gamma``, by prefix."""
  m = data.pool_size(len(ds.train), gamma)
  if m > len(ds.target_test):
    raise ValueError(f"gamma={gamma} needs {m} non-members, have "
                     f"{len(ds.target_test)}.")
  return dataclasses.replace(ds, target_test=ds.target_test.take(slice(0, m)),
                             holdout_test=ds.holdout_test.take(slice(0, m)),
                             gamma=float(gamma))


def _training_config(cfg: ExperimentConfig, epsilon: float | None,
                     seed: int) -> TrainConfig:
  if epsilon is None:
    return dataclasses.replace(cfg.training, dp_mode=False, seed=seed)
  tc = cfg.training
  sigma = accountant.sigma_for_target_epsilon(
      accountant.PrivacyParams(epsilon, learner.DP_DELTA),
      tc.batch_size / cfg.n_train, tc.steps_for(cfg.n_train))
  return dataclasses.replace(tc, dp_mode=True, noise_multiplier=sigma, seed=seed)


def _slice(scores: AttackScores, n_members: int, n_pool: int) -> AttackScores:
  # Candidates are laid out members first, then the non-member pool.
  keep = np.zeros(len(scores), bool)
  keep[:n_members + n_pool] = True
  return scores.subset(keep)


def _pack(pred: np.ndarray) -> str:
  return np.packbits(np.asarray(pred, dtype=np.uint8)).tobytes().hex()


def _target_record(pred, target: AttackScores) -> dict:
  counts = thresholds.counts_from_decisions(pred, target.is_member)
  return {"counts": counts.as_dict(), "decisions": _pack(pred)}


def evaluate_attack(name: str, holdout: AttackScores, target: AttackScores,
                    goals: Sequence[str], fixed_phi: float | None = None,
                    gamma: float | None = None) -> dict:
  """Selects thresholds on the holdout only, then scores the target.

  Target membership bits are read only when tallying the final counts.
  """
  out = {}
  cbt = name.endswith("_cbt")
  for text in goals:
    goal = thresholds.parse_goal(text, phi=fixed_phi)
    if isinstance(goal, FixedPhi) and (cbt or goal.phi is None):
      continue
    label = thresholds.goal_label(goal)
    if cbt:
      pred, per_class = attacks.class_based_wrapper(holdout, target, goal, gamma)
      phis = {c: s.phi for c, s in per_class.items()}
      holdout_pred = attacks.apply_class_thresholds(holdout, phis)
      hold_counts = thresholds.counts_from_decisions(holdout_pred,
                                                     holdout.is_member)
      values = sorted(phis.values())
      entry = {
          "phi": [values[0], float(np.median(values)), values[-1]],
          "holdout": thresholds.summarize(hold_counts, math.nan).as_dict(),
          "feasible": bool(np.any(holdout_pred)),
      }
    else:
      sel = thresholds.select_threshold(holdout, goal, gamma)
      pred = thresholds.decide(target, sel.phi)
      entry = {"phi": sel.phi, "holdout": sel.as_dict(),
               "feasible": sel.feasible}
    entry["target"] = _target_record(pred, target)
    out[label] = entry
  return out


def evaluate_morgan(hold_loss: AttackScores, hold_ratio: AttackScores,
                    tgt_loss: AttackScores, tgt_ratio: AttackScores,
                    alphas: Sequence[float], gamma: float | None = None) -> dict:
  th = thresholds.select_morgan(hold_loss, hold_ratio, gamma, alphas)
  hold_counts = thresholds.morgan_counts(hold_loss, hold_ratio, th)
  pred = thresholds.morgan_mask(tgt_loss.scores, tgt_ratio.scores, th)
  return {"max_ppv": {
      "phi": [th.phi_L, th.phi_U, th.phi_M],
      "holdout": thresholds.summarize(hold_counts, math.nan).as_dict(),
      "feasible": hold_counts.predicted > 0,
      "target": _target_record(pred, tgt_loss),
  }}


def _json_default(x):
  if isinstance(x, (np.floating, np.integer)):
    return x.item()
  raise TypeError(f"cannot serialize {type(x)}")


def _sanitize(x):
  """Replaces non-finite floats by strings so the JSON stays standard."""
  if isinstance(x, dict):
    return {k: _sanitize(v) for k, v in x.items()}
  if isinstance(x, (list, tuple)):
    return [_sanitize(v) for v in x]
  if isinstance(x, (float, np.floating)):
    x = float(x)
    if math.isnan(x):
      return "nan"
    if math.isinf(x):
      return "inf" if x > 0 else "-inf"
  return x


def _dump(obj) -> str:
  return json.dumps(_sanitize(obj), indent=1, sort_keys=True,
                    default=_json_default) + "\n"


def _as_float(x) -> float:
  return float(x) if isinstance(x, str) else x


def _eps_key(epsilon: float | None) -> str:
  return "inf" if epsilon is None else accountant.format_decimal(epsilon)


def cell_path(root, gamma: float, epsilon: float | None, run: int) -> pathlib.Path:
  return (pathlib.Path(root) / "cells" / f"gamma={accountant.format_decimal(gamma)}"
          / f"epsilon={_eps_key(epsilon)}" / f"run{run}.json")


def run_single(cfg: ExperimentConfig, run: int) -> dict:
  """All (gamma, privacy) cells of one run; returns {(gamma, eps): record}."""
  spec = dataclasses.replace(cfg.data, seed=_seed(cfg.seed, run, 0))
  full = data.generate(spec, cfg.n_train, max(cfg.gammas))
  n = cfg.n_train
  wanted = set(cfg.attacks)
  results = {}
  for p_index, epsilon in enumerate(cfg.privacy):
    tcfg = _training_config(cfg, epsilon, _seed(cfg.seed, run, 1))
    hcfg = dataclasses.replace(tcfg, seed=_seed(cfg.seed, run, 2))
    log.info("run %d, epsilon=%s: training target and holdout models",
             run, _eps_key(epsilon))
    target = learner.train(full, tcfg)
    holdout = learner.train(full, hcfg, split="holdout_train",
                            test_split="holdout_test")
    tgt_cands, tgt_mem = attacks.candidate_pool(full.train, full.target_test)
    hold_cands, hold_mem = attacks.candidate_pool(full.holdout_train,
                                                  full.holdout_test)
    full_scores = {
        "yeom": (attacks.yeom_scores(holdout.model, hold_cands, hold_mem),
                 attacks.yeom_scores(target.model, tgt_cands, tgt_mem)),
    }
    if wanted & {"merlin", "morgan"}:
      log.info("run %d, epsilon=%s: Merlin scoring", run, _eps_key(epsilon))
      mcfg = dataclasses.replace(cfg.merlin, seed=_seed(cfg.seed, run, 3))
      full_scores["merlin"] = (
          attacks.merlin_scores(holdout.model, hold_cands, hold_mem, mcfg),
          attacks.merlin_scores(target.model, tgt_cands, tgt_mem, mcfg))
    for gamma in cfg.gammas:
      ds = restrict(full, gamma)
      m = len(ds.target_test)
      scores = {k: (_slice(h, n, m), _slice(t, n, m))
                for k, (h, t) in full_scores.items()}
      hold_y, tgt_y = scores["yeom"]
      record = {
          "run": run, "gamma": gamma, "epsilon": epsilon,
          "model": {
              "train_accuracy": target.train_accuracy,
              "test_accuracy": target.test_accuracy,
              "holdout_train_accuracy": holdout.train_accuracy,
              "noise_multiplier": tcfg.noise_multiplier if tcfg.dp_mode else None,
              "mu": target.gdp.mu if target.gdp else None,
              "reported_epsilon": (target.privacy.epsilon if target.privacy
                                   else None),
          },
          "diagnostics": {
              "member_loss_mean": float(np.mean(tgt_y.scores[tgt_y.is_member])),
              "non_member_loss_mean": float(
                  np.mean(tgt_y.scores[~tgt_y.is_member])),
          },
          "attacks": {},
      }
      if wanted & {"shokri", "shokri_cbt"}:
        log.info("run %d, epsilon=%s, gamma=%s: shadow models", run,
                 _eps_key(epsilon), gamma)
        scfg = dataclasses.replace(cfg.shadow, seed=_seed(cfg.seed, run, 4))
        pool = Records.concat(ds.holdout_train, ds.holdout_test)
        inference = attacks.train_inference_model(pool, ds.n_classes, tcfg, scfg)
        scores["shokri"] = (
            attacks.shokri_confidence(inference, holdout.model, *_cands(ds, True)),
            attacks.shokri_confidence(inference, target.model, *_cands(ds, False)))
      fixed = {
          # Expected training loss as visible to the adversary.
          "yeom": float(np.mean(hold_y.scores[hold_y.is_member])),
          "shokri": 0.5,
      }
      for name in cfg.attacks:
        if name == "morgan":
          continue
        base = name.removesuffix("_cbt")
        hold, tgt = scores[base]
        record["attacks"][name] = evaluate_attack(
            name, hold, tgt, cfg.goals, fixed.get(name))
      if "merlin" in scores:
        hold_r, tgt_r = scores["merlin"]
        record["diagnostics"]["member_ratio_mean"] = float(
            np.mean(tgt_r.scores[tgt_r.is_member]))
        record["diagnostics"]["non_member_ratio_mean"] = float(
            np.mean(tgt_r.scores[~tgt_r.is_member]))
      if "morgan" in wanted:
        hold_r, tgt_r = scores["merlin"]
        record["attacks"]["morgan"] = evaluate_morgan(
            hold_y, hold_r, tgt_y, tgt_r, cfg.morgan_alphas)
        record["holdout_max_ppv"] = {
            "yeom": thresholds.select_threshold(hold_y, MaxPPV()).achieved_ppv,
            "merlin": thresholds.select_threshold(hold_r, MaxPPV()).achieved_ppv,
            "morgan": record["attacks"]["morgan"]["max_ppv"]["holdout"]["ppv"],
        }
      results[(gamma, epsilon)] = record
  return results


def _cands(ds: SplitDataset, holdout: bool):
  if holdout:
    return attacks.candidate_pool(ds.holdout_train, ds.holdout_test)
  return attacks.candidate_pool(ds.train, ds.target_test)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> pathlib.Path:
  """Runs every (run, gamma, privacy) cell and writes the result tree.

  Layout: ``config.json``, one JSON file per cell under ``cells/``, and the
  aggregated ``results.csv`` / ``results.json``.
  """
  root = pathlib.Path(out_dir or cfg.output_dir)
  root.mkdir(parents=True, exist_ok=True)
  doc = cfg.to_dict()
  doc.pop("output_dir")
  (root / "config.json").write_text(_dump(doc))
  for run in range(cfg.runs):
    for (gamma, epsilon), record in run_single(cfg, run).items():
      path = cell_path(root, gamma, epsilon, run)
      path.parent.mkdir(parents=True, exist_ok=True)
      path.write_text(_dump(record))
  rows = emit_table(load_cells(root))
  write_table(rows, root)
  return root


def load_cells(root) -> list[dict]:
  cells = []
  for path in sorted(pathlib.Path(root).glob("cells/*/*/run*.json")):
    cells.append(json.loads(path.read_text()))
  return cells


def _mean(values):
  return math.fsum(values) / len(values) if values else None


def _phi_summary(phis: list) -> str:
  if not phis:
    return "-"
  if isinstance(phis[0], list):
    cols = zip(*[[_as_float(v) for v in p] for p in phis])
    return ";".join(accountant.format_decimal(_mean(list(c))) for c in cols)
  return accountant.format_decimal(_mean([_as_float(p) for p in phis]))


def emit_table(cells: list[dict]) -> list[dict]:
  """Aggregates cell records into one row per (gamma, epsilon, attack, goal).

  A run whose selection admits no holdout record contributes no Adv or PPV;
  a run whose target decisions contain no positives contributes no PPV.
  """
  groups: dict[tuple, list] = {}
  for cell in cells:
    for attack, by_goal in cell["attacks"].items():
      for goal, entry in by_goal.items():
        key = (cell["gamma"], cell["epsilon"], attack, goal)
        groups.setdefault(key, []).append(entry)

  def sort_key(key):
    gamma, eps, attack, goal = key
    return (gamma, math.inf if eps is None else eps,
            ALL_ATTACKS.index(attack), goal)

  rows = []
  for key in sorted(groups, key=sort_key):
    gamma, eps, attack, goal = key
    runs = []
    for entry in groups[key]:
      counts = metrics.ConfusionCounts(**entry["target"]["counts"])
      if entry["feasible"]:
        runs.append({"adv": metrics.advantage(counts),
                     "ppv": metrics.try_metric(metrics.empirical_ppv, counts)})
      else:
        runs.append({"adv": None, "ppv": None})
    agg = metrics.aggregate(runs)
    alphas = [_as_float(e["holdout"]["alpha"]) for e in groups[key]]
    rows.append({
        "gamma": gamma,
        "epsilon": eps,
        "attack": attack,
        "goal": goal,
        "alpha": _mean(alphas),
        "phi": _phi_summary([e["phi"] for e in groups[key] if e["feasible"]]),
        "adv_mean": agg.metrics["adv"].mean,
        "adv_std": agg.metrics["adv"].std,
        "ppv_mean": agg.metrics["ppv"].mean,
        "ppv_std": agg.metrics["ppv"].std,
        "excluded_runs": agg.metrics["ppv"].excluded_runs,
    })
  return rows


def _csv_cell(key, value) -> str:
  if key == "epsilon" and value is None:
    return "inf"
  if value is None:
    return "-"
  if isinstance(value, float):
    return repr(value)
  return str(value)


def write_table(rows: list[dict], root) -> None:
  root = pathlib.Path(root)
  with open(root / "results.csv", "w", newline="") as fh:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    for row in rows:
      writer.writerow([_csv_cell(k, row[k]) for k in TABLE_HEADER])
  (root / "results.json").write_text(json.dumps(
      {"deviation": metrics.DEVIATION_KIND, "rows": rows}, indent=1) + "\n")


def read_table_csv(path) -> list[dict]:
  rows = []
  with open(path, newline="") as fh:
    for raw in csv.DictReader(fh):
      row = {}
      for key in TABLE_HEADER:
        v = raw[key]
        if key in ("attack", "goal", "phi"):
          row[key] = v
        elif key == "excluded_runs":
          row[key] = int(v)
        elif key == "epsilon" and v == "inf":
          row[key] = None
        else:
          row[key] = None if v == "-" else float(v)
      rows.append(row)
  return rows


def read_table_json(path) -> list[dict]:
  return json.loads(pathlib.Path(path).read_text())["rows"]
