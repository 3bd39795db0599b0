"""Command-line entry point: bounds, gen-data, train, attack, experiment, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import pathlib
import sys

from leakaudit import accountant, attacks, data, harness, learner, thresholds
from leakaudit.attacks import MerlinConfig, ShadowConfig
from leakaudit.learner import TrainConfig

DEFAULT_ALPHAS = tuple(i / 100 for i in range(1, 101))


def _floats(text: str) -> tuple[float, ...]:
  return tuple(float(v) for v in text.split(",") if v)


def _load_config(path) -> dict:
  if path is None:
    return {}
  return json.loads(pathlib.Path(path).read_text())


def _open_out(path):
  if path is None or path == "-":
    return sys.stdout
  pathlib.Path(path).parent.mkdir(parents=True, exist_ok=True)
  return open(path, "w", newline="")


def cmd_bounds(args) -> int:
  params = [accountant.PrivacyParams(e, args.delta) for e in args.epsilons]
  rows = accountant.emit_bound_curves(params, args.alphas, args.gammas)
  fh = _open_out(args.out)
  try:
    accountant.write_bound_curves(rows, fh)
  finally:
    if fh is not sys.stdout:
      fh.close()
  return 0


def cmd_gen_data(args) -> int:
  doc = _load_config(args.config)
  spec = data.SyntheticSpec(**doc.get("data", {}))
  if args.seed is not None:
    spec = dataclasses.replace(spec, seed=args.seed)
  n_train = args.n_train or doc.get("n_train", 500)
  gamma = args.gamma or doc.get("gamma", 1.0)
  ds = data.generate(spec, n_train, gamma)
  out = pathlib.Path(args.out)
  out.parent.mkdir(parents=True, exist_ok=True)
  data.save(ds, out)
  if args.csv:
    with open(args.csv, "w", newline="") as fh:
      data.export_csv(ds, fh)
  print(json.dumps({name: len(r) for name, r in ds.splits().items()}))
  return 0


def _train_config(doc: dict, seed, epsilon, n_train: int) -> TrainConfig:
  cfg = TrainConfig(**doc.get("training", {}))
  if seed is not None:
    cfg = dataclasses.replace(cfg, seed=seed)
  if epsilon is not None:
    sigma = accountant.sigma_for_target_epsilon(
        accountant.PrivacyParams(epsilon, learner.DP_DELTA),
        cfg.batch_size / n_train, cfg.steps_for(n_train))
    cfg = dataclasses.replace(cfg, dp_mode=True, noise_multiplier=sigma)
  return cfg


def cmd_train(args) -> int:
  ds = data.load(args.data)
  cfg = _train_config(_load_config(args.config), args.seed, args.epsilon,
                      len(ds.train))
  split, test_split = (("holdout_train", "holdout_test") if args.holdout
                       else ("train", "target_test"))
  art = learner.train(ds, cfg, split=split, test_split=test_split)
  out = pathlib.Path(args.out)
  out.parent.mkdir(parents=True, exist_ok=True)
  learner.save_model(art.model, out)
  report = {"train_accuracy": art.train_accuracy,
            "test_accuracy": art.test_accuracy}
  if art.privacy is not None:
    report.update(noise_multiplier=cfg.noise_multiplier, mu=art.gdp.mu,
                  epsilon=art.privacy.epsilon, delta=art.privacy.delta)
  print(json.dumps(report, sort_keys=True))
  return 0


def _scores(kind: str, model, cands, is_member, doc, seed):
  if kind == "yeom":
    return attacks.yeom_scores(model, cands, is_member)
  if kind == "merlin":
    cfg = MerlinConfig(**doc.get("merlin", {}))
    if seed is not None:
      cfg = dataclasses.replace(cfg, seed=seed)
    return attacks.merlin_scores(model, cands, is_member, cfg)
  raise ValueError(f"unknown attack {kind!r}")


def cmd_attack(args) -> int:
  """Scores the target candidates; optionally selects and applies a threshold."""
  doc = _load_config(args.config)
  ds = data.load(args.data)
  model = learner.load_model(args.model)
  target_pool = attacks.candidate_pool(ds.train, ds.target_test)
  holdout_pool = attacks.candidate_pool(ds.holdout_train, ds.holdout_test)
  holdout_model = (learner.load_model(args.holdout_model)
                   if args.holdout_model else None)
  if args.attack == "shokri":
    cfg = ShadowConfig(**doc.get("shadow", {}))
    if args.seed is not None:
      cfg = dataclasses.replace(cfg, seed=args.seed)
    tcfg = TrainConfig(**doc.get("training", {}))
    pool = data.Records.concat(ds.holdout_train, ds.holdout_test)
    inference = attacks.train_inference_model(pool, ds.n_classes, tcfg, cfg)
    target = attacks.shokri_confidence(inference, model, *target_pool)
    holdout = (attacks.shokri_confidence(inference, holdout_model, *holdout_pool)
               if holdout_model else None)
  else:
    target = _scores(args.attack, model, *target_pool, doc, args.seed)
    holdout = (_scores(args.attack, holdout_model, *holdout_pool, doc, args.seed)
               if holdout_model else None)
  fh = _open_out(args.out)
  try:
    target.write_csv(fh)
  finally:
    if fh is not sys.stdout:
      fh.close()
  if holdout is not None:
    goal = thresholds.parse_goal(args.goal, phi=args.phi)
    sel = thresholds.select_threshold(holdout, goal)
    counts = thresholds.apply_threshold(target, sel.phi)
    print(thresholds.selection_document(goal, sel), file=sys.stderr)
    print(json.dumps(thresholds.summarize(counts, sel.phi).as_dict(),
                     sort_keys=True, default=str), file=sys.stderr)
  return 0


def cmd_experiment(args) -> int:
  doc = _load_config(args.config)
  if args.seed is not None:
    doc["seed"] = args.seed
  if args.out is not None:
    doc["output_dir"] = args.out
  cfg = harness.ExperimentConfig.from_dict(doc)
  root = harness.run_experiment(cfg)
  print(root / "results.csv")
  return 0


def cmd_report(args) -> int:
  rows = harness.emit_table(harness.load_cells(args.results))
  out = pathlib.Path(args.out) if args.out else pathlib.Path(args.results)
  out.mkdir(parents=True, exist_ok=True)
  harness.write_table(rows, out)
  sys.stdout.write((out / "results.csv").read_text())
  return 0


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(
      prog="leakaudit",
      description="Membership-inference leakage audits under differential "
                  "privacy.")
  parser.add_argument("-v", "--verbose", action="store_true")
  sub = parser.add_subparsers(dest="command", required=True)

  p = sub.add_parser("bounds", help="dump advantage and PPV bound curves")
  p.add_argument("--epsilons", type=_floats, default=(0.25, 0.5, 1.0, 2.0, 5.0))
  p.add_argument("--delta", type=float, default=0.0)
  p.add_argument("--alphas", type=_floats, default=DEFAULT_ALPHAS)
  p.add_argument("--gammas", type=_floats, default=(1.0, 10.0, 100.0))
  p.add_argument("--out", help="CSV path (default stdout)")
  p.set_defaults(fn=cmd_bounds)

  p = sub.add_parser("gen-data", help="generate a synthetic split dataset")
  p.add_argument("--config")
  p.add_argument("--seed", type=int)
  p.add_argument("--n-train", type=int)
  p.add_argument("--gamma", type=float)
  p.add_argument("--csv", help="also export the records as CSV")
  p.add_argument("--out", required=True)
  p.set_defaults(fn=cmd_gen_data)

  p = sub.add_parser("train", help="train a model on a dataset file")
  p.add_argument("--data", required=True)
  p.add_argument("--config")
  p.add_argument("--seed", type=int)
  p.add_argument("--epsilon", type=float,
                 help="train with DP-SGD calibrated to this budget")
  p.add_argument("--holdout", action="store_true",
                 help="train on the holdout split instead of the target split")
  p.add_argument("--out", required=True)
  p.set_defaults(fn=cmd_train)

  p = sub.add_parser("attack", help="score target candidates")
  p.add_argument("--data", required=True)
  p.add_argument("--model", required=True)
  p.add_argument("--attack", choices=("yeom", "merlin", "shokri"),
                 default="yeom")
  p.add_argument("--holdout-model",
                 help="select a threshold on this model's holdout scores")
  p.add_argument("--goal", default="max_ppv")
  p.add_argument("--phi", type=float, help="threshold for the fixed_phi goal")
  p.add_argument("--config")
  p.add_argument("--seed", type=int)
  p.add_argument("--out", help="scores CSV (default stdout)")
  p.set_defaults(fn=cmd_attack)

  p = sub.add_parser("experiment", help="run the full sweep")
  p.add_argument("--config")
  p.add_argument("--seed", type=int)
  p.add_argument("--out")
  p.set_defaults(fn=cmd_experiment)

  p = sub.add_parser("report", help="rebuild the result table from cell files")
  p.add_argument("results", help="experiment output directory")
  p.add_argument("--out")
  p.set_defaults(fn=cmd_report)
  return parser


def main(argv=None) -> int:
  args = build_parser().parse_args(argv)
  logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                      format="%(asctime)s %(message)s")
  return args.fn(args)


if __name__ == "__main__":
  sys.exit(main())
