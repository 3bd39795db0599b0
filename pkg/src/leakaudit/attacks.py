"""Membership inference scorers: loss, perturbation ratio, shadow models, joint rule."""

from __future__ import annotations

import dataclasses

import numpy as np

from leakaudit import learner
from leakaudit.data import Records, SplitDataset, record_ids
from leakaudit.learner import MlpModel, TrainConfig
from leakaudit.scores import HIGH, LOW, AttackScores
from leakaudit.thresholds import (MorganThresholds, SelectedThreshold,
                                  select_threshold)


class InsufficientHoldoutError(ValueError):
  pass


@dataclasses.dataclass(frozen=True)
class MerlinConfig:
  trials: int = 100
  sigma: float = 0.01
  seed: int = 0

  def __post_init__(self):
    if self.trials < 1:
      raise ValueError(f"trials must be >= 1, got {self.trials}.")
    if not self.sigma > 0:
      raise ValueError(f"sigma must be > 0, got {self.sigma}.")


@dataclasses.dataclass(frozen=True)
class ShadowConfig:
  """Shadow-model attack settings.

  The inference network has two hidden layers of ``inference_hidden_width``.
  """

  n_shadows: int = 5
  inference_hidden_width: int = 64
  inference_epochs: int = 100
  inference_learning_rate: float = 0.001
  min_fold_size: int = 10
  seed: int = 0

  def __post_init__(self):
    if self.n_shadows < 1:
      raise ValueError(f"n_shadows must be >= 1, got {self.n_shadows}.")


def candidate_pool(members: Records, non_members: Records):
  """Concatenated candidates with membership bits, members first."""
  pool = Records.concat(members, non_members)
  is_member = np.concatenate([np.ones(len(members), bool),
                              np.zeros(len(non_members), bool)])
  return pool, is_member


def yeom_scores(model: MlpModel, candidates: Records,
                is_member) -> AttackScores:
  """Per-instance loss; low loss indicates membership."""
  # One record per call: a batched matmul may round differently, and the
  # score must equal learner.loss bit for bit.
  losses = np.array([learner.loss(model, candidates[i])
                     for i in range(len(candidates))])
  return AttackScores.build(losses, is_member, LOW, candidates.labels,
                            candidates.ids)


def _record_stream(seed: int, record_id: int) -> np.random.Generator:
  return np.random.default_rng(np.random.SeedSequence([seed, int(record_id)]))


def merlin_ratio(model: MlpModel, z, cfg: MerlinConfig,
                 record_id: int | None = None) -> float:
  """Fraction of Gaussian perturbations of ``z`` that strictly raise its loss.

  ``z`` is a (features, label) pair. Perturbations are drawn from a stream
  keyed by (cfg.seed, record_id); the id defaults to the hash of the features.
  """
  features, label = z
  features = np.asarray(features)
  if record_id is None:
    record_id = int(record_ids(features[None, :])[0])
  rng = _record_stream(cfg.seed, record_id)
  noise = rng.normal(0.0, cfg.sigma, size=(cfg.trials, features.shape[-1]))
  x = features.astype(np.float64)
  # The clean record rides in the same batch so every row sees one code path.
  batch = np.vstack([x[None, :], x[None, :] + noise])
  losses = learner.per_example_loss(model, batch,
                                    np.full(len(batch), label))
  return float(np.count_nonzero(losses[1:] > losses[0])) / cfg.trials


def merlin_scores(model: MlpModel, candidates: Records, is_member,
                  cfg: MerlinConfig) -> AttackScores:
  """Merlin ratio per candidate; high ratio indicates membership."""
  ids = candidates.ids
  ratios = np.array([
      merlin_ratio(model, candidates[i], cfg, record_id=ids[i])
      for i in range(len(candidates))
  ])
  return AttackScores.build(ratios, is_member, HIGH, candidates.labels, ids)


def inference_features(model: MlpModel, records: Records) -> np.ndarray:
  """Softmax output concatenated with the one-hot true label."""
  probs = model.predict_proba(records.features)
  onehot = np.zeros_like(probs)
  onehot[np.arange(len(records)), records.labels] = 1.0
  return np.hstack([probs, onehot])


def _derived_seed(*parts: int) -> int:
  return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def train_inference_model(pool: Records, n_classes: int, train_cfg: TrainConfig,
                          cfg: ShadowConfig) -> MlpModel:
  """Trains shadow models on folds of ``pool`` and the inference network.

  The pool is shuffled and cut into 2 * n_shadows equal folds; shadow i
  trains on fold 2i and uses fold 2i + 1 as its non-members.

  Raises:
    InsufficientHoldoutError: if a fold would hold fewer than
      ``cfg.min_fold_size`` records.
  """
  n_folds = 2 * cfg.n_shadows
  fold = len(pool) // n_folds
  if fold < cfg.min_fold_size:
    raise InsufficientHoldoutError(
        f"{len(pool)} holdout records cannot supply {n_folds} folds of at "
        f"least {cfg.min_fold_size}.")
  rng = np.random.default_rng(_derived_seed(cfg.seed, 0))
  order = rng.permutation(len(pool))
  feats, member_bits = [], []
  for i in range(cfg.n_shadows):
    shadow_in = pool.take(order[2 * i * fold:(2 * i + 1) * fold])
    shadow_out = pool.take(order[(2 * i + 1) * fold:(2 * i + 2) * fold])
    shadow_cfg = dataclasses.replace(
        train_cfg, batch_size=min(train_cfg.batch_size, fold),
        seed=_derived_seed(cfg.seed, 1, i))
    shadow = learner.fit(shadow_in.features, shadow_in.labels, n_classes,
                         shadow_cfg)
    feats += [inference_features(shadow, shadow_in),
              inference_features(shadow, shadow_out)]
    member_bits += [np.ones(fold, np.int64), np.zeros(fold, np.int64)]
  x = np.vstack(feats)
  y = np.concatenate(member_bits)
  inf_cfg = TrainConfig(hidden_width=cfg.inference_hidden_width,
                        learning_rate=cfg.inference_learning_rate,
                        batch_size=min(200, len(y)),
                        epochs=cfg.inference_epochs, l2_penalty=1e-8,
                        seed=_derived_seed(cfg.seed, 2))
  return learner.fit(x, y, 2, inf_cfg)


def shokri_confidence(inference: MlpModel, model: MlpModel, candidates: Records,
                      is_member) -> AttackScores:
  """Inference-network member probability for each candidate under ``model``."""
  conf = inference.predict_proba(inference_features(model, candidates))[:, 1]
  return AttackScores.build(conf, is_member, HIGH, candidates.labels,
                            candidates.ids)


def shokri_scores(ds: SplitDataset, target: MlpModel, train_cfg: TrainConfig,
                  cfg: ShadowConfig) -> AttackScores:
  """Shadow-model attack scores for the target's members and non-member pool."""
  pool = Records.concat(ds.holdout_train, ds.holdout_test)
  inference = train_inference_model(pool, ds.n_classes, train_cfg, cfg)
  candidates, is_member = candidate_pool(ds.train, ds.target_test)
  return shokri_confidence(inference, target, candidates, is_member)


def morgan_decide(loss_value: float, merlin_ratio: float,
                  th: MorganThresholds) -> bool:
  """Member iff phi_L <= loss <= phi_U and ratio >= phi_M."""
  return bool(th.phi_L <= loss_value <= th.phi_U and merlin_ratio >= th.phi_M)


def class_based_wrapper(holdout: AttackScores, target: AttackScores, goal,
                        gamma: float | None = None
                        ) -> tuple[np.ndarray, dict[int, SelectedThreshold]]:
  """Selects one threshold per class on the holdout and applies it to targets.

  A class without both a holdout member and a holdout non-member reuses the
  global threshold.

  Returns:
    Member predictions for ``target`` and the threshold used for each class
    present in either score set.
  """
  global_sel = select_threshold(holdout, goal, gamma)
  classes = np.union1d(holdout.labels, target.labels)
  per_class = {}
  for c in classes:
    in_class = holdout.labels == c
    members = np.sum(holdout.is_member[in_class])
    if members == 0 or members == np.sum(in_class):
      per_class[int(c)] = global_sel
    else:
      per_class[int(c)] = select_threshold(holdout.subset(in_class), goal, gamma)
  pred = apply_class_thresholds(
      target, {c: sel.phi for c, sel in per_class.items()})
  return pred, per_class


def apply_class_thresholds(scores: AttackScores,
                           phis: dict[int, float]) -> np.ndarray:
  """Member predictions using the threshold of each record's class."""
  per_record = np.array([phis[int(c)] for c in scores.labels], dtype=float)
  if scores.orientation == LOW:
    return scores.scores <= per_record
  return scores.scores >= per_record
