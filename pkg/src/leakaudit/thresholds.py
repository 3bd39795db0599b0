"""Goal-driven decision threshold selection on holdout attack scores."""

from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Sequence

import numpy as np

from leakaudit import metrics
from leakaudit.metrics import ConfusionCounts
from leakaudit.scores import HIGH, LOW, AttackScores, decide

DEFAULT_MORGAN_ALPHAS = (1e-4, 1e-3, 5e-3, 1e-2, 2e-2, 5e-2)


class UnreachableFPRError(ValueError):
  """No threshold in the search space meets the false positive constraint."""


@dataclasses.dataclass(frozen=True)
class MinFPR:
  name = "min_fpr"


@dataclasses.dataclass(frozen=True)
class FixedFPR:
  alpha: float
  name = "fixed_fpr"

  def __post_init__(self):
    if not 0 < self.alpha <= 1:
      raise ValueError(f"alpha must be in (0, 1], got {self.alpha}.")


@dataclasses.dataclass(frozen=True)
class MaxPPV:
  name = "max_ppv"


@dataclasses.dataclass(frozen=True)
class MaxAdv:
  name = "max_adv"


@dataclasses.dataclass(frozen=True)
class FixedPhi:
  phi: float
  name = "fixed_phi"


ThresholdGoal = MinFPR | FixedFPR | MaxPPV | MaxAdv | FixedPhi


def goal_label(goal) -> str:
  if isinstance(goal, FixedFPR):
    return f"fixed_fpr@{goal.alpha:g}"
  return goal.name


def parse_goal(text: str, phi: float | None = None):
  """Parses ``min_fpr``, ``fixed_fpr@0.01``, ``max_ppv``, ``max_adv``, ``fixed_phi``."""
  name, _, arg = text.partition("@")
  if name == "min_fpr":
    return MinFPR()
  if name == "fixed_fpr":
    return FixedFPR(float(arg) if arg else 0.01)
  if name == "max_ppv":
    return MaxPPV()
  if name == "max_adv":
    return MaxAdv()
  if name == "fixed_phi":
    return FixedPhi(float(arg) if arg else phi)
  raise ValueError(f"unknown threshold goal {text!r}.")


@dataclasses.dataclass(frozen=True)
class SelectedThreshold:
  """A threshold and the holdout metrics it achieves.

  ``achieved_ppv`` is None when the threshold admits no holdout record.
  """

  phi: float
  achieved_alpha: float
  achieved_tpr: float
  achieved_adv: float
  achieved_ppv: float | None
  counts: ConfusionCounts

  @property
  def feasible(self) -> bool:
    return self.counts.predicted > 0

  def as_dict(self) -> dict:
    return {
        "phi": self.phi,
        "alpha": self.achieved_alpha,
        "tpr": self.achieved_tpr,
        "adv": self.achieved_adv,
        "ppv": self.achieved_ppv,
        "counts": self.counts.as_dict(),
    }


@dataclasses.dataclass(frozen=True)
class MorganThresholds:
  phi_L: float
  phi_U: float
  phi_M: float

  def __post_init__(self):
    if not self.phi_L <= self.phi_U:
      raise ValueError(f"phi_L={self.phi_L} exceeds phi_U={self.phi_U}.")

  def serialize(self) -> str:
    return ";".join(repr(float(v)) for v in (self.phi_L, self.phi_U, self.phi_M))


def apply_threshold(target: AttackScores, phi: float) -> ConfusionCounts:
  return counts_from_decisions(decide(target, phi), target.is_member)


def counts_from_decisions(pred, is_member) -> ConfusionCounts:
  pred = np.asarray(pred, dtype=bool)
  is_member = np.asarray(is_member, dtype=bool)
  tp = int(np.sum(pred & is_member))
  fp = int(np.sum(pred & ~is_member))
  return ConfusionCounts(tp=tp, fp=fp, tn=int(np.sum(~is_member)) - fp,
                         fn=int(np.sum(is_member)) - tp)


def summarize(counts: ConfusionCounts, phi: float) -> SelectedThreshold:
  return SelectedThreshold(
      phi=float(phi),
      achieved_alpha=counts.fpr,
      achieved_tpr=counts.tpr,
      achieved_adv=metrics.advantage(counts),
      achieved_ppv=metrics.try_metric(metrics.empirical_ppv, counts),
      counts=counts,
  )


def threshold_positions(scores: AttackScores):
  """Every decision-distinct threshold, strictest first.

  Returns (phis, tp, fp): position j admits the j most member-like distinct
  score values; phis[0] admits nothing and phis[-1] admits everything.
  """
  s = scores.scores
  uniq = np.unique(s)
  if scores.orientation == HIGH:
    uniq = uniq[::-1]
  mids = 0.5 * (uniq[:-1] + uniq[1:])
  if scores.orientation == LOW:
    # A midpoint that rounds up onto the next value would admit it.
    mids = np.where(mids >= uniq[1:], uniq[:-1], mids)
    phis = np.concatenate([[-math.inf], mids, [math.inf]])
  else:
    mids = np.where(mids <= uniq[1:], uniq[:-1], mids)
    phis = np.concatenate([[math.inf], mids, [-math.inf]])
  # Tier index of each record in member-likeness order.
  if scores.orientation == LOW:
    tier = np.searchsorted(uniq, s)
  else:
    tier = np.searchsorted(-uniq, -s)
  k = len(uniq)
  member_tiers = np.bincount(tier[scores.is_member], minlength=k)
  other_tiers = np.bincount(tier[~scores.is_member], minlength=k)
  tp = np.concatenate([[0], np.cumsum(member_tiers)])
  fp = np.concatenate([[0], np.cumsum(other_tiers)])
  return phis, tp, fp


def _best(keys: Sequence[tuple], candidates: Sequence[int]) -> int:
  """Index among ``candidates`` with the lexicographically largest key."""
  best = candidates[0]
  for j in candidates[1:]:
    if keys[j] > keys[best]:
      best = j
  return best


class _Ratio:
  """Exact comparison of non-negative fractions a / b."""

  __slots__ = ("a", "b")

  def __init__(self, a, b):
    self.a, self.b = a, b

  def __gt__(self, other):
    return self.a * other.b > other.a * self.b

  def __eq__(self, other):
    return self.a * other.b == other.a * self.b


def select_threshold(holdout: AttackScores, goal,
                     gamma: float | None = None) -> SelectedThreshold:
  """Chooses the threshold meeting ``goal`` on the holdout scores.

  Candidates are the midpoints between adjacent distinct scores plus the
  two infinite sentinels. Ties are broken toward the threshold admitting the
  most records. PPV is computed from raw holdout counts; pass ``gamma`` to
  score PPV as TPR / (TPR + gamma * FPR) instead.

  Raises:
    ValueError: if the holdout lacks members or non-members.
  """
  n_mem = int(np.sum(holdout.is_member))
  n_non = len(holdout) - n_mem
  if n_mem == 0 or n_non == 0:
    raise ValueError("holdout needs at least one member and one non-member.")
  if isinstance(goal, FixedPhi):
    return summarize(apply_threshold(holdout, goal.phi), goal.phi)

  phis, tp, fp = threshold_positions(holdout)
  tp = [int(v) for v in tp]
  fp = [int(v) for v in fp]
  positions = list(range(len(phis)))

  if isinstance(goal, FixedFPR):
    candidates = [j for j in positions if fp[j] / n_non <= goal.alpha]
    if not candidates:
      raise UnreachableFPRError(f"no threshold reaches FPR <= {goal.alpha}.")
    keys = [(tp[j], tp[j] + fp[j]) for j in positions]
  elif isinstance(goal, MinFPR):
    tier = min(fp[j] for j in positions if fp[j] > 0)
    candidates = [j for j in positions if fp[j] == tier]
    keys = [(tp[j], tp[j] + fp[j]) for j in positions]
  elif isinstance(goal, MaxPPV):
    candidates = [j for j in positions if tp[j] + fp[j] > 0]
    if gamma is None:
      keys = [(_Ratio(tp[j], tp[j] + fp[j]), tp[j] + fp[j]) for j in positions]
    else:
      keys = [(_Ratio(tp[j] * n_non, tp[j] * n_non + gamma * fp[j] * n_mem),
               tp[j] + fp[j]) if tp[j] + fp[j] else None for j in positions]
  elif isinstance(goal, MaxAdv):
    candidates = positions
    keys = [(tp[j] * n_non - fp[j] * n_mem, tp[j] + fp[j]) for j in positions]
  else:
    raise TypeError(f"unknown threshold goal {goal!r}.")

  j = _best(keys, candidates)
  counts = ConfusionCounts(tp=tp[j], fp=fp[j], tn=n_non - fp[j], fn=n_mem - tp[j])
  return summarize(counts, phis[j])


def morgan_mask(loss_scores: np.ndarray, ratio_scores: np.ndarray,
                th: MorganThresholds) -> np.ndarray:
  return ((loss_scores >= th.phi_L) & (loss_scores <= th.phi_U)
          & (ratio_scores >= th.phi_M))


def morgan_counts(loss: AttackScores, ratio: AttackScores,
                  th: MorganThresholds) -> ConfusionCounts:
  _check_paired(loss, ratio)
  return counts_from_decisions(morgan_mask(loss.scores, ratio.scores, th),
                               loss.is_member)


def _check_paired(loss: AttackScores, ratio: AttackScores):
  if not np.array_equal(loss.record_ids, ratio.record_ids):
    raise ValueError("loss and ratio scores must cover the same records in "
                     "the same order.")
  if loss.orientation != LOW or ratio.orientation != HIGH:
    raise ValueError("expected low-is-member losses and high-is-member ratios.")


def _unique_feasible_phis(scores: AttackScores, alphas, extra, sentinel):
  out = []
  for alpha in alphas:
    sel = select_threshold(scores, FixedFPR(alpha))
    if sel.feasible:
      out.append(sel.phi)
  out.extend(extra)
  out.append(sentinel)
  seen, uniq = set(), []
  for v in out:
    if v not in seen:
      seen.add(v)
      uniq.append(v)
  return uniq


def select_morgan(holdout_loss: AttackScores, holdout_ratio: AttackScores,
                  gamma: float | None = None,
                  alpha_grid: Sequence[float] = DEFAULT_MORGAN_ALPHAS
                  ) -> MorganThresholds:
  """Joint (phi_L, phi_U, phi_M) search maximizing holdout PPV.

  Upper-loss and ratio candidates come from fixed-FPR selection at every
  alpha in ``alpha_grid``, plus the max-PPV threshold of each single attack
  and a disabled gate, so the search contains the best single-threshold loss
  and ratio rules. For each pair, every holdout loss value up to phi_U is
  tried as phi_L. PPV ties go to more true positives, then the lowest phi_L.

  Raises:
    UnreachableFPRError: if no cell admits any holdout record.
  """
  _check_paired(holdout_loss, holdout_ratio)
  uppers = _unique_feasible_phis(
      holdout_loss, alpha_grid,
      [select_threshold(holdout_loss, MaxPPV(), gamma).phi], math.inf)
  ratios = _unique_feasible_phis(
      holdout_ratio, alpha_grid,
      [select_threshold(holdout_ratio, MaxPPV(), gamma).phi], -math.inf)

  loss = holdout_loss.scores
  ratio = holdout_ratio.scores
  member = holdout_loss.is_member
  n_mem = int(np.sum(member))
  n_non = len(member) - n_mem
  all_losses = np.unique(loss)

  best_key, best = None, None
  for phi_u in uppers:
    lower_grid = all_losses[all_losses <= phi_u]
    if len(lower_grid) == 0:
      continue
    for phi_m in ratios:
      gate = (loss <= phi_u) & (ratio >= phi_m)
      mem_sorted = np.sort(loss[gate & member])
      non_sorted = np.sort(loss[gate & ~member])
      # Records with loss >= phi_L, for every phi_L in lower_grid.
      tp = len(mem_sorted) - np.searchsorted(mem_sorted, lower_grid, side="left")
      fp = len(non_sorted) - np.searchsorted(non_sorted, lower_grid, side="left")
      valid = tp + fp > 0
      if not np.any(valid):
        continue
      # Distinct fractions with denominators this small never round to the
      # same double, so float PPV comparisons are exact.
      with np.errstate(invalid="ignore", divide="ignore"):
        if gamma is None:
          ppv = tp / (tp + fp)
        else:
          ppv = tp * n_non / (tp * n_non + gamma * fp * n_mem)
      ppv = np.where(valid, ppv, -1.0)
      top = ppv == ppv.max()
      most_tp = top & (tp == tp[top].max())
      j = int(np.flatnonzero(most_tp)[0])  # lower_grid ascends
      key = (float(ppv[j]), int(tp[j]), -float(lower_grid[j]))
      if best_key is None or key > best_key:
        best_key = key
        best = MorganThresholds(float(lower_grid[j]), float(phi_u),
                                float(phi_m))
  if best is None:
    raise UnreachableFPRError("no Morgan threshold triple admits any record.")
  return best


def selection_document(goal, selection) -> str:
  """JSON record of a selection, one row of a threshold table."""
  if isinstance(selection, MorganThresholds):
    doc = {"goal": "max_ppv", "phi": selection.serialize()}
  else:
    doc = {"goal": goal_label(goal), **selection.as_dict()}
  return json.dumps(doc, sort_keys=True)
