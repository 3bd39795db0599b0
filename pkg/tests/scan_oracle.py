"""Exhaustive single-threshold scan, written without the package's search.

Every decision set a single threshold can produce is enumerated by placing
an inclusive threshold at each distinct score, plus the reject-all rule.
Metrics are compared as exact fractions.
"""

from fractions import Fraction

import numpy as np

from leakaudit.scores import LOW, AttackScores
from leakaudit.thresholds import FixedFPR, FixedPhi, MaxAdv, MaxPPV, MinFPR


def brute_force_sets(scores: AttackScores):
  """(tp, fp) of every decision set a single threshold can produce.

  Thresholds are placed at each distinct score itself (inclusive), plus the
  reject-all rule; no midpoint arithmetic is involved.
  """
  s, m = scores.scores, scores.is_member
  out = [(0, 0)]
  for t in np.unique(s):
    pred = s <= t if scores.orientation == LOW else s >= t
    out.append((int(np.sum(pred & m)), int(np.sum(pred & ~m))))
  return out


def oracle(scores: AttackScores, goal, gamma=None):
  """Best (tp, fp) for ``goal`` by exhaustive scan, ties to most admitted."""
  n_mem = int(np.sum(scores.is_member))
  n_non = len(scores) - n_mem
  sets = brute_force_sets(scores)
  if isinstance(goal, FixedPhi):
    s, m = scores.scores, scores.is_member
    pred = s <= goal.phi if scores.orientation == LOW else s >= goal.phi
    return None, (int(np.sum(pred & m)), int(np.sum(pred & ~m)))
  if isinstance(goal, FixedFPR):
    # alpha is read as the decimal it was written as, so FPR 3/10 meets 0.3.
    limit = Fraction(repr(goal.alpha))
    pool = [c for c in sets if Fraction(c[1], n_non) <= limit]
    value = lambda c: Fraction(c[0])
  elif isinstance(goal, MinFPR):
    tier = min(c[1] for c in sets if c[1] > 0)
    pool = [c for c in sets if c[1] == tier]
    value = lambda c: Fraction(c[0])
  elif isinstance(goal, MaxPPV):
    pool = [c for c in sets if c[0] + c[1] > 0]
    if gamma is None:
      value = lambda c: Fraction(c[0], c[0] + c[1])
    else:
      g = Fraction(gamma)
      value = lambda c: (Fraction(c[0], n_mem) /
                         (Fraction(c[0], n_mem) + g * Fraction(c[1], n_non)))
  elif isinstance(goal, MaxAdv):
    pool = sets
    value = lambda c: Fraction(c[0], n_mem) - Fraction(c[1], n_non)
  best = max(value(c) for c in pool)
  winners = [c for c in pool if value(c) == best]
  return best, max(winners, key=lambda c: c[0] + c[1])
