"""Per-record attack scores with membership ground truth."""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

LOW = "low"    # low score indicates a member (loss-style)
HIGH = "high"  # high score indicates a member (confidence-style)
CSV_HEADER = ("record_id", "class", "score", "is_member", "orientation")


@dataclasses.dataclass(frozen=True, eq=False)
class AttackScores:
  record_ids: np.ndarray
  scores: np.ndarray
  labels: np.ndarray
  is_member: np.ndarray
  orientation: str

  def __post_init__(self):
    if self.orientation not in (LOW, HIGH):
      raise ValueError(f"orientation must be {LOW!r} or {HIGH!r}.")
    n = len(self.scores)
    for name in ("record_ids", "labels", "is_member"):
      if len(getattr(self, name)) != n:
        raise ValueError(f"{name} has {len(getattr(self, name))} entries, "
                         f"expected {n}.")
    if not np.all(np.isfinite(self.scores)):
      raise ValueError("attack scores must be finite.")

  @classmethod
  def build(cls, scores, is_member, orientation, labels=None, record_ids=None):
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    return cls(
        record_ids=(np.arange(n, dtype=np.uint64) if record_ids is None
                    else np.asarray(record_ids, dtype=np.uint64)),
        scores=scores,
        labels=(np.zeros(n, dtype=np.int64) if labels is None
                else np.asarray(labels, dtype=np.int64)),
        is_member=np.asarray(is_member, dtype=bool),
        orientation=orientation,
    )

  def __len__(self):
    return len(self.scores)

  def subset(self, mask) -> "AttackScores":
    return AttackScores(self.record_ids[mask], self.scores[mask],
                        self.labels[mask], self.is_member[mask],
                        self.orientation)

  def with_membership(self, is_member) -> "AttackScores":
    return dataclasses.replace(self, is_member=np.asarray(is_member, dtype=bool))

  def write_csv(self, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rid, y, s, m in zip(self.record_ids, self.labels, self.scores,
                            self.is_member):
      writer.writerow([int(rid), int(y), repr(float(s)), int(m),
                       self.orientation])

  @classmethod
  def read_csv(cls, fh) -> "AttackScores":
    rows = list(csv.DictReader(fh))
    orientations = {r["orientation"] for r in rows}
    if len(orientations) > 1:
      raise ValueError("mixed score orientations in one file.")
    return cls.build(
        scores=[float(r["score"]) for r in rows],
        is_member=[int(r["is_member"]) for r in rows],
        orientation=orientations.pop() if rows else LOW,
        labels=[int(r["class"]) for r in rows],
        record_ids=[int(r["record_id"]) for r in rows],
    )


def decide(scores: AttackScores, phi: float) -> np.ndarray:
  """Member predictions at threshold ``phi`` (inclusive)."""
  if scores.orientation == LOW:
    return scores.scores <= phi
  return scores.scores >= phi
