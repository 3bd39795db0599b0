"""Leakage metrics from confusion counts, and mean/deviation across runs."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from collections.abc import Mapping, Sequence

AGGREGATE_HEADER = ("metric", "mean", "std", "excluded_runs")
DEVIATION_KIND = "population"


class UndefinedMetricError(ValueError):
  """A rate or ratio whose denominator is zero."""


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
  tp: int
  fp: int
  tn: int
  fn: int

  def __post_init__(self):
    for name in ("tp", "fp", "tn", "fn"):
      if getattr(self, name) < 0:
        raise ValueError(f"{name} must be >= 0.")

  @property
  def members(self) -> int:
    return self.tp + self.fn

  @property
  def non_members(self) -> int:
    return self.fp + self.tn

  @property
  def predicted(self) -> int:
    return self.tp + self.fp

  @property
  def tpr(self) -> float:
    if self.members == 0:
      raise UndefinedMetricError("TPR is undefined without members.")
    return self.tp / self.members

  @property
  def fpr(self) -> float:
    if self.non_members == 0:
      raise UndefinedMetricError("FPR is undefined without non-members.")
    return self.fp / self.non_members

  def as_dict(self) -> dict[str, int]:
    return dataclasses.asdict(self)


def advantage(c: ConfusionCounts) -> float:
  """TPR - FPR."""
  return c.tpr - c.fpr


def empirical_ppv(c: ConfusionCounts) -> float:
  if c.predicted == 0:
    raise UndefinedMetricError("PPV is undefined with no positive predictions.")
  return c.tp / c.predicted


def analytic_ppv(tpr: float, fpr: float, gamma: float) -> float:
  """PPV of a pool with ``gamma`` non-members per member."""
  denom = tpr + gamma * fpr
  if denom <= 0:
    raise UndefinedMetricError("tpr + gamma * fpr must be > 0.")
  return tpr / denom


def try_metric(fn, *args):
  """``fn(*args)``, or None when the metric is undefined."""
  try:
    return fn(*args)
  except UndefinedMetricError:
    return None


@dataclasses.dataclass(frozen=True)
class MetricSummary:
  mean: float | None
  std: float | None
  excluded_runs: int


@dataclasses.dataclass(frozen=True)
class RunAggregate:
  """Per-metric mean and population standard deviation over ``runs`` runs."""

  runs: int
  metrics: dict[str, MetricSummary]

  def to_rows(self) -> list[tuple]:
    return [(name, s.mean, s.std, s.excluded_runs)
            for name, s in self.metrics.items()]

  def to_json(self) -> str:
    doc = {
        "runs": self.runs,
        "deviation": DEVIATION_KIND,
        "metrics": [dict(zip(AGGREGATE_HEADER, row)) for row in self.to_rows()],
    }
    return json.dumps(doc, indent=2, sort_keys=True)

  def write_csv(self, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(AGGREGATE_HEADER)
    for name, mean, std, excluded in self.to_rows():
      writer.writerow([name, _fmt(mean), _fmt(std), excluded])

  @classmethod
  def from_json(cls, text: str) -> "RunAggregate":
    doc = json.loads(text)
    return cls(doc["runs"], {
        m["metric"]: MetricSummary(m["mean"], m["std"], m["excluded_runs"])
        for m in doc["metrics"]
    })


def _fmt(x):
  return "" if x is None else repr(float(x))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
  n = len(values)
  mean = math.fsum(values) / n
  var = math.fsum((v - mean)**2 for v in values) / n
  return mean, math.sqrt(var)


def aggregate(runs: Sequence[Mapping[str, float | None]]) -> RunAggregate:
  """Mean and population std of each metric over runs.

  A None value marks a metric undefined in that run; such runs are left out
  of that metric's summary and counted in ``excluded_runs``.
  """
  if not runs:
    raise ValueError("aggregate needs at least one run.")
  names = []
  for run in runs:
    names.extend(k for k in run if k not in names)
  out = {}
  for name in names:
    values = [run.get(name) for run in runs]
    defined = [float(v) for v in values if v is not None]
    excluded = len(values) - len(defined)
    if defined:
      out[name] = MetricSummary(*mean_std(defined), excluded)
    else:
      out[name] = MetricSummary(None, None, excluded)
  return RunAggregate(len(runs), out)
