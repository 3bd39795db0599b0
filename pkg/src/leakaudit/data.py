"""Synthetic class-mixture data and the membership-experiment sampler."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
import struct
from typing import NamedTuple

import numpy as np

_MAGIC = b"LKDS0001"
# d, C, |train|, |target_test|, |holdout_train|, |holdout_test|, gamma, seed
_HEADER = struct.Struct("<8sIIQQQQdQ")
SPLIT_NAMES = ("train", "target_test", "holdout_train", "holdout_test")
# Per-split RNG stream ids; centroids get their own stream.
_STREAM_IDS = {"centroids": 0, "train": 1, "target_test": 2,
               "holdout_train": 3, "holdout_test": 4}
# Projection radius leaves room for float32 rounding of each coordinate.
_PROJECTION_RADIUS = 1.0 - 1e-6


class LabeledVector(NamedTuple):
  features: np.ndarray
  label: int


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
  """Parameters of the Gaussian class-mixture generator.

  Attributes:
    n_features: Feature dimension.
    n_classes: Number of classes; centroids sit on a sphere of radius
      ``class_separation``.
    class_separation: Distance of every class centroid from the origin.
    within_class_noise: Per-coordinate standard deviation around a centroid.
    seed: Root seed of all random streams.
  """

  n_features: int = 50
  n_classes: int = 25
  class_separation: float = 1.0
  within_class_noise: float = 0.6
  seed: int = 0

  def __post_init__(self):
    if self.n_features < 1:
      raise ValueError(f"n_features must be >= 1, got {self.n_features}.")
    if self.n_classes < 2:
      raise ValueError(f"n_classes must be >= 2, got {self.n_classes}.")
    if not self.class_separation > 0:
      raise ValueError("class_separation must be > 0.")
    if not self.within_class_noise > 0:
      raise ValueError("within_class_noise must be > 0.")
    if not 0 <= self.seed < 2**64:
      raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}.")


@dataclasses.dataclass(frozen=True, eq=False)
class Records:
  """A block of labeled records; features are float32 with norm <= 1."""

  features: np.ndarray
  labels: np.ndarray

  def __len__(self):
    return len(self.labels)

  def __getitem__(self, i) -> LabeledVector:
    return LabeledVector(self.features[i], int(self.labels[i]))

  @property
  def ids(self) -> np.ndarray:
    return record_ids(self.features)

  def take(self, index) -> "Records":
    return Records(self.features[index], self.labels[index])

  @staticmethod
  def concat(*blocks: "Records") -> "Records":
    return Records(np.concatenate([b.features for b in blocks]),
                   np.concatenate([b.labels for b in blocks]))


@dataclasses.dataclass(frozen=True, eq=False)
class SplitDataset:
  """Member set, non-member pool, and the adversary's disjoint holdout copy."""

  train: Records
  target_test: Records
  holdout_train: Records
  holdout_test: Records
  gamma: float
  n_classes: int
  seed: int = 0

  @property
  def prior_p(self) -> float:
    return 1.0 / (1.0 + self.gamma)

  @property
  def n_features(self) -> int:
    return self.train.features.shape[1]

  def splits(self) -> dict[str, Records]:
    return {name: getattr(self, name) for name in SPLIT_NAMES}


def record_ids(features: np.ndarray) -> np.ndarray:
  """64-bit identity of each record, hashed from its float32 feature bytes."""
  features = np.ascontiguousarray(features, dtype=np.float32)
  out = np.empty(len(features), dtype=np.uint64)
  for i, row in enumerate(features):
    out[i] = int.from_bytes(
        hashlib.blake2b(row.tobytes(), digest_size=8).digest(), "little")
  return out


def pool_size(n_train: int, gamma: float) -> int:
  # Tolerance absorbs float error in products such as 0.1 * 500.
  return int(math.ceil(gamma * n_train - 1e-9))


def _stream(seed: int, name: str) -> np.random.Generator:
  return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_IDS[name]]))


def _centroids(spec: SyntheticSpec) -> np.ndarray:
  rng = _stream(spec.seed, "centroids")
  directions = rng.standard_normal((spec.n_classes, spec.n_features))
  norms = np.linalg.norm(directions, axis=1, keepdims=True)
  return spec.class_separation * directions / norms


def _draw(spec: SyntheticSpec, centroids: np.ndarray, name: str,
          size: int) -> Records:
  # Labels and noise come from one stream, both consumed one value at a time,
  # so a larger draw extends a smaller one record by record.
  rng = _stream(spec.seed, name)
  labels = np.empty(size, dtype=np.int32)
  x = np.empty((size, spec.n_features))
  for i in range(size):
    labels[i] = int(rng.random() * spec.n_classes)
    x[i] = rng.standard_normal(spec.n_features)
  x = centroids[labels] + spec.within_class_noise * x
  norms = np.linalg.norm(x, axis=1, keepdims=True)
  x = np.where(norms > _PROJECTION_RADIUS, x * (_PROJECTION_RADIUS / norms), x)
  return Records(x.astype(np.float32), labels)


def generate(spec: SyntheticSpec, n_train: int, gamma: float) -> SplitDataset:
  """Draws member, non-member and holdout splits from the class mixture.

  Every split has its own random stream, so the member sets do not depend on
  ``gamma`` and the non-member pool for a smaller ``gamma`` is a prefix of the
  pool for a larger one.
  """
  if n_train < 1:
    raise ValueError(f"n_train must be >= 1, got {n_train}.")
  if not gamma > 0:
    raise ValueError(f"gamma must be > 0, got {gamma}.")
  centroids = _centroids(spec)
  n_pool = pool_size(n_train, gamma)
  return SplitDataset(
      train=_draw(spec, centroids, "train", n_train),
      target_test=_draw(spec, centroids, "target_test", n_pool),
      holdout_train=_draw(spec, centroids, "holdout_train", n_train),
      holdout_test=_draw(spec, centroids, "holdout_test", n_pool),
      gamma=float(gamma),
      n_classes=spec.n_classes,
      seed=spec.seed,
  )


def sample_candidate(ds: SplitDataset,
                     rng: np.random.Generator) -> tuple[LabeledVector, int]:
  """One draw of the membership experiment: a record and its membership bit."""
  if rng.random() < ds.prior_p:
    return ds.train[int(rng.integers(len(ds.train)))], 1
  return ds.target_test[int(rng.integers(len(ds.target_test)))], 0


def _record_dtype(d: int) -> np.dtype:
  return np.dtype([("x", "<f4", (d,)), ("y", "<i4")])


def save(ds: SplitDataset, path) -> None:
  """Flat binary file: fixed header, then (float32[d], int32) per record."""
  d = ds.n_features
  dtype = _record_dtype(d)
  with open(path, "wb") as fh:
    fh.write(_HEADER.pack(_MAGIC, d, ds.n_classes,
                          *(len(r) for r in ds.splits().values()),
                          ds.gamma, ds.seed))
    for block in ds.splits().values():
      rows = np.empty(len(block), dtype=dtype)
      rows["x"] = block.features
      rows["y"] = block.labels
      fh.write(rows.tobytes())


def load(path) -> SplitDataset:
  with open(path, "rb") as fh:
    raw = fh.read()
  magic, d, n_classes, *sizes, gamma, seed = _HEADER.unpack_from(raw)
  if magic != _MAGIC:
    raise ValueError(f"{path} is not a dataset file.")
  dtype = _record_dtype(d)
  offset = _HEADER.size
  blocks = {}
  for name, size in zip(SPLIT_NAMES, sizes):
    rows = np.frombuffer(raw, dtype=dtype, count=size, offset=offset)
    blocks[name] = Records(rows["x"].copy(), rows["y"].astype(np.int32))
    offset += size * dtype.itemsize
  return SplitDataset(**blocks, gamma=gamma, n_classes=n_classes, seed=seed)


def export_csv(ds: SplitDataset, fh) -> None:
  writer = csv.writer(fh, lineterminator="\n")
  writer.writerow(["split", "record_id", "label"] +
                  [f"x{j}" for j in range(ds.n_features)])
  for name, block in ds.splits().items():
    for rid, x, y in zip(block.ids, block.features, block.labels):
      writer.writerow([name, int(rid), int(y)] + [repr(float(v)) for v in x])
