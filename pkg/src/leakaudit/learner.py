"""Two-hidden-layer ReLU softmax network trained with (optionally noisy) Adam."""

from __future__ import annotations

import dataclasses
import math
import struct

import numpy as np

from leakaudit import accountant
from leakaudit.data import LabeledVector, SplitDataset

PROB_FLOOR = 1e-12
MAX_LOSS = -math.log(PROB_FLOOR)
DP_DELTA = 1e-5

_CKPT_MAGIC = b"LKMLP001"
_CKPT_HEADER = struct.Struct("<8sQQQ")


class TrainingDivergedError(RuntimeError):
  pass


@dataclasses.dataclass(eq=False)
class MlpModel:
  """Weights of a d -> h -> h -> C network.

  ``params`` holds ``[W1, b1, W2, b2, W3, b3]`` with ``W`` of shape
  (fan_in, fan_out).
  """

  params: list[np.ndarray]

  @property
  def n_features(self) -> int:
    return self.params[0].shape[0]

  @property
  def hidden_width(self) -> int:
    return self.params[0].shape[1]

  @property
  def n_classes(self) -> int:
    return self.params[-1].shape[0]

  def copy(self) -> "MlpModel":
    return MlpModel([p.copy() for p in self.params])

  def _check(self, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
      x = x[None, :]
    if x.shape[1] != self.n_features:
      raise ValueError(f"record has {x.shape[1]} features, model expects "
                       f"{self.n_features}.")
    return x

  def forward(self, x):
    """Returns (logits, hidden activations) for a batch."""
    w1, b1, w2, b2, w3, b3 = self.params
    a1 = np.maximum(x @ w1 + b1, 0.0)
    a2 = np.maximum(a1 @ w2 + b2, 0.0)
    return a2 @ w3 + b3, (a1, a2)

  def logits(self, x) -> np.ndarray:
    return self.forward(self._check(x))[0]

  def predict_proba(self, x) -> np.ndarray:
    z = self.logits(x)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)

  def predict(self, x) -> np.ndarray:
    return np.argmax(self.logits(x), axis=1)


def init_model(n_features: int, hidden_width: int, n_classes: int,
               rng: np.random.Generator) -> MlpModel:
  params = []
  for fan_in, fan_out in ((n_features, hidden_width),
                          (hidden_width, hidden_width),
                          (hidden_width, n_classes)):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    params.append(np.zeros(fan_out))
  return MlpModel(params)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
  """Per-row -log softmax(logits)[label], capped at -log(PROB_FLOOR)."""
  rows = np.arange(len(labels))
  top = np.argmax(logits, axis=1)
  m = logits[rows, top]
  shifted = np.exp(logits - m[:, None])
  shifted[rows, top] = 0.0
  # log1p keeps precision for the near-zero losses of memorized records.
  loss = (m - logits[rows, labels]) + np.log1p(shifted.sum(axis=1))
  return np.minimum(loss, MAX_LOSS)


def per_example_loss(model: MlpModel, x, labels) -> np.ndarray:
  labels = np.asarray(labels, dtype=np.int64)
  return cross_entropy(model.logits(x), labels)


def loss(model: MlpModel, record: LabeledVector) -> float:
  """Cross-entropy of one record."""
  features, label = record
  return float(per_example_loss(model, features, [label])[0])


def _backward(model: MlpModel, x, labels):
  """Per-layer inputs and output deltas of the summed batch loss.

  The gradient of example i's loss w.r.t. ``W_k`` is the outer product
  ``inputs[k][i] x deltas[k][i]``; w.r.t. ``b_k`` it is ``deltas[k][i]``.
  The probability floor is not differentiated through.
  """
  logits, (a1, a2) = model.forward(x)
  z = logits - logits.max(axis=1, keepdims=True)
  p = np.exp(z)
  p /= p.sum(axis=1, keepdims=True)
  d3 = p
  d3[np.arange(len(labels)), labels] -= 1.0
  w3, w2 = model.params[4], model.params[2]
  d2 = (d3 @ w3.T) * (a2 > 0)
  d1 = (d2 @ w2.T) * (a1 > 0)
  return (x, a1, a2), (d1, d2, d3)


def gradients(model: MlpModel, x, labels) -> list[np.ndarray]:
  """Gradient of the mean cross-entropy over the batch."""
  x = model._check(x)
  labels = np.asarray(labels, dtype=np.int64)
  inputs, deltas = _backward(model, x, labels)
  n = len(labels)
  grads = []
  for a, d in zip(inputs, deltas):
    grads.append(a.T @ d / n)
    grads.append(d.sum(axis=0) / n)
  return grads


def per_example_gradients(model: MlpModel, x, labels) -> list[np.ndarray]:
  """Materialized per-example gradients, each with a leading batch axis."""
  x = model._check(x)
  labels = np.asarray(labels, dtype=np.int64)
  inputs, deltas = _backward(model, x, labels)
  grads = []
  for a, d in zip(inputs, deltas):
    grads.append(np.einsum("ni,nj->nij", a, d))
    grads.append(d.copy())
  return grads


def per_example_grad_norms(model: MlpModel, x, labels) -> np.ndarray:
  x = model._check(x)
  labels = np.asarray(labels, dtype=np.int64)
  inputs, deltas = _backward(model, x, labels)
  return _norms(inputs, deltas)


def _norms(inputs, deltas):
  # ||a d^T||_F^2 = ||a||^2 ||d||^2, so no per-example matrix is formed.
  sq = np.zeros(len(deltas[0]))
  for a, d in zip(inputs, deltas):
    d_sq = np.einsum("ij,ij->i", d, d)
    sq += np.einsum("ij,ij->i", a, a) * d_sq + d_sq
  return np.sqrt(sq)


def clipped_gradient_sum(model: MlpModel, x, labels,
                         clip_norm: float) -> list[np.ndarray]:
  """Sum over the batch of per-example gradients clipped to ``clip_norm``."""
  x = model._check(x)
  labels = np.asarray(labels, dtype=np.int64)
  inputs, deltas = _backward(model, x, labels)
  norms = _norms(inputs, deltas)
  scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
  grads = []
  for a, d in zip(inputs, deltas):
    ds = d * scale[:, None]
    grads.append(a.T @ ds)
    grads.append(ds.sum(axis=0))
  return grads


def clip_per_example(grads: list[np.ndarray], clip_norm: float) -> list[np.ndarray]:
  """Clips materialized per-example gradients (see ``per_example_gradients``)."""
  n = len(grads[0])
  sq = sum(np.sum(g.reshape(n, -1)**2, axis=1) for g in grads)
  scale = np.minimum(1.0, clip_norm / np.maximum(np.sqrt(sq), 1e-300))
  return [g * scale.reshape((n,) + (1,) * (g.ndim - 1)) for g in grads]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
  """Optimizer and privacy settings.

  Defaults are batch 200, clip 4 and l2 1e-8; ``epochs`` is sized so a
  500-record member set is fit to 100% training accuracy.
  """

  hidden_width: int = 256
  learning_rate: float = 0.005
  batch_size: int = 200
  epochs: int = 200
  l2_penalty: float = 1e-8
  clip_norm: float = 4.0
  dp_mode: bool = False
  noise_multiplier: float = 1.0
  seed: int = 0

  def __post_init__(self):
    if self.epochs < 1:
      raise ValueError(f"epochs must be >= 1, got {self.epochs}.")
    if self.batch_size < 1:
      raise ValueError(f"batch_size must be >= 1, got {self.batch_size}.")
    if self.hidden_width < 1:
      raise ValueError("hidden_width must be >= 1.")
    if not self.learning_rate > 0:
      raise ValueError("learning_rate must be > 0.")
    if not self.l2_penalty >= 0:
      raise ValueError("l2_penalty must be >= 0.")
    if not self.clip_norm > 0:
      raise ValueError("clip_norm must be > 0.")
    if self.dp_mode and not self.noise_multiplier > 0:
      raise ValueError("noise_multiplier must be > 0 in DP mode.")

  def steps_for(self, n: int) -> int:
    return self.epochs * math.ceil(n / self.batch_size)

  def privacy_spec(self, n: int) -> accountant.SgdPrivacySpec:
    return accountant.SgdPrivacySpec(self.noise_multiplier,
                                     self.batch_size / n, self.steps_for(n))


@dataclasses.dataclass(eq=False)
class TrainedArtifact:
  model: MlpModel
  train_accuracy: float
  test_accuracy: float
  gdp: accountant.GdpParams | None = None
  privacy: accountant.PrivacyParams | None = None


class _Adam:

  def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
    self.m = [np.zeros_like(p) for p in params]
    self.v = [np.zeros_like(p) for p in params]
    self.t = 0

  def step(self, params, grads):
    self.t += 1
    c1 = 1 - self.beta1**self.t
    c2 = 1 - self.beta2**self.t
    for p, g, m, v in zip(params, grads, self.m, self.v):
      m *= self.beta1
      m += (1 - self.beta1) * g
      v *= self.beta2
      v += (1 - self.beta2) * g * g
      p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit(x: np.ndarray, labels: np.ndarray, n_classes: int,
        cfg: TrainConfig) -> MlpModel:
  """Trains a fresh network on (x, labels); deterministic given ``cfg.seed``.

  In DP mode every per-example gradient is clipped to ``clip_norm`` and
  Gaussian noise of std ``noise_multiplier * clip_norm`` is added to the
  batch sum before averaging.
  """
  x = np.asarray(x, dtype=np.float64)
  labels = np.asarray(labels, dtype=np.int64)
  n = len(labels)
  if cfg.batch_size > n:
    raise ValueError(f"batch_size {cfg.batch_size} exceeds training set size {n}.")
  rng = np.random.default_rng(cfg.seed)
  model = init_model(x.shape[1], cfg.hidden_width, n_classes, rng)
  opt = _Adam(model.params, cfg.learning_rate)
  for _ in range(cfg.epochs):
    order = rng.permutation(n)
    for start in range(0, n, cfg.batch_size):
      idx = order[start:start + cfg.batch_size]
      xb, yb = x[idx], labels[idx]
      if cfg.dp_mode:
        grads = clipped_gradient_sum(model, xb, yb, cfg.clip_norm)
        std = cfg.noise_multiplier * cfg.clip_norm
        grads = [(g + rng.normal(0.0, std, size=g.shape)) / len(idx)
                 for g in grads]
      else:
        grads = gradients(model, xb, yb)
      for k in (0, 2, 4):
        grads[k] = grads[k] + 2 * cfg.l2_penalty * model.params[k]
      opt.step(model.params, grads)
    if not all(np.all(np.isfinite(p)) for p in model.params):
      raise TrainingDivergedError("model parameters became non-finite.")
  batch_loss = per_example_loss(model, x[:cfg.batch_size], labels[:cfg.batch_size])
  if not np.all(np.isfinite(batch_loss)):
    raise TrainingDivergedError("training loss became non-finite.")
  return model


def accuracy(model: MlpModel, x, labels) -> float:
  return float(np.mean(model.predict(x) == np.asarray(labels)))


def train(ds: SplitDataset, cfg: TrainConfig, split: str = "train",
          test_split: str = "target_test") -> TrainedArtifact:
  """Trains on ``split`` of ``ds`` and reports accuracies and privacy spent."""
  members = getattr(ds, split)
  test = getattr(ds, test_split)
  model = fit(members.features, members.labels, ds.n_classes, cfg)
  art = TrainedArtifact(model, accuracy(model, members.features, members.labels),
                        accuracy(model, test.features, test.labels))
  if cfg.dp_mode:
    art.gdp = accountant.noisy_sgd_mu(cfg.privacy_spec(len(members)))
    art.privacy = accountant.PrivacyParams(
        accountant.dp_epsilon_for_delta(art.gdp, DP_DELTA), DP_DELTA)
  return art


def accuracy_loss(private_acc: float, baseline_acc: float) -> float:
  """Relative test-accuracy drop of a private model versus its baseline."""
  if baseline_acc <= 0:
    raise ZeroDivisionError("baseline accuracy must be > 0.")
  return 1.0 - private_acc / baseline_acc


def save_model(model: MlpModel, path) -> None:
  """Header (magic, d, h, C) then W1, b1, W2, b2, W3, b3 as little-endian f64."""
  with open(path, "wb") as fh:
    fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, model.n_features,
                               model.hidden_width, model.n_classes))
    for p in model.params:
      fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> MlpModel:
  with open(path, "rb") as fh:
    raw = fh.read()
  magic, d, h, c = _CKPT_HEADER.unpack_from(raw)
  if magic != _CKPT_MAGIC:
    raise ValueError(f"{path} is not a model checkpoint.")
  offset = _CKPT_HEADER.size
  params = []
  for shape in ((d, h), (h,), (h, h), (h,), (h, c), (c,)):
    count = int(np.prod(shape))
    params.append(np.frombuffer(raw, dtype="<f8", count=count,
                                offset=offset).reshape(shape).copy())
    offset += 8 * count
  return MlpModel(params)
