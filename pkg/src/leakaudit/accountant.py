"""Closed-form f-DP and Gaussian-DP calculus.

Trade-off curves for (epsilon, delta)-DP and mu-GDP, the GDP accounting of
noisy mini-batch SGD, conversion between GDP and (epsilon, delta)-DP, and the
upper bounds that a DP guarantee places on membership advantage and PPV.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from collections.abc import Iterable, Sequence

import numpy as np
from scipy import special

# Smallest noise multiplier accepted by the noisy-SGD accountant.
MIN_NOISE_MULTIPLIER = 0.1
MAX_NOISE_MULTIPLIER = 1e6

BOUND_CURVE_HEADER = ("epsilon", "delta", "alpha", "gamma", "adv_bound", "ppv_bound")


class UnreachableBudgetError(ValueError):
  """No noise multiplier in the search range meets the requested budget."""


@dataclasses.dataclass(frozen=True)
class PrivacyParams:
  """An (epsilon, delta) differential privacy budget."""

  epsilon: float
  delta: float = 0.0

  def __post_init__(self):
    if not self.epsilon >= 0:
      raise ValueError(f"epsilon must be >= 0, got {self.epsilon}.")
    if not 0 <= self.delta < 1:
      raise ValueError(f"delta must be in [0, 1), got {self.delta}.")


@dataclasses.dataclass(frozen=True)
class GdpParams:
  """The mu parameter of Gaussian differential privacy."""

  mu: float

  def __post_init__(self):
    if not self.mu >= 0:
      raise ValueError(f"mu must be >= 0, got {self.mu}.")


@dataclasses.dataclass(frozen=True)
class SgdPrivacySpec:
  """Noise multiplier, sampling ratio and step count of noisy SGD."""

  noise_multiplier: float
  sampling_ratio: float
  steps: int

  def __post_init__(self):
    if not self.noise_multiplier > 0:
      raise ValueError(
          f"noise_multiplier must be > 0, got {self.noise_multiplier}.")
    if not 0 < self.sampling_ratio <= 1:
      raise ValueError(
          f"sampling_ratio must be in (0, 1], got {self.sampling_ratio}.")
    if int(self.steps) != self.steps or self.steps < 1:
      raise ValueError(f"steps must be a positive integer, got {self.steps}.")


def _check_alpha(alpha):
  alpha = np.asarray(alpha, dtype=float)
  if np.any(~((alpha >= 0) & (alpha <= 1))):
    raise ValueError(f"alpha must be in [0, 1], got {alpha}.")
  return alpha


def _scalar_or_array(x):
  return float(x) if np.ndim(x) == 0 else x


def normal_cdf(x):
  return special.ndtr(x)


def normal_quantile(q):
  return special.ndtri(q)


def tradeoff_eps_delta(params: PrivacyParams, alpha):
  """Type II error lower bound for an (epsilon, delta)-DP mechanism.

  Accepts a scalar or array ``alpha`` in [0, 1].
  """
  alpha = _check_alpha(alpha)
  eps, delta = params.epsilon, params.delta
  # exp(eps) * alpha overflows only where the branch is already negative.
  with np.errstate(over="ignore"):
    first = 1.0 - delta - np.exp(eps) * alpha
  second = np.exp(-eps) * (1.0 - delta - alpha)
  return _scalar_or_array(np.maximum(0.0, np.maximum(first, second)))


def tradeoff_gdp(params: GdpParams, alpha):
  """Gaussian trade-off curve ``Phi(Phi^-1(1 - alpha) - mu)``."""
  alpha = _check_alpha(alpha)
  # ndtri(1) = inf and ndtri(0) = -inf give the limits 0 and 1 for free.
  return _scalar_or_array(normal_cdf(normal_quantile(1.0 - alpha) - params.mu))


def compose_gdp(mus: Iterable[float]) -> GdpParams:
  mus = np.asarray(list(mus), dtype=float)
  if np.any(~(mus >= 0)):
    raise ValueError(f"all mu values must be >= 0, got {mus}.")
  return GdpParams(float(math.sqrt(np.sum(mus**2))))


def noisy_sgd_mu(spec: SgdPrivacySpec) -> GdpParams:
  """GDP parameter of T steps of Poisson-subsampled noisy SGD.

  Uses the central-limit closed form ``tau * sqrt(T * (exp(1/sigma^2) - 1))``.
  """
  if spec.noise_multiplier < MIN_NOISE_MULTIPLIER:
    raise ValueError(
        f"noise_multiplier {spec.noise_multiplier} is below "
        f"{MIN_NOISE_MULTIPLIER}; exp(1/sigma^2) is out of practical range.")
  growth = math.expm1(spec.noise_multiplier**-2)
  return GdpParams(spec.sampling_ratio * math.sqrt(spec.steps * growth))


def gdp_to_dp(params: GdpParams, epsilon: float) -> float:
  """delta(epsilon) of the (epsilon, delta)-DP curve equivalent to mu-GDP."""
  if not epsilon >= 0:
    raise ValueError(f"epsilon must be >= 0, got {epsilon}.")
  mu = params.mu
  if mu == 0:
    return 0.0
  first = normal_cdf(-epsilon / mu + mu / 2)
  # e^eps * Phi(-z) = erfcx(z / sqrt 2) / 2 * exp(-(eps/mu - mu/2)^2 / 2),
  # which never overflows and avoids cancelling eps against z^2 / 2.
  z = epsilon / mu + mu / 2
  w = epsilon / mu - mu / 2
  second = 0.5 * special.erfcx(z / math.sqrt(2)) * math.exp(-0.5 * w * w)
  return float(min(1.0, max(0.0, first - second)))


def dp_epsilon_for_delta(params: GdpParams, delta: float,
                         tol: float = 1e-9) -> float:
  """Smallest epsilon >= 0 whose delta(epsilon) is at most ``delta``.

  ``tol`` is an absolute tolerance, widened only where it falls below the
  float spacing of epsilon.
  """
  if not 0 < delta < 1:
    raise ValueError(f"delta must be in (0, 1), got {delta}.")
  if gdp_to_dp(params, 0.0) <= delta:
    return 0.0
  lo, hi = 0.0, 1.0
  while gdp_to_dp(params, hi) > delta:
    lo, hi = hi, 2 * hi
  while hi - lo > max(tol, 4 * math.ulp(hi)):
    mid = 0.5 * (lo + hi)
    if gdp_to_dp(params, mid) > delta:
      lo = mid
    else:
      hi = mid
  return hi


def epsilon_for_sgd(spec: SgdPrivacySpec, delta: float) -> float:
  return dp_epsilon_for_delta(noisy_sgd_mu(spec), delta)


def sigma_for_target_epsilon(target: PrivacyParams, sampling_ratio: float,
                             steps: int) -> float:
  """Noise multiplier at which noisy SGD spends ``target``.

  Bisects on log(sigma) over [0.1, 1e6].

  Raises:
    UnreachableBudgetError: if the target lies outside the epsilon range the
      search interval can produce.
  """
  if not target.epsilon > 0:
    raise ValueError(f"target epsilon must be > 0, got {target.epsilon}.")
  if not 0 < target.delta < 1:
    raise ValueError(f"target delta must be in (0, 1), got {target.delta}.")

  def eps_at(sigma):
    return epsilon_for_sgd(SgdPrivacySpec(sigma, sampling_ratio, steps),
                           target.delta)

  eps_loosest = eps_at(MIN_NOISE_MULTIPLIER)
  eps_tightest = eps_at(MAX_NOISE_MULTIPLIER)
  if target.epsilon > eps_loosest * 1.01:
    raise UnreachableBudgetError(
        f"epsilon={target.epsilon} exceeds {eps_loosest:.6g}, the budget spent "
        f"at the smallest allowed noise multiplier {MIN_NOISE_MULTIPLIER}.")
  if target.epsilon < eps_tightest / 1.01:
    raise UnreachableBudgetError(
        f"epsilon={target.epsilon} is below {eps_tightest:.6g}, the budget "
        f"spent at noise multiplier {MAX_NOISE_MULTIPLIER:g}.")

  lo, hi = math.log(MIN_NOISE_MULTIPLIER), math.log(MAX_NOISE_MULTIPLIER)
  for _ in range(200):
    mid = 0.5 * (lo + hi)
    if eps_at(math.exp(mid)) > target.epsilon:
      lo = mid
    else:
      hi = mid
    if hi - lo < 1e-12:
      break
  return math.exp(hi)


def _power(params: PrivacyParams, alpha: np.ndarray) -> np.ndarray:
  """1 - f_{eps,delta}(alpha), without subtracting f from 1.

  Each branch of f is rewritten so no term cancels when alpha is small.
  """
  eps, delta = params.epsilon, params.delta
  with np.errstate(over="ignore"):
    first = delta + np.exp(eps) * alpha
  second = -math.expm1(-eps) + math.exp(-eps) * (delta + alpha)
  return np.minimum(1.0, np.minimum(first, second))


def advantage_bound(params: PrivacyParams, alpha):
  """Largest membership advantage at false positive rate ``alpha``."""
  alpha = _check_alpha(alpha)
  return _scalar_or_array(np.maximum(0.0, _power(params, alpha) - alpha))


def max_advantage_bound(params: PrivacyParams, grid_size: int = 10_000) -> float:
  if grid_size < 2:
    raise ValueError(f"grid_size must be >= 2, got {grid_size}.")
  alphas = np.arange(1, grid_size + 1) / grid_size
  return float(np.max(advantage_bound(params, alphas)))


def ppv_bound(params: PrivacyParams, alpha, gamma: float):
  """Largest positive predictive value at FPR ``alpha`` and prior skew ``gamma``."""
  alpha = _check_alpha(alpha)
  if np.any(alpha == 0):
    raise ValueError("ppv_bound is undefined at alpha = 0.")
  if not gamma > 0:
    raise ValueError(f"gamma must be > 0, got {gamma}.")
  power = _power(params, alpha)
  return _scalar_or_array(power / (power + gamma * alpha))


def emit_bound_curves(params_list: Sequence[PrivacyParams],
                      alphas: Sequence[float],
                      gammas: Sequence[float]) -> list[tuple[float, ...]]:
  """Rows of (epsilon, delta, alpha, gamma, adv_bound, ppv_bound).

  Grid points with alpha = 0 have no PPV bound and are skipped.
  """
  if not params_list or len(alphas) == 0 or len(gammas) == 0:
    raise ValueError("bound curve grids must be non-empty.")
  rows = []
  for params in params_list:
    for alpha in alphas:
      if alpha == 0:
        continue
      adv = advantage_bound(params, alpha)
      for gamma in gammas:
        rows.append((params.epsilon, params.delta, float(alpha), float(gamma),
                     adv, ppv_bound(params, alpha, gamma)))
  return rows


def format_decimal(x: float, digits: int = 9) -> str:
  """Positional (non-scientific) rendering with ``digits`` significant digits."""
  if math.isinf(x):
    return "inf" if x > 0 else "-inf"
  return np.format_float_positional(x, precision=digits, unique=False,
                                    fractional=False, trim="-")


def write_bound_curves(rows, fh: io.TextIOBase) -> None:
  writer = csv.writer(fh, lineterminator="\n")
  writer.writerow(BOUND_CURVE_HEADER)
  for row in rows:
    writer.writerow([format_decimal(v) for v in row])
