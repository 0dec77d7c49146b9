"""Mask-and-replace discrete diffusion over codebook indices.

States 0..K-1 are ordinary codebook indices and state K is [MASK]. Each forward
step keeps a token with probability alpha_t, replaces it uniformly with
probability K * beta_t (staying put is one of the K outcomes) and masks it with
probability gamma_t. [MASK] is absorbing.

Matrices are column-stochastic: Q[destination, source].
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Optional, Protocol, Sequence, Union

import numpy as np
from tqdm import tqdm

from codecomposer.config import LOG_INDENT, DiffusionConfig, OptimizerSettings
from codecomposer.errors import DiffusionError, NumericsError, ScheduleError
from codecomposer.numerics import (
  AdamW, Tensor, categorical_kl, cross_entropy, matmul, mul, softmax, tensor_mean, tensor_sum,
)
from codecomposer.utils import DivergenceMonitor
from codecomposer.vqvae import TokenSequence

if TYPE_CHECKING:
  from codecomposer.denoiser import DenoiserModel


EXACT_VLB_LIMIT = 200_000
SUM_TOLERANCE = 1e-6

TokenInput = Union[TokenSequence, np.ndarray, Sequence[int]]


class X0Predictor(Protocol):
  """Anything producing p(x0 | x_t, y) over the K ordinary states."""

  codebook_size: int

  def predict(self, xt: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(N, L) tokens, (N,) steps, (N,) styles -> (N, L, K) probabilities."""
    ...

  def logits(self, xt: np.ndarray, t: np.ndarray, y: np.ndarray,
             training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    ...


class UniformPredictor:
  """Predicts the uniform distribution everywhere. Reference for untrained behavior."""

  def __init__(self, codebook_size: int):
    self.codebook_size = codebook_size

  def predict(self, xt: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    xt = np.asarray(xt)
    return np.full(xt.shape + (self.codebook_size,), 1.0 / self.codebook_size)

  def logits(self, xt: np.ndarray, t: np.ndarray, y: np.ndarray,
             training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    xt = np.asarray(xt)
    return Tensor(np.zeros(xt.shape + (self.codebook_size,)))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
  """Per-step (alpha, beta, gamma) and their cumulative counterparts.

  Per-step arrays have length T and index t - 1. Cumulative arrays have length
  T + 1 and index t, with entry 0 the identity (alpha_bar = 1, gamma_bar = 0).
  """

  codebook_size: int
  alphas: np.ndarray
  betas: np.ndarray
  gammas: np.ndarray
  alpha_bars: np.ndarray
  beta_bars: np.ndarray
  gamma_bars: np.ndarray

  @property
  def timesteps(self) -> int:
    return int(self.alphas.size)

  @property
  def mask_token(self) -> int:
    return self.codebook_size

  @property
  def states(self) -> int:
    return self.codebook_size + 1

  @classmethod
  def from_steps(cls, alphas: Sequence[float], gammas: Sequence[float], codebook_size: int) -> "NoiseSchedule":
    """Build from per-step keep and mask probabilities; beta fills the remainder."""
    if codebook_size < 2:
      raise ScheduleError(f"codebook size must be at least 2, got {codebook_size}")
    alphas = np.asarray(alphas, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.shape != gammas.shape or alphas.size == 0:
      raise ScheduleError("alphas and gammas must be equal-length non-empty sequences")
    betas = (1.0 - alphas - gammas) / codebook_size
    for name, values in (("alpha", alphas), ("beta", betas), ("gamma", gammas)):
      bad = np.flatnonzero((values < -1e-12) | (values > 1 + 1e-12))
      if bad.size:
        t = int(bad[0]) + 1
        raise ScheduleError(f"{name}_{t} = {values[bad[0]]:.6g} outside [0, 1]")

    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    gamma_bars = np.concatenate([[0.0], 1.0 - np.cumprod(1.0 - gammas)])
    beta_bars = (1.0 - alpha_bars - gamma_bars) / codebook_size
    schedule = cls(codebook_size, alphas, betas, gammas, alpha_bars, beta_bars, gamma_bars)
    schedule.validate()
    return schedule

  def validate(self) -> None:
    k = self.codebook_size
    step_sums = self.alphas + k * self.betas + self.gammas
    if np.any(np.abs(step_sums - 1.0) > 1e-12):
      raise ScheduleError("alpha_t + K beta_t + gamma_t != 1")
    cumulative_sums = self.alpha_bars + k * self.beta_bars + self.gamma_bars
    if np.any(np.abs(cumulative_sums - 1.0) > 1e-10):
      raise ScheduleError("cumulative alpha + K beta + gamma != 1")
    if np.any(self.beta_bars < -1e-15):
      raise ScheduleError("cumulative beta is negative")
    if np.any(np.diff(self.alpha_bars) >= 0):
      t = int(np.flatnonzero(np.diff(self.alpha_bars) >= 0)[0]) + 1
      raise ScheduleError(f"cumulative alpha must be strictly decreasing (fails at t={t})")
    if np.any(np.diff(self.gamma_bars) <= 0):
      t = int(np.flatnonzero(np.diff(self.gamma_bars) <= 0)[0]) + 1
      raise ScheduleError(f"cumulative gamma must be strictly increasing (fails at t={t})")

  def check_step(self, t: int, allow_zero: bool = False) -> int:
    low = 0 if allow_zero else 1
    if not low <= int(t) <= self.timesteps:
      raise DiffusionError(f"timestep {t} outside [{low}, {self.timesteps}]")
    return int(t)

  def rows(self) -> list[dict[str, float]]:
    """One record per step for the schedule dump."""
    return [
      {
        "t": t,
        "alpha": float(self.alphas[t - 1]),
        "beta": float(self.betas[t - 1]),
        "gamma": float(self.gammas[t - 1]),
        "alpha_bar": float(self.alpha_bars[t]),
        "beta_bar": float(self.beta_bars[t]),
        "gamma_bar": float(self.gamma_bars[t]),
      }
      for t in range(1, self.timesteps + 1)
    ]


def build_schedule(timesteps: int, codebook_size: int, gamma_bar_final: float,
                   alpha_bar_final: float) -> NoiseSchedule:
  """Linear interpolation of the cumulative keep and mask probabilities.

  alpha_bar goes from 1 to alpha_bar_final and gamma_bar from 0 to
  gamma_bar_final; per-step values are recovered from consecutive ratios.
  """
  if timesteps < 1:
    raise ScheduleError(f"timesteps must be >= 1, got {timesteps}")
  if not 0 < alpha_bar_final < 1:
    raise ScheduleError(f"alpha_bar_final must be in (0, 1), got {alpha_bar_final}")
  if not 0 < gamma_bar_final < 1:
    raise ScheduleError(f"gamma_bar_final must be in (0, 1), got {gamma_bar_final}")
  if alpha_bar_final + gamma_bar_final >= 1:
    raise ScheduleError("alpha_bar_final + gamma_bar_final must be < 1")

  fraction = np.arange(timesteps + 1) / timesteps
  alpha_bars = 1.0 - fraction * (1.0 - alpha_bar_final)
  gamma_bars = fraction * gamma_bar_final
  alphas = alpha_bars[1:] / alpha_bars[:-1]
  gammas = (gamma_bars[1:] - gamma_bars[:-1]) / (1.0 - gamma_bars[:-1])
  return NoiseSchedule.from_steps(alphas, gammas, codebook_size)


def schedule_from_config(config: DiffusionConfig, codebook_size: int) -> NoiseSchedule:
  return build_schedule(config.timesteps, codebook_size, config.gamma_bar_final, config.alpha_bar_final)


def transition_matrix(schedule: NoiseSchedule, t: int) -> np.ndarray:
  """Q_t as a (K+1) x (K+1) column-stochastic matrix."""
  t = schedule.check_step(t)
  k = schedule.codebook_size
  return _mask_and_replace(k, schedule.alphas[t - 1], schedule.betas[t - 1], schedule.gammas[t - 1])


def cumulative_matrix(schedule: NoiseSchedule, t: int) -> np.ndarray:
  """Q_t ... Q_1 in closed form; the identity at t = 0."""
  t = schedule.check_step(t, allow_zero=True)
  k = schedule.codebook_size
  return _mask_and_replace(k, schedule.alpha_bars[t], schedule.beta_bars[t], schedule.gamma_bars[t])


def _mask_and_replace(k: int, alpha: float, beta: float, gamma: float) -> np.ndarray:
  q = np.zeros((k + 1, k + 1))
  q[:k, :k] = beta
  q[np.arange(k), np.arange(k)] += alpha
  q[k, :k] = gamma
  q[k, k] = 1.0
  return q


def cumulative_marginal(schedule: NoiseSchedule, t: int, x0: int) -> np.ndarray:
  """q(x_t | x_0) over the K + 1 states."""
  _check_clean_token(schedule, x0)
  return cumulative_matrix(schedule, t)[:, int(x0)].copy()


def _check_clean_token(schedule: NoiseSchedule, x0: int) -> None:
  if not 0 <= int(x0) < schedule.codebook_size:
    raise DiffusionError(f"x0 must be an ordinary token in [0, {schedule.codebook_size}), got {x0}")


def _as_tokens(tokens: TokenInput) -> np.ndarray:
  if isinstance(tokens, TokenSequence):
    return tokens.tokens
  return np.asarray(tokens, dtype=np.int64)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
  """One draw per row of the last axis; zero-probability states are never drawn."""
  cdf = np.cumsum(probs, axis=-1)
  cdf = cdf / cdf[..., -1:]
  u = rng.random(probs.shape[:-1])
  return (cdf <= u[..., None]).sum(axis=-1).astype(np.int64)


def q_forward_sample(x0: TokenInput, t: Union[int, np.ndarray], schedule: NoiseSchedule,
                     rng: np.random.Generator) -> Union[TokenSequence, np.ndarray]:
  """Corrupt x0 to x_t, each position independently.

  `t` is a single step or one step per leading row of a batched (B, L) input.
  """
  tokens = _as_tokens(x0)
  k = schedule.codebook_size
  if tokens.size and (tokens.min() < 0 or tokens.max() >= k):
    raise DiffusionError("x0 must not contain [MASK] or out-of-range tokens")
  steps = np.asarray(t, dtype=np.int64)
  if steps.size and (steps.min() < 0 or steps.max() > schedule.timesteps):
    raise DiffusionError(f"timestep outside [0, {schedule.timesteps}]")
  if steps.ndim:
    steps = steps.reshape(steps.shape + (1,) * (tokens.ndim - steps.ndim))

  beta_bar = np.broadcast_to(schedule.beta_bars[steps], tokens.shape)
  stay = np.broadcast_to(schedule.alpha_bars[steps], tokens.shape) + beta_bar
  probs = np.empty(tokens.shape + (k + 1,))
  probs[..., :k] = beta_bar[..., None]
  np.put_along_axis(probs, tokens[..., None], stay[..., None], axis=-1)
  probs[..., k] = np.broadcast_to(schedule.gamma_bars[steps], tokens.shape)
  xt = sample_categorical(probs, rng)
  if isinstance(x0, TokenSequence):
    return TokenSequence(xt, k, x0.style)
  return xt


@lru_cache(maxsize=512)
def posterior_table(schedule: NoiseSchedule, t: int) -> tuple[np.ndarray, np.ndarray]:
  """U[x_t, x_{t-1}, x0] = q(x_{t-1} | x_t, x0) for every state pair.

  Returns (table, possible) where possible[x_t, x0] is False when x_t cannot be
  reached from x0 in t steps; those table columns are zero.
  """
  t = schedule.check_step(t)
  k = schedule.codebook_size
  step = transition_matrix(schedule, t)
  previous = cumulative_matrix(schedule, t - 1)[:, :k]
  unnormalized = step[:, :, None] * previous[None, :, :]
  totals = unnormalized.sum(axis=1)
  possible = totals > 0
  table = np.where(possible[:, None, :], unnormalized / np.where(possible, totals, 1.0)[:, None, :], 0.0)
  table.setflags(write=False)
  possible.setflags(write=False)
  return table, possible


def q_posterior(xt: int, x0: int, schedule: NoiseSchedule, t: int) -> np.ndarray:
  """q(x_{t-1} | x_t, x0) over the K + 1 states."""
  _check_clean_token(schedule, x0)
  if not 0 <= int(xt) <= schedule.codebook_size:
    raise DiffusionError(f"x_t must be in [0, {schedule.codebook_size}], got {xt}")
  table, possible = posterior_table(schedule, schedule.check_step(t))
  if not possible[int(xt), int(x0)]:
    raise DiffusionError(f"x_t={xt} is unreachable from x0={x0} at t={t} (zero normalizer)")
  return table[int(xt), :, int(x0)].copy()


def truncate(probs: np.ndarray, rate: float) -> np.ndarray:
  """Keep the most probable categories until their mass reaches `rate`, renormalized."""
  if not 0 < rate <= 1:
    raise DiffusionError(f"truncation rate must be in (0, 1], got {rate}")
  order = np.argsort(-probs, axis=-1, kind="stable")
  ranked = np.take_along_axis(probs, order, axis=-1)
  before = np.cumsum(ranked, axis=-1) - ranked
  keep_ranked = before < rate
  keep = np.zeros_like(keep_ranked)
  np.put_along_axis(keep, order, keep_ranked, axis=-1)
  kept = np.where(keep, probs, 0.0)
  return kept / kept.sum(axis=-1, keepdims=True)


def _check_x0_distribution(probs: np.ndarray, k: int) -> None:
  if probs.shape[-1] != k:
    raise DiffusionError(f"denoiser output must have {k} categories, got {probs.shape[-1]}")
  if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > SUM_TOLERANCE):
    raise DiffusionError("denoiser output is not a normalized distribution")


def p_reverse_step(xt: TokenInput, x0_probs: np.ndarray, schedule: NoiseSchedule, t: int) -> np.ndarray:
  """p(x_{t-1} | x_t) = sum over x0 of q(x_{t-1} | x_t, x0) p(x0 | x_t).

  x0 values that cannot produce the observed x_t carry no weight; the rest of
  the prediction is renormalized before mixing.
  """
  tokens = _as_tokens(xt)
  x0_probs = np.asarray(x0_probs, dtype=np.float64)
  _check_x0_distribution(x0_probs, schedule.codebook_size)
  if x0_probs.shape[:-1] != tokens.shape:
    raise DiffusionError(f"denoiser output {x0_probs.shape} does not match tokens {tokens.shape}")
  table, possible = posterior_table(schedule, schedule.check_step(t))
  weights = x0_probs * possible[tokens]
  totals = weights.sum(axis=-1, keepdims=True)
  if np.any(totals <= 0):
    raise DiffusionError(f"denoiser puts no mass on any x0 consistent with x_t at t={t}")
  weights = weights / totals
  return np.einsum("...sk,...k->...s", table[tokens], weights)


@dataclass
class VlbLoss:
  total: Tensor
  kl: float
  aux: float
  timesteps: np.ndarray


def vlb_terms(x0: np.ndarray, xt: np.ndarray, t: np.ndarray, x0_probs: Tensor,
              schedule: NoiseSchedule) -> Tensor:
  """Per-position KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t)) for batched (B, L) input.

  At t = 1 the posterior is one-hot on x0, so the term equals -log p(x0 | x1).
  """
  x0 = np.asarray(x0, dtype=np.int64)
  xt = np.asarray(xt, dtype=np.int64)
  t = np.asarray(t, dtype=np.int64).reshape(-1)
  batch, length = x0.shape
  k = schedule.codebook_size
  tables = np.empty((batch, length, k + 1, k))
  masks = np.empty((batch, length, k))
  for b in range(batch):
    table, possible = posterior_table(schedule, int(t[b]))
    tables[b] = table[xt[b]]
    masks[b] = possible[xt[b]]
  targets = np.take_along_axis(tables, x0[:, :, None, None], axis=-1)[..., 0]

  weights = mul(x0_probs, masks)
  weights = weights / tensor_sum(weights, axis=-1, keepdims=True)
  reverse = matmul(Tensor(tables), weights.reshape(batch, length, k, 1)).reshape(batch, length, k + 1)
  return categorical_kl(Tensor(targets), reverse)


def vlb_loss(x0: np.ndarray, model: X0Predictor, schedule: NoiseSchedule, y: np.ndarray,
             rng: np.random.Generator, aux_weight: float = 1e-2, training: bool = True) -> VlbLoss:
  """Stochastic bound estimate: one uniform t per sequence plus the x0 cross-entropy."""
  x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
  y = np.asarray(y, dtype=np.int64).reshape(-1)
  t = rng.integers(1, schedule.timesteps + 1, size=x0.shape[0])
  xt = q_forward_sample(x0, t, schedule, rng)
  try:
    logits = model.logits(xt, t, y, training=training, rng=rng)
    terms = vlb_terms(x0, xt, t, softmax(logits, axis=-1), schedule)
    kl = tensor_mean(terms)
    aux = cross_entropy(logits, x0)
    total = kl + aux * aux_weight
  except NumericsError as exc:
    raise DiffusionError(f"non-finite diffusion loss at t={t.tolist()}: {exc}") from exc
  return VlbLoss(total, kl.item(), aux.item(), t)


def prior_marginal(schedule: NoiseSchedule) -> np.ndarray:
  """p(x_T): forward marginal at T for a uniformly drawn x0."""
  return cumulative_matrix(schedule, schedule.timesteps)[:, :schedule.codebook_size].mean(axis=1)


def prior_kl(x0: TokenInput, schedule: NoiseSchedule) -> np.ndarray:
  """Per-position KL(q(x_T | x0) || p(x_T))."""
  tokens = _as_tokens(x0)
  final = cumulative_matrix(schedule, schedule.timesteps)
  prior = prior_marginal(schedule)
  marginals = final[:, tokens.reshape(-1)].T
  return categorical_kl(marginals, np.broadcast_to(prior, marginals.shape)).data.reshape(tokens.shape)


def exact_vlb(x0: TokenInput, model: X0Predictor, schedule: NoiseSchedule, y: int) -> float:
  """Full negative bound of one sequence by enumerating every x_t.

  Returns the prior term plus the expected reverse term at every t, summed over
  positions. Only feasible when (K+1)^L is small.
  """
  tokens = _as_tokens(x0)
  k = schedule.codebook_size
  length = tokens.size
  count = (k + 1) ** length
  if count > EXACT_VLB_LIMIT:
    raise DiffusionError(f"exact bound needs {count} sequences; limit is {EXACT_VLB_LIMIT}")

  sequences = np.array(list(itertools.product(range(k + 1), repeat=length)), dtype=np.int64)
  total = float(prior_kl(tokens, schedule).sum())
  for t in range(1, schedule.timesteps + 1):
    marginal = cumulative_matrix(schedule, t)
    weights = np.prod(marginal[sequences, tokens[None, :]], axis=1)
    reachable = weights > 0
    xt = sequences[reachable]
    probs = model.predict(xt, np.full(len(xt), t), np.full(len(xt), y))
    x0 = np.broadcast_to(tokens, xt.shape)
    terms = vlb_terms(x0, xt, np.full(len(xt), t), Tensor(probs), schedule).data.sum(axis=1)
    total += float(np.dot(weights[reachable], terms))
  return total


def initial_tokens(length: int, codebook_size: int, mode: str, rng: np.random.Generator) -> np.ndarray:
  if mode == "mask":
    return np.full(length, codebook_size, dtype=np.int64)
  if mode == "random":
    return rng.integers(0, codebook_size, size=length)
  raise DiffusionError(f"unknown sampling mode '{mode}' (expected 'mask' or 'random')")


def sample(model: X0Predictor, y: int, length: int, schedule: NoiseSchedule, rng: np.random.Generator,
           mode: str = "mask", truncation_rate: Optional[float] = None) -> TokenSequence:
  """Ancestral sampling from t = T down to 1."""
  return sample_batch(model, [y], length, schedule, [rng], mode, truncation_rate)[0]


def sample_batch(model: X0Predictor, styles: Sequence[int], length: int, schedule: NoiseSchedule,
                 rngs: Sequence[np.random.Generator], mode: str = "mask",
                 truncation_rate: Optional[float] = None) -> list[TokenSequence]:
  """Sample several sequences in one denoiser batch, each with its own rng stream."""
  if len(styles) != len(rngs):
    raise DiffusionError("need one rng per requested sample")
  k = schedule.codebook_size
  y = np.asarray(styles, dtype=np.int64)
  x = np.stack([initial_tokens(length, k, mode, rng) for rng in rngs])
  for t in range(schedule.timesteps, 0, -1):
    probs = model.predict(x, np.full(len(x), t), y)
    if truncation_rate is not None:
      probs = truncate(probs, truncation_rate)
    reverse = p_reverse_step(x, probs, schedule, t)
    x = np.stack([sample_categorical(reverse[i], rng) for i, rng in enumerate(rngs)])
  if np.any(x == k):
    raise DiffusionError("[MASK] tokens remain after the final reverse step")
  return [TokenSequence(row, k, int(style)) for row, style in zip(x, y)]


def sample_seed(seed: int, style: int, index: int) -> np.random.Generator:
  return np.random.default_rng([seed, style, index])


@dataclass
class DiffusionTrainingResult:
  history: list[float] = field(default_factory=list)
  kl_history: list[float] = field(default_factory=list)
  prior_term: float = 0.0


def train_diffusion(model: "DenoiserModel", tokens: np.ndarray, labels: np.ndarray, schedule: NoiseSchedule,
                    config: DiffusionConfig, optimizer: OptimizerSettings, rng: np.random.Generator,
                    steps: Optional[int] = None, progress: bool = False) -> DiffusionTrainingResult:
  """Fit the denoiser by minimizing the stochastic bound with AdamW.

  Raises:
    DiffusionError: Empty token set or non-finite loss
    TrainingDivergedError: Loss stays above divergence_factor x its initial value
  """
  tokens = np.asarray(tokens, dtype=np.int64)
  labels = np.asarray(labels, dtype=np.int64)
  if len(tokens) == 0:
    raise DiffusionError("cannot train on an empty token set")
  steps = config.steps if steps is None else steps
  opt = AdamW(model.parameters(), lr=optimizer.learning_rate, betas=optimizer.betas,
              weight_decay=optimizer.weight_decay, warmup_steps=optimizer.warmup_steps)
  monitor = DivergenceMonitor("diffusion", config.divergence_factor, config.divergence_patience)
  batch_size = min(optimizer.batch_size, len(tokens))
  result = DiffusionTrainingResult(prior_term=float(prior_kl(tokens, schedule).mean()))

  logging.info(f"Training denoiser: {len(tokens)} sequences of length {tokens.shape[1]}, T={schedule.timesteps}, {steps} steps")
  logging.info(f"{LOG_INDENT}prior term per token: {result.prior_term:.6f} nats")
  for step in tqdm(range(1, steps + 1), desc="diffusion", disable=not progress):
    picks = rng.choice(len(tokens), size=batch_size, replace=False)
    opt.zero_grad()
    loss = vlb_loss(tokens[picks], model, schedule, labels[picks], rng, config.aux_weight)
    loss.total.backward()
    opt.step()
    value = loss.total.item()
    result.history.append(value)
    result.kl_history.append(loss.kl)
    logging.debug(f"diffusion step {step}: loss={value:.6f} kl={loss.kl:.6f} aux={loss.aux:.6f}")
    monitor.update(step, value)

  logging.info(f"{LOG_INDENT}✓ Denoiser trained: final loss {result.history[-1]:.5f}")
  return result
