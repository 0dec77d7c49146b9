"""Objective evaluation: musical features, Gaussian overlapping area and style accuracy.

Feature similarity pools one Gaussian per feature per population (training
pieces O, generated pieces G) and reports the area under min(pdf_O, pdf_G).
Style accuracy asks a 1-D CNN trained on the corpus to name the composer of
each generated piece and compares it with the style that was requested.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import integrate
from scipy.stats import norm
from tqdm import tqdm

from codecomposer.config import LOG_INDENT, ClassifierConfig
from codecomposer.errors import CheckpointError, DegenerateIntersectionError, EvaluationError
from codecomposer.midi_io import PITCHES, NoteEvent, Pianoroll, from_pianoroll
from codecomposer.numerics import (
  AdamW, Module, Tensor, batch_norm, conv1d, cross_entropy, glorot, load_checkpoint, no_grad,
  save_checkpoint, softmax,
)
from codecomposer.utils import write_csv, write_pgm


FEATURE_NAMES = ("ND", "PR", "MP", "VP", "MD", "VD")
STD_FLOOR = 1e-6
OA_TOLERANCE = 1e-6
BATCH_NORM_MOMENTUM = 0.1


# Features

@dataclass(frozen=True)
class FeatureVector:
  """Note density, pitch range, mean/std pitch and mean/std duration of one piece."""
  nd: float
  pr: float
  mp: float
  vp: float
  md: float
  vd: float
  empty: bool = False

  def as_array(self) -> np.ndarray:
    return np.array([self.nd, self.pr, self.mp, self.vp, self.md, self.vd])


def extract_features(events: Sequence[NoteEvent], duration: float) -> FeatureVector:
  """Six summary features of a piece lasting `duration` seconds.

  Standard deviations use the population (n) denominator so a single note has
  zero spread. An empty piece yields zeros and empty=True.
  """
  if duration <= 0:
    raise EvaluationError(f"piece duration must be positive, got {duration}")
  if not events:
    return FeatureVector(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, empty=True)
  pitches = np.sort(np.array([e.pitch for e in events], dtype=np.float64))
  durations = np.sort(np.array([e.duration for e in events], dtype=np.float64))
  return FeatureVector(
    nd=len(events) / duration,
    pr=float(pitches[-1] - pitches[0]),
    mp=float(pitches.mean()),
    vp=float(pitches.std()),
    md=float(durations.mean()),
    vd=float(durations.std()),
  )


def roll_features(roll: Pianoroll) -> FeatureVector:
  return extract_features(from_pianoroll(roll), roll.duration)


# Gaussian overlap

@dataclass(frozen=True)
class FeatureStats:
  mean: float
  std: float

  def pdf(self, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    return norm.pdf(x, self.mean, self.std)

  def cdf(self, x: float) -> float:
    return float(norm.cdf(x, self.mean, self.std))


def fit_gaussian(samples: Sequence[float], floor: float = STD_FLOOR) -> FeatureStats:
  """Sample mean and n-1 standard deviation, floored."""
  values = np.asarray(samples, dtype=np.float64)
  if values.size < 2:
    raise EvaluationError(f"fit_gaussian needs at least 2 samples, got {values.size}")
  return FeatureStats(float(values.mean()), max(float(values.std(ddof=1)), floor))


def _ordered(a: FeatureStats, b: FeatureStats) -> tuple[FeatureStats, FeatureStats]:
  return (a, b) if a.mean >= b.mean else (b, a)


def intersection_points(stats_o: FeatureStats, stats_g: FeatureStats) -> tuple[float, ...]:
  """Every x where the two pdfs are equal, ascending.

  Raises:
    DegenerateIntersectionError: The distributions are identical
  """
  hi, lo = _ordered(stats_o, stats_g)
  if hi.mean == lo.mean and hi.std == lo.std:
    raise DegenerateIntersectionError("identical distributions have no unique intersection")
  if hi.std == lo.std:
    return ((hi.mean + lo.mean) / 2.0,)

  # log pdf_hi(x) = log pdf_lo(x) rearranged to a x^2 + b x + c = 0
  vh, vl = hi.std ** 2, lo.std ** 2
  a = 1.0 / vh - 1.0 / vl
  b = -2.0 * (hi.mean / vh - lo.mean / vl)
  c = hi.mean ** 2 / vh - lo.mean ** 2 / vl + 2.0 * math.log(hi.std / lo.std)
  disc = max(b * b - 4.0 * a * c, 0.0)
  q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
  roots = [q / a, c / q] if q != 0 else [-b / (2.0 * a)] * 2
  return tuple(sorted(roots))


def intersection_point(stats_o: FeatureStats, stats_g: FeatureStats) -> float:
  """The crossing point lying between the two means.

  Raises:
    DegenerateIntersectionError: Identical distributions, or equal means with
      different spreads (the crossings are symmetric about the shared mean)
  """
  hi, lo = _ordered(stats_o, stats_g)
  points = intersection_points(hi, lo)
  if hi.mean == lo.mean:
    raise DegenerateIntersectionError(
      f"equal means with different spreads cross at {points}, not between the means"
    )
  between = [p for p in points if lo.mean <= p <= hi.mean]
  if not between:
    # rounding can push the root a hair outside; take the closest
    return min(points, key=lambda p: min(abs(p - lo.mean), abs(p - hi.mean)))
  return between[0]


def _closed_form_area(stats_o: FeatureStats, stats_g: FeatureStats, points: tuple[float, ...]) -> float:
  hi, lo = _ordered(stats_o, stats_g)
  if len(points) == 1:
    # Below the crossing the higher-mean pdf is smaller, above it the lower-mean one
    c = points[0]
    return hi.cdf(c) + 1.0 - lo.cdf(c)
  # The narrower pdf is smaller in both tails, the wider one between the crossings
  narrow, wide = (hi, lo) if hi.std < lo.std else (lo, hi)
  r1, r2 = points
  return narrow.cdf(r1) + (wide.cdf(r2) - wide.cdf(r1)) + (1.0 - narrow.cdf(r2))


def integrated_area(stats_o: FeatureStats, stats_g: FeatureStats,
                    breakpoints: Iterable[float] = ()) -> float:
  """Numerical integral of min(pdf_o, pdf_g) over the real line."""
  def density(stats: FeatureStats, x: float) -> float:
    z = (x - stats.mean) / stats.std
    return math.exp(-0.5 * z * z) / (stats.std * math.sqrt(2.0 * math.pi))

  def overlap(x: float) -> float:
    return min(density(stats_o, x), density(stats_g, x))

  edges = [-np.inf] + sorted(set(breakpoints) | {stats_o.mean, stats_g.mean}) + [np.inf]
  total = 0.0
  for left, right in zip(edges, edges[1:]):
    if left == right:
      continue
    value, _ = integrate.quad(overlap, left, right, epsabs=1e-12, epsrel=1e-10, limit=200)
    total += value
  return total


def overlapping_area(stats_o: FeatureStats, stats_g: FeatureStats) -> float:
  """Area under min(pdf_o, pdf_g), in [0, 1] and symmetric in its arguments.

  The Gaussian-CDF closed form is checked against numerical integration; on
  disagreement beyond 1e-6 the integral wins. Equal means with different
  spreads go straight to integration.
  """
  if stats_o.mean == stats_g.mean and stats_o.std == stats_g.std:
    return 1.0
  points = intersection_points(stats_o, stats_g)
  oracle = integrated_area(stats_o, stats_g, points)
  if stats_o.mean == stats_g.mean:
    return float(np.clip(oracle, 0.0, 1.0))
  closed = _closed_form_area(stats_o, stats_g, points)
  if abs(closed - oracle) > OA_TOLERANCE:
    logging.warning(f"OA closed form {closed:.8f} disagrees with integral {oracle:.8f}; using the integral")
    return float(np.clip(oracle, 0.0, 1.0))
  return float(np.clip(closed, 0.0, 1.0))


def feature_matrix(features: Sequence[FeatureVector]) -> np.ndarray:
  """(N, 6) array of non-empty pieces."""
  rows = [f.as_array() for f in features if not f.empty]
  return np.array(rows).reshape(len(rows), len(FEATURE_NAMES))


def oa_report(train: Sequence[FeatureVector], generated: Sequence[FeatureVector]) -> dict[str, float]:
  """OA per feature between pooled training and generated pieces, plus the average.

  Empty pieces do not contribute to the fitted Gaussians.
  """
  o, g = feature_matrix(train), feature_matrix(generated)
  if len(o) < 2 or len(g) < 2:
    raise EvaluationError(f"need at least 2 non-empty pieces per population, got {len(o)} and {len(g)}")
  report = {
    name: overlapping_area(fit_gaussian(o[:, i]), fit_gaussian(g[:, i]))
    for i, name in enumerate(FEATURE_NAMES)
  }
  report["average"] = float(np.mean([report[name] for name in FEATURE_NAMES]))
  return report


# Style classifier

def pool_rolls(rolls: np.ndarray, factor: int) -> np.ndarray:
  """Max-pool (N, 128, F) pianorolls over time; a remainder shorter than `factor` is dropped."""
  rolls = np.asarray(rolls, dtype=np.float64)
  if rolls.ndim == 2:
    rolls = rolls[None]
  frames = rolls.shape[2] // factor * factor
  if frames == 0:
    raise EvaluationError(f"pianoroll of {rolls.shape[2]} frames is shorter than the pooling factor {factor}")
  n, pitches, _ = rolls.shape
  return rolls[:, :, :frames].reshape(n, pitches, frames // factor, factor).max(axis=3)


class StyleClassifier(Module):
  """Five conv layers, each followed by ReLU and batch normalization, then a dense layer
  over the time-averaged features."""

  LAYERS = 5

  def __init__(self, config: ClassifierConfig, num_classes: int, rng: np.random.Generator):
    super().__init__()
    self.config = config
    self.num_classes = num_classes
    c, k = config.channels, config.kernel_size
    channels = PITCHES
    self.buffers: dict[str, np.ndarray] = {}
    for i in range(self.LAYERS):
      self.add_param(f"conv{i}.weight", glorot(rng, (c, channels, k), channels * k, c * k))
      self.add_param(f"conv{i}.bias", np.zeros(c))
      self.add_param(f"bn{i}.gain", np.ones(c))
      self.add_param(f"bn{i}.bias", np.zeros(c))
      self.buffers[f"bn{i}.running_mean"] = np.zeros(c)
      self.buffers[f"bn{i}.running_var"] = np.ones(c)
      channels = c
    # Zero dense weights: an untrained classifier is exactly uniform
    self.add_param("dense.weight", np.zeros((c, num_classes)))
    self.add_param("dense.bias", np.zeros(num_classes))

  def logits(self, x: Tensor, training: bool = False) -> Tensor:
    """(B, 128, F') pooled pianorolls -> (B, classes)."""
    p = self.params
    h = x
    for i in range(self.LAYERS):
      h = conv1d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=self.config.kernel_size // 2).relu()
      gain, bias = p[f"bn{i}.gain"], p[f"bn{i}.bias"]
      if training:
        h, mu, var = batch_norm(h, gain, bias)
        n = h.shape[0] * h.shape[2]
        unbiased = var * n / max(n - 1, 1)
        for name, value in ((f"bn{i}.running_mean", mu), (f"bn{i}.running_var", unbiased)):
          self.buffers[name] = (1 - BATCH_NORM_MOMENTUM) * self.buffers[name] + BATCH_NORM_MOMENTUM * value
      else:
        mean = self.buffers[f"bn{i}.running_mean"].reshape(1, -1, 1)
        inv_std = (1.0 / np.sqrt(self.buffers[f"bn{i}.running_var"] + 1e-5)).reshape(1, -1, 1)
        h = (h - mean) * inv_std * gain.reshape(1, -1, 1) + bias.reshape(1, -1, 1)
    pooled = h.mean(axis=2)
    return pooled @ p["dense.weight"] + p["dense.bias"]

  def classify(self, rolls: np.ndarray, pooled: bool = False) -> np.ndarray:
    """Label probabilities for (N, 128, F) pianorolls, (N, classes)."""
    x = np.asarray(rolls, dtype=np.float64) if pooled else pool_rolls(rolls, self.config.pool)
    with no_grad():
      return softmax(self.logits(Tensor(x)), axis=-1).data

  def state_dict(self) -> dict[str, np.ndarray]:
    state = super().state_dict()
    state.update({name: value.copy() for name, value in self.buffers.items()})
    return state

  def load_state_dict(self, state) -> None:
    buffers = {name: np.asarray(value, dtype=np.float64) for name, value in state.items() if name in self.buffers}
    if set(buffers) != set(self.buffers):
      raise CheckpointError(f"classifier checkpoint lacks running statistics: {sorted(set(self.buffers) - set(buffers))}")
    super().load_state_dict({name: value for name, value in state.items() if name not in self.buffers})
    self.buffers = {name: value.copy() for name, value in buffers.items()}

  def save(self, path: Union[str, Path]) -> bytes:
    path = Path(path)
    sidecar = {"num_classes": self.num_classes, "config": self.config.model_dump()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return save_checkpoint(path, self.state_dict())

  @classmethod
  def load(cls, path: Union[str, Path]) -> "StyleClassifier":
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
      raise CheckpointError(f"architecture file missing next to checkpoint: {sidecar}")
    meta = json.loads(sidecar.read_text())
    try:
      model = cls(ClassifierConfig.model_validate(meta["config"]), int(meta["num_classes"]), np.random.default_rng(0))
    except (KeyError, ValueError) as exc:
      raise CheckpointError(f"invalid classifier architecture file {sidecar}: {exc}") from exc
    model.load_state_dict(load_checkpoint(path))
    return model


def classify(roll: Union[Pianoroll, np.ndarray], classifier: StyleClassifier) -> np.ndarray:
  """Label probabilities for one pianoroll."""
  grid = roll.grid if isinstance(roll, Pianoroll) else np.asarray(roll)
  return classifier.classify(grid[None])[0]


def holdout_split(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
  """Stratified (train, holdout) index split; every class keeps a training example."""
  train, holdout = [], []
  for label in np.unique(labels):
    members = rng.permutation(np.flatnonzero(labels == label))
    take = min(int(round(len(members) * fraction)), len(members) - 1)
    holdout.extend(members[:take])
    train.extend(members[take:])
  return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(holdout, dtype=np.int64))


@dataclass
class ClassifierTrainingResult:
  model: StyleClassifier
  history: list[float] = field(default_factory=list)
  holdout_accuracy: float = float("nan")


def train_classifier(rolls: np.ndarray, labels: np.ndarray, num_classes: int, config: ClassifierConfig,
                     rng: np.random.Generator, steps: Optional[int] = None,
                     progress: bool = False) -> ClassifierTrainingResult:
  """Train the style classifier and report held-out accuracy.

  Raises:
    EvaluationError: Fewer than two classes present
  """
  labels = np.asarray(labels, dtype=np.int64)
  present = np.unique(labels)
  if num_classes < 2 or len(present) < 2:
    raise EvaluationError(f"style classifier needs at least 2 classes, got {len(present)}")
  steps = config.steps if steps is None else steps
  x = pool_rolls(rolls, config.pool)
  train_idx, holdout_idx = holdout_split(labels, config.holdout_fraction, rng)

  model = StyleClassifier(config, num_classes, rng)
  opt = AdamW(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.96), weight_decay=0.0)
  batch_size = min(config.batch_size, len(train_idx))
  result = ClassifierTrainingResult(model)

  logging.info(f"Training style classifier: {len(train_idx)} train / {len(holdout_idx)} held-out segments, {num_classes} classes")
  for step in tqdm(range(1, steps + 1), desc="classifier", disable=not progress):
    picks = rng.choice(train_idx, size=batch_size, replace=False)
    opt.zero_grad()
    loss = cross_entropy(model.logits(Tensor(x[picks]), training=True), labels[picks])
    loss.backward()
    opt.step()
    result.history.append(loss.item())
    logging.debug(f"classifier step {step}: loss={loss.item():.6f}")

  if len(holdout_idx):
    predicted = model.classify(x[holdout_idx], pooled=True).argmax(axis=1)
    result.holdout_accuracy = float(np.mean(predicted == labels[holdout_idx]))
  logging.info(f"{LOG_INDENT}✓ Classifier held-out accuracy: {result.holdout_accuracy:.3f}")
  return result


# Style accuracy

@dataclass
class StyleAccuracy:
  overall: float
  per_class: dict[int, float]
  confusion: np.ndarray  # rows = requested style, columns = predicted, row-normalized
  counts: np.ndarray  # raw counts, same layout


def accuracy_from_predictions(requested: Sequence[int], predicted: Sequence[int], num_classes: int) -> StyleAccuracy:
  requested_arr = np.asarray(requested, dtype=np.int64)
  predicted_arr = np.asarray(predicted, dtype=np.int64)
  if requested_arr.size == 0:
    raise EvaluationError("no generated pieces to score")
  counts = np.zeros((num_classes, num_classes), dtype=np.int64)
  np.add.at(counts, (requested_arr, predicted_arr), 1)
  totals = counts.sum(axis=1, keepdims=True)
  confusion = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
  per_class = {int(c): float(confusion[c, c]) for c in range(num_classes) if totals[c, 0] > 0}
  return StyleAccuracy(float(np.mean(requested_arr == predicted_arr)), per_class, confusion, counts)


def style_accuracy(generated: Sequence[tuple[Union[Pianoroll, np.ndarray], int]],
                   classifier: StyleClassifier) -> StyleAccuracy:
  """Fraction of generated pieces whose predicted composer matches the requested style."""
  if not generated:
    raise EvaluationError("no generated pieces to score")
  grids = np.stack([roll.grid if isinstance(roll, Pianoroll) else np.asarray(roll) for roll, _ in generated])
  predicted = classifier.classify(grids).argmax(axis=1)
  return accuracy_from_predictions([label for _, label in generated], predicted, classifier.num_classes)


def write_report(output_dir: Union[str, Path], oa: dict[str, float], accuracy: StyleAccuracy,
                 label_names: Sequence[str]) -> list[Path]:
  """report.csv, confusion.csv and confusion.pgm under output_dir."""
  out = Path(output_dir)
  rows: list[tuple[str, str, float]] = [("oa", name, oa[name]) for name in (*FEATURE_NAMES, "average")]
  rows.append(("accuracy", "overall", accuracy.overall))
  rows.extend(("accuracy", label_names[c], value) for c, value in sorted(accuracy.per_class.items()))
  report = write_csv(out / "report.csv", ["section", "name", "value"], rows)

  confusion_rows = [[label_names[i], *row] for i, row in enumerate(accuracy.confusion.tolist())]
  confusion = write_csv(out / "confusion.csv", ["requested", *label_names], confusion_rows)
  heatmap = out / "confusion.pgm"
  write_pgm(heatmap, accuracy.confusion, flip=False)
  return [report, confusion, heatmap]
