"""Convolutional VQ-VAE mapping pianorolls to codebook index sequences.

The encoder treats the 128 pitches as channels and convolves over time. Each
stride-2 stage halves the length, so a downsample factor D uses log2(D) stages
and F frames become L = F / D latent vectors. The decoder mirrors it with
transposed convolutions.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from codecomposer.config import LOG_INDENT, OptimizerSettings, VqVaeConfig
from codecomposer.errors import CheckpointError, ShapeError
from codecomposer.midi_io import PITCHES, Corpus, Pianoroll
from codecomposer.numerics import (
  AdamW, Module, Tensor, conv1d, conv_transpose1d, embedding, glorot, load_checkpoint,
  no_grad, save_checkpoint, sigmoid, stop_gradient, straight_through, tensor_abs, tensor_mean,
)
from codecomposer.utils import DivergenceMonitor


@dataclass
class TokenSequence:
  """Codebook indices; index K is the [MASK] token."""
  tokens: np.ndarray
  codebook_size: int
  style: Optional[int] = None

  def __post_init__(self):
    self.tokens = np.asarray(self.tokens, dtype=np.int64)
    if self.tokens.ndim != 1:
      raise ShapeError(f"token sequence must be 1-D, got shape {self.tokens.shape}")
    if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() > self.codebook_size):
      raise ValueError(f"tokens must lie in [0, {self.codebook_size}]")

  @property
  def mask_token(self) -> int:
    return self.codebook_size

  def has_mask(self) -> bool:
    return bool(np.any(self.tokens == self.codebook_size))

  def __len__(self) -> int:
    return int(self.tokens.size)


@dataclass
class VqVaeLoss:
  total: Tensor
  reconstruction: float
  codebook: float
  commitment: float


@dataclass
class VqVaeTrainingResult:
  model: "VqVaeModel"
  history: list[float] = field(default_factory=list)
  codes_used: int = 0
  reseeds: int = 0


class VqVaeModel(Module):
  """Encoder E, codebook Z and decoder G trained end to end."""

  def __init__(self, config: VqVaeConfig, rng: np.random.Generator):
    super().__init__()
    self.config = config
    k, d, h = config.codebook_size, config.code_dim, config.hidden_channels
    kernel = config.kernel_size
    self.stages = int(math.log2(config.downsample))

    channels = PITCHES
    for i in range(self.stages):
      self.add_param(f"encoder.down{i}.weight", glorot(rng, (h, channels, kernel), channels * kernel, h * kernel))
      self.add_param(f"encoder.down{i}.bias", np.zeros(h))
      channels = h
    self.add_param("encoder.out.weight", glorot(rng, (d, channels, 3), channels * 3, d * 3))
    self.add_param("encoder.out.bias", np.zeros(d))

    self.add_param("codebook", rng.uniform(-1.0 / k, 1.0 / k, size=(k, d)))

    self.add_param("decoder.in.weight", glorot(rng, (h, d, 3), d * 3, h * 3))
    self.add_param("decoder.in.bias", np.zeros(h))
    for i in range(self.stages):
      out_channels = PITCHES if i == self.stages - 1 else h
      self.add_param(f"decoder.up{i}.weight", glorot(rng, (h, out_channels, kernel), h * kernel, out_channels * kernel))
      self.add_param(f"decoder.up{i}.bias", np.zeros(out_channels))
    if self.stages == 0:
      self.add_param("decoder.out.weight", glorot(rng, (PITCHES, h, 3), h * 3, PITCHES * 3))
      self.add_param("decoder.out.bias", np.zeros(PITCHES))

  @property
  def codebook(self) -> Tensor:
    return self.params["codebook"]

  @property
  def codebook_size(self) -> int:
    return self.config.codebook_size

  def _stage_padding(self) -> int:
    # kernel k with stride 2 halves the length when padding = (k - 2) / 2
    return (self.config.kernel_size - 2) // 2

  def encoder(self, x: Tensor) -> Tensor:
    """(B, 128, F) -> (B, d, F / D)."""
    if x.ndim != 3 or x.shape[1] != PITCHES:
      raise ShapeError(f"encoder expects (B, {PITCHES}, F), got {x.shape}")
    frames = x.shape[2]
    if frames % self.config.downsample:
      padding = -frames % self.config.downsample
      raise ShapeError(
        f"{frames} frames not divisible by downsample factor {self.config.downsample}; "
        f"pad with {padding} frame(s)"
      )
    h = x
    for i in range(self.stages):
      h = conv1d(h, self.params[f"encoder.down{i}.weight"], self.params[f"encoder.down{i}.bias"],
                 stride=2, padding=self._stage_padding()).relu()
    return conv1d(h, self.params["encoder.out.weight"], self.params["encoder.out.bias"], padding=1)

  def decoder(self, z_q: Tensor) -> Tensor:
    """(B, d, L) -> reconstruction logits (B, 128, L * D)."""
    h = conv1d(z_q, self.params["decoder.in.weight"], self.params["decoder.in.bias"], padding=1).relu()
    if self.stages == 0:
      return conv1d(h, self.params["decoder.out.weight"], self.params["decoder.out.bias"], padding=1)
    for i in range(self.stages):
      h = conv_transpose1d(h, self.params[f"decoder.up{i}.weight"], self.params[f"decoder.up{i}.bias"],
                           stride=2, padding=self._stage_padding())
      if i < self.stages - 1:
        h = h.relu()
    return h

  def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
    """Run encode, quantize and decode with the straight-through path.

    Returns (logits, z, z_q, indices) with z and z_q as (B, L, d).
    """
    z = self.encoder(x).transpose(0, 2, 1)
    batch, length, dim = z.shape
    indices = quantize_batch(z.data.reshape(-1, dim), self.codebook.data).reshape(batch, length)
    z_q = embedding(self.codebook, indices)
    decoder_in = straight_through(z_q, z).transpose(0, 2, 1)
    return self.decoder(decoder_in), z, z_q, indices

  def save(self, path: Union[str, Path]) -> bytes:
    path = Path(path)
    path.with_suffix(".json").write_text(self.config.model_dump_json(indent=2))
    return save_checkpoint(path, self.state_dict())

  @classmethod
  def load(cls, path: Union[str, Path]) -> "VqVaeModel":
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
      raise CheckpointError(f"architecture file missing next to checkpoint: {sidecar}")
    config = VqVaeConfig.model_validate(json.loads(sidecar.read_text()))
    model = cls(config, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(path))
    return model


def quantize(z: np.ndarray, codebook: np.ndarray) -> tuple[int, np.ndarray]:
  """Nearest codebook entry by squared Euclidean distance, lowest index on ties."""
  z = np.asarray(z, dtype=np.float64)
  if z.shape != (codebook.shape[1],):
    raise ShapeError(f"latent of shape {z.shape} does not match code dimension {codebook.shape[1]}")
  index = int(quantize_batch(z[None, :], codebook)[0])
  return index, codebook[index].copy()


def quantize_batch(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
  distances = ((z[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
  return np.argmin(distances, axis=1)


def encode(roll: Union[Pianoroll, np.ndarray], model: VqVaeModel) -> np.ndarray:
  """Latent vectors E(x) as an (L, d) array."""
  grid = roll.grid if isinstance(roll, Pianoroll) else np.asarray(roll)
  with no_grad():
    z = model.encoder(Tensor(grid[None].astype(np.float64)))
  return z.data[0].T.copy()


def encode_tokens(rolls: np.ndarray, model: VqVaeModel, batch_size: int = 32) -> np.ndarray:
  """Quantized indices for a stack of (N, 128, F) pianorolls, shape (N, L)."""
  rolls = np.asarray(rolls)
  out = []
  with no_grad():
    for start in range(0, len(rolls), batch_size):
      z = model.encoder(Tensor(rolls[start:start + batch_size].astype(np.float64))).data
      batch, dim, length = z.shape
      flat = z.transpose(0, 2, 1).reshape(-1, dim)
      out.append(quantize_batch(flat, model.codebook.data).reshape(batch, length))
  return np.concatenate(out) if out else np.zeros((0, 0), dtype=np.int64)


def decode_logits(tokens: np.ndarray, model: VqVaeModel) -> Tensor:
  tokens = np.asarray(tokens, dtype=np.int64)
  if tokens.ndim == 1:
    tokens = tokens[None]
  if np.any(tokens >= model.codebook_size) or np.any(tokens < 0):
    raise ValueError(f"decoder accepts codebook indices in [0, {model.codebook_size}); [MASK] is not decodable")
  with no_grad():
    z_q = embedding(model.codebook, tokens).transpose(0, 2, 1)
    return model.decoder(z_q)


def decode(sequence: Union[TokenSequence, np.ndarray], model: VqVaeModel,
           frame_rate: float = 32.0) -> tuple[np.ndarray, Pianoroll]:
  """Decode indices to (logits, binarized pianoroll) with a 0.5 sigmoid threshold."""
  tokens = sequence.tokens if isinstance(sequence, TokenSequence) else np.asarray(sequence)
  logits = decode_logits(tokens, model).data[0]
  # sigmoid(l) >= 0.5 exactly when l >= 0
  grid = (logits >= 0).astype(np.uint8)
  return logits, Pianoroll(grid, frame_rate)


def vqvae_loss(x: Tensor, logits: Tensor, z: Tensor, z_q: Tensor, beta: float) -> VqVaeLoss:
  """L1 reconstruction on sigmoid outputs plus codebook and commitment terms.

  sg[z] - z_q only moves the codebook; sg[z_q] - z only moves the encoder.
  Each norm is averaged over its elements.
  """
  recon = tensor_mean(tensor_abs(x - sigmoid(logits)))
  codebook_term = tensor_mean((stop_gradient(z) - z_q) ** 2)
  commitment_term = tensor_mean((stop_gradient(z_q) - z) ** 2)
  total = recon + codebook_term + commitment_term * beta
  return VqVaeLoss(total, recon.item(), codebook_term.item(), commitment_term.item())


def reconstruction_accuracy(rolls: np.ndarray, model: VqVaeModel, batch_size: int = 32) -> float:
  """Fraction of pianoroll cells reproduced by decode(quantize(encode(x)))."""
  rolls = np.asarray(rolls)
  if len(rolls) == 0:
    return float("nan")
  tokens = encode_tokens(rolls, model, batch_size)
  correct = 0
  for start in range(0, len(rolls), batch_size):
    logits = decode_logits(tokens[start:start + batch_size], model).data
    correct += int(((logits >= 0).astype(np.uint8) == rolls[start:start + batch_size]).sum())
  return correct / rolls.size


def codebook_usage(tokens: np.ndarray) -> int:
  return int(np.unique(np.asarray(tokens)).size)


def train_vqvae(corpus: Union[Corpus, np.ndarray], config: VqVaeConfig, optimizer: OptimizerSettings,
                rng: np.random.Generator, steps: Optional[int] = None,
                progress: bool = False) -> VqVaeTrainingResult:
  """Train on corpus segments with AdamW.

  Codebook entries unused for `dead_code_steps` steps are re-seeded to a random
  encoder output from the current batch.

  Raises:
    ValueError: Empty corpus
    TrainingDivergedError: Loss above divergence_factor x initial for
      divergence_patience consecutive steps
  """
  rolls = corpus.segments if isinstance(corpus, Corpus) else np.asarray(corpus)
  if len(rolls) == 0:
    raise ValueError("cannot train on an empty corpus")
  steps = config.steps if steps is None else steps
  model = VqVaeModel(config, rng)
  opt = AdamW(model.parameters(), lr=optimizer.learning_rate, betas=optimizer.betas,
              weight_decay=optimizer.weight_decay, warmup_steps=optimizer.warmup_steps)
  batch_size = min(optimizer.batch_size, len(rolls))
  last_used = np.zeros(config.codebook_size, dtype=np.int64)
  result = VqVaeTrainingResult(model)
  monitor = DivergenceMonitor("VQ-VAE", config.divergence_factor, config.divergence_patience)

  logging.info(f"Training VQ-VAE: {len(rolls)} segments, K={config.codebook_size}, d={config.code_dim}, D={config.downsample}, {steps} steps")
  for step in tqdm(range(1, steps + 1), desc="vqvae", disable=not progress):
    batch = rolls[rng.choice(len(rolls), size=batch_size, replace=False)]
    x = Tensor(batch.astype(np.float64))
    opt.zero_grad()
    logits, z, z_q, indices = model.forward(x)
    loss = vqvae_loss(x, logits, z, z_q, config.commitment)
    loss.total.backward()
    opt.step()

    value = loss.total.item()
    result.history.append(value)
    logging.debug(f"vqvae step {step}: loss={value:.6f} recon={loss.reconstruction:.6f}")

    monitor.update(step, value)

    last_used[np.unique(indices)] = step
    dead = np.flatnonzero(step - last_used >= config.dead_code_steps)
    if dead.size:
      candidates = z.data.reshape(-1, config.code_dim)
      picks = rng.choice(len(candidates), size=dead.size, replace=dead.size > len(candidates))
      model.codebook.data[dead] = candidates[picks]
      last_used[dead] = step
      result.reseeds += int(dead.size)
      logging.debug(f"Re-seeded {dead.size} dead codebook entries at step {step}")

  result.codes_used = codebook_usage(encode_tokens(rolls, model))
  logging.info(f"{LOG_INDENT}✓ VQ-VAE trained: final loss {result.history[-1]:.5f}, {result.codes_used} codes in use, {result.reseeds} re-seeds")
  return result


def smoothed(history: Sequence[float], window: int = 50) -> np.ndarray:
  """Trailing moving average used to judge the loss trend."""
  values = np.asarray(history, dtype=np.float64)
  if len(values) < window:
    return values.copy()
  kernel = np.ones(window) / window
  return np.convolve(values, kernel, mode="valid")
