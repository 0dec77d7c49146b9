"""Transformer predicting p(x0 | x_t, y) with AdaLN timestep and style conditioning."""

import json
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from codecomposer.config import DenoiserConfig
from codecomposer.errors import CheckpointError, DenoiserError
from codecomposer.numerics import (
  Module, Tensor, dropout, embedding, gelu, glorot, layer_norm, load_checkpoint, no_grad,
  save_checkpoint, softmax,
)
from codecomposer.vqvae import TokenSequence


class DenoiserArchitecture(BaseModel):
  """Everything needed to rebuild a denoiser; stored next to its weights."""
  model_config = ConfigDict(extra="forbid", frozen=True)

  codebook_size: int = Field(..., ge=2)
  length: int = Field(..., ge=1)
  styles: int = Field(..., ge=1)
  timesteps: int = Field(..., ge=1)
  config: DenoiserConfig = DenoiserConfig()


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
  """Sinusoidal embedding of integer steps, (N,) -> (N, dim)."""
  half = dim // 2
  freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
  args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
  return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def adaln(h: Tensor, t_embed: Tensor, y_embed: Tensor, scale_weight: Tensor, scale_bias: Tensor,
          shift_weight: Tensor, shift_bias: Tensor, epsilon: float = 1e-5) -> Tensor:
  """scale(c) * layer_norm(h) + shift(c) with c = t_embed + y_embed.

  h is (B, L, d); the embeddings are (B, d). Scale and shift are affine in c.
  """
  condition = t_embed + y_embed
  batch, dim = condition.shape
  scale = (condition @ scale_weight + scale_bias).reshape(batch, 1, dim)
  shift = (condition @ shift_weight + shift_bias).reshape(batch, 1, dim)
  normalized = layer_norm(h, np.ones(dim), np.zeros(dim), epsilon)
  return normalized * scale + shift


class DenoiserModel(Module):
  def __init__(self, architecture: DenoiserArchitecture, rng: np.random.Generator):
    super().__init__()
    self.architecture = architecture
    cfg = architecture.config
    dm, k = cfg.d_model, architecture.codebook_size
    hidden = dm * cfg.ffn_mult
    self.codebook_size = k

    self.add_param("token_embedding", rng.normal(0.0, 0.02, size=(k + 1, dm)))
    self.add_param("position_embedding", rng.normal(0.0, 0.02, size=(architecture.length, dm)))
    self.add_param("style_embedding", rng.normal(0.0, 0.02, size=(architecture.styles, dm)))
    self.add_param("time.w1", glorot(rng, (dm, dm), dm, dm))
    self.add_param("time.b1", np.zeros(dm))
    self.add_param("time.w2", glorot(rng, (dm, dm), dm, dm))
    self.add_param("time.b2", np.zeros(dm))

    for i in range(cfg.blocks):
      p = f"blocks.{i}"
      self._add_adaln(f"{p}.adaln1", dm, rng)
      for name in ("q", "k", "v", "o"):
        self.add_param(f"{p}.attn.w{name}", glorot(rng, (dm, dm), dm, dm))
        self.add_param(f"{p}.attn.b{name}", np.zeros(dm))
      self._add_adaln(f"{p}.adaln2", dm, rng)
      self.add_param(f"{p}.ffn.w1", glorot(rng, (dm, hidden), dm, hidden))
      self.add_param(f"{p}.ffn.b1", np.zeros(hidden))
      self.add_param(f"{p}.ffn.w2", glorot(rng, (hidden, dm), hidden, dm))
      self.add_param(f"{p}.ffn.b2", np.zeros(dm))

    self._add_adaln("final", dm, rng)
    self.add_param("head.weight", glorot(rng, (dm, k), dm, k))
    self.add_param("head.bias", np.zeros(k))

  def _add_adaln(self, prefix: str, dm: int, rng: np.random.Generator) -> None:
    # scale starts near 1 and shift near 0, so each AdaLN begins close to a plain layer_norm
    self.add_param(f"{prefix}.scale_weight", glorot(rng, (dm, dm), dm, dm) * 0.1)
    self.add_param(f"{prefix}.scale_bias", np.ones(dm))
    self.add_param(f"{prefix}.shift_weight", glorot(rng, (dm, dm), dm, dm) * 0.1)
    self.add_param(f"{prefix}.shift_bias", np.zeros(dm))

  def _adaln(self, prefix: str, h: Tensor, t_embed: Tensor, y_embed: Tensor) -> Tensor:
    p = self.params
    return adaln(h, t_embed, y_embed, p[f"{prefix}.scale_weight"], p[f"{prefix}.scale_bias"],
                 p[f"{prefix}.shift_weight"], p[f"{prefix}.shift_bias"])

  def _attention(self, prefix: str, h: Tensor, training: bool, rng: Optional[np.random.Generator],
                 collect_attention: Optional[list]) -> Tensor:
    p = self.params
    batch, length, dm = h.shape
    heads = self.architecture.config.heads
    dh = dm // heads

    def split(x: Tensor) -> Tensor:
      return x.reshape(batch, length, heads, dh).transpose(0, 2, 1, 3)

    q = split(h @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
    k = split(h @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"])
    v = split(h @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    if collect_attention is not None:
      collect_attention.append(weights.data.copy())
    weights = dropout(weights, self.architecture.config.dropout, rng, training)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, dm)
    return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]

  def _check_inputs(self, xt: np.ndarray, t: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arch = self.architecture
    xt = np.atleast_2d(np.asarray(xt, dtype=np.int64))
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if xt.shape[1] != arch.length:
      raise DenoiserError(f"sequence length {xt.shape[1]} != model length {arch.length}")
    if xt.size and (xt.min() < 0 or xt.max() > arch.codebook_size):
      raise DenoiserError(f"tokens must lie in [0, {arch.codebook_size}] ([MASK] = {arch.codebook_size})")
    if t.shape != (len(xt),) or y.shape != (len(xt),):
      raise DenoiserError("need one timestep and one style per sequence")
    if np.any(t < 1) or np.any(t > arch.timesteps):
      raise DenoiserError(f"timestep outside [1, {arch.timesteps}]")
    if np.any(y < 0) or np.any(y >= arch.styles):
      raise DenoiserError(f"style label outside [0, {arch.styles})")
    return xt, t, y

  def logits(self, xt: np.ndarray, t: np.ndarray, y: np.ndarray, training: bool = False,
             rng: Optional[np.random.Generator] = None,
             collect_attention: Optional[list] = None) -> Tensor:
    """(B, L) tokens, (B,) steps, (B,) styles -> (B, L, K) logits."""
    xt, t, y = self._check_inputs(xt, t, y)
    p = self.params
    dm = self.architecture.config.d_model

    h = embedding(p["token_embedding"], xt) + p["position_embedding"]
    t_embed = gelu(Tensor(timestep_embedding(t, dm)) @ p["time.w1"] + p["time.b1"]) @ p["time.w2"] + p["time.b2"]
    y_embed = embedding(p["style_embedding"], y)

    for i in range(self.architecture.config.blocks):
      prefix = f"blocks.{i}"
      a = self._adaln(f"{prefix}.adaln1", h, t_embed, y_embed)
      h = h + self._attention(f"{prefix}.attn", a, training, rng, collect_attention)
      f = self._adaln(f"{prefix}.adaln2", h, t_embed, y_embed)
      f = gelu(f @ p[f"{prefix}.ffn.w1"] + p[f"{prefix}.ffn.b1"]) @ p[f"{prefix}.ffn.w2"] + p[f"{prefix}.ffn.b2"]
      h = h + dropout(f, self.architecture.config.dropout, rng, training)

    h = self._adaln("final", h, t_embed, y_embed)
    return h @ p["head.weight"] + p["head.bias"]

  def predict(self, xt: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Inference-mode probabilities, (B, L, K)."""
    with no_grad():
      return softmax(self.logits(xt, t, y), axis=-1).data

  def save(self, path: Union[str, Path]) -> bytes:
    path = Path(path)
    path.with_suffix(".json").write_text(self.architecture.model_dump_json(indent=2))
    return save_checkpoint(path, self.state_dict())

  @classmethod
  def load(cls, path: Union[str, Path]) -> "DenoiserModel":
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
      raise CheckpointError(f"architecture file missing next to checkpoint: {sidecar}")
    architecture = DenoiserArchitecture.model_validate(json.loads(sidecar.read_text()))
    model = cls(architecture, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(path))
    return model


def denoiser_forward(xt: Union[TokenSequence, np.ndarray], t: int, y: int, model: DenoiserModel) -> np.ndarray:
  """Per-position distributions over the K ordinary tokens for one sequence, (L, K)."""
  tokens = xt.tokens if isinstance(xt, TokenSequence) else np.asarray(xt, dtype=np.int64)
  if tokens.ndim != 1:
    raise DenoiserError(f"expected a single sequence, got shape {tokens.shape}")
  return model.predict(tokens[None], np.array([t]), np.array([y]))[0]
