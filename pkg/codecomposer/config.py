"""Run configuration: typed sections, optimizer profiles and the resolved echo."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from codecomposer.errors import ERROR_MAP, CodecomposerError


# Log alignment constant matching the CLI log format
# Format: "2025-10-11 14:16:31 INFO:     message"
#         └──────────────────┴─────────┴┘
#         19 chars + 1 space + 9 chars + 1 space = 30 chars
LOG_INDENT = " " * 30

RESOLVED_CONFIG_NAME = "resolved_config.yaml"
CONFIG_ENV_VAR = "CODECOMPOSER_CONFIG"
LOG_LEVEL_ENV_VAR = "CODECOMPOSER_LOG_LEVEL"


class ConfigError(CodecomposerError):
  """Configuration validation error."""
  pass


ERROR_MAP[ConfigError] = (2, "config_error")


class _Section(BaseModel):
  model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Section):
  """Corpus location and pianoroll windowing."""
  midi_dir: Optional[Path] = Field(None, description="One subdirectory of MIDI files per composer")
  segment_frames: int = Field(1408, gt=0, description="Frames per corpus window")
  frame_rate: float = Field(32.0, gt=0, description="Pianoroll frames per second")
  workers: int = Field(4, ge=1, description="Parallel file readers during ingest")

  @field_validator('midi_dir')
  @classmethod
  def check_midi_dir_exists(cls, v: Optional[Path]) -> Optional[Path]:
    """Referenced paths must exist when the config is loaded."""
    if v is not None and not v.is_dir():
      raise ValueError(f"MIDI directory does not exist: {v}")
    return v


class VqVaeConfig(_Section):
  codebook_size: int = Field(32, ge=2, description="K, number of codebook entries")
  code_dim: int = Field(16, ge=1, description="d, codebook vector dimension")
  downsample: int = Field(4, ge=1, description="D, frames per latent vector")
  kernel_size: int = Field(4, ge=2)
  hidden_channels: int = Field(64, ge=1)
  commitment: float = Field(0.25, ge=0, description="beta, commitment weight")
  dead_code_steps: int = Field(500, ge=1)
  steps: int = Field(2000, ge=1)
  holdout_fraction: float = Field(0.1, ge=0, lt=1, description="Segments held out for reconstruction accuracy")
  divergence_factor: float = Field(10.0, gt=1)
  divergence_patience: int = Field(100, ge=1)

  @field_validator('downsample')
  @classmethod
  def validate_power_of_two(cls, v: int) -> int:
    if v & (v - 1):
      raise ValueError(f"downsample must be a power of two, got: {v}")
    return v

  @field_validator('kernel_size')
  @classmethod
  def validate_even_kernel(cls, v: int) -> int:
    """Stride-2 stages halve the length only with an even kernel."""
    if v % 2:
      raise ValueError(f"kernel_size must be even, got: {v}")
    return v


class DiffusionConfig(_Section):
  timesteps: int = Field(100, ge=1, description="T")
  alpha_bar_final: float = Field(0.01, gt=0, lt=1)
  gamma_bar_final: float = Field(0.9, gt=0, lt=1)
  aux_weight: float = Field(1e-2, ge=0, description="lambda, weight of the x0 cross-entropy")
  truncation_rate: Optional[float] = Field(None, gt=0, le=1)
  steps: int = Field(2000, ge=1)
  divergence_factor: float = Field(10.0, gt=1)
  divergence_patience: int = Field(100, ge=1)

  @model_validator(mode='after')
  def check_final_mass(self) -> "DiffusionConfig":
    if self.alpha_bar_final + self.gamma_bar_final >= 1:
      raise ValueError(
        f"alpha_bar_final + gamma_bar_final must be < 1, got {self.alpha_bar_final + self.gamma_bar_final}"
      )
    return self


class DenoiserConfig(_Section):
  blocks: int = Field(2, ge=1)
  d_model: int = Field(64, ge=2)
  heads: int = Field(4, ge=1)
  ffn_mult: int = Field(4, ge=1)
  dropout: float = Field(0.0, ge=0, lt=1)

  @model_validator(mode='after')
  def check_heads(self) -> "DenoiserConfig":
    if self.d_model % self.heads:
      raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
    if self.d_model % 2:
      raise ValueError(f"d_model must be even for the sinusoidal timestep embedding, got {self.d_model}")
    return self


class ClassifierConfig(_Section):
  channels: int = Field(16, ge=1)
  kernel_size: int = Field(5, ge=1)
  pool: int = Field(4, ge=1, description="Time max-pooling factor applied to inputs")
  steps: int = Field(300, ge=1)
  batch_size: int = Field(16, ge=2)
  learning_rate: float = Field(1e-3, gt=0)
  holdout_fraction: float = Field(0.2, gt=0, lt=1)

  @field_validator('kernel_size')
  @classmethod
  def validate_odd_kernel(cls, v: int) -> int:
    if v % 2 == 0:
      raise ValueError(f"kernel_size must be odd to preserve length, got: {v}")
    return v


class GenerationConfig(_Section):
  count: int = Field(10, ge=1, description="Samples per style")
  mode: Literal["mask", "random"] = "mask"


class OptimizerSettings(_Section):
  """Effective AdamW settings after applying a profile and overrides."""
  learning_rate: float
  betas: tuple[float, float]
  warmup_steps: int
  batch_size: int
  weight_decay: float


OPTIMIZER_PROFILES: dict[str, OptimizerSettings] = {
  "paper": OptimizerSettings(learning_rate=4.5e-4, betas=(0.9, 0.96), warmup_steps=5000,
                              batch_size=16, weight_decay=0.01),
  "desk": OptimizerSettings(learning_rate=4.5e-4, betas=(0.9, 0.96), warmup_steps=100,
                            batch_size=8, weight_decay=0.01),
}

# Older configs spell the long-warmup profile "full"
PROFILE_ALIASES = {"full": "paper"}


class OptimizerConfig(_Section):
  profile: Literal["desk", "paper"] = "desk"
  learning_rate: Optional[float] = Field(None, gt=0)
  betas: Optional[tuple[float, float]] = None
  warmup_steps: Optional[int] = Field(None, ge=0)
  batch_size: Optional[int] = Field(None, ge=1)
  weight_decay: Optional[float] = Field(None, ge=0)

  @field_validator('profile', mode='before')
  @classmethod
  def resolve_alias(cls, v: Any) -> Any:
    return PROFILE_ALIASES.get(v, v) if isinstance(v, str) else v

  @field_validator('betas')
  @classmethod
  def validate_betas(cls, v: Optional[tuple[float, float]]) -> Optional[tuple[float, float]]:
    if v is not None and not all(0 <= b < 1 for b in v):
      raise ValueError(f"betas must lie in [0, 1), got: {v}")
    return v

  def resolve(self) -> OptimizerSettings:
    base = OPTIMIZER_PROFILES[self.profile].model_dump()
    overrides = self.model_dump(exclude={'profile'}, exclude_none=True)
    return OptimizerSettings(**{**base, **overrides})


class RunConfig(_Section):
  """Everything a pipeline run depends on. Every field is set or defaulted."""
  seed: int = 0
  output_dir: Path = Path("runs/default")
  data: DataConfig = DataConfig()
  vqvae: VqVaeConfig = VqVaeConfig()
  diffusion: DiffusionConfig = DiffusionConfig()
  denoiser: DenoiserConfig = DenoiserConfig()
  classifier: ClassifierConfig = ClassifierConfig()
  optimizer: OptimizerConfig = OptimizerConfig()
  generation: GenerationConfig = GenerationConfig()

  @model_validator(mode='after')
  def check_segment_length(self) -> "RunConfig":
    if self.data.segment_frames % self.vqvae.downsample:
      raise ValueError(
        f"segment_frames {self.data.segment_frames} is not divisible by downsample {self.vqvae.downsample}"
      )
    if self.data.segment_frames // self.vqvae.downsample < 1:
      raise ValueError("segments must produce at least one token")
    return self

  @property
  def token_length(self) -> int:
    return self.data.segment_frames // self.vqvae.downsample

  def resolve_optimizer(self) -> OptimizerSettings:
    return self.optimizer.resolve()

  def with_overrides(self, **updates: Any) -> "RunConfig":
    """Copy with top-level fields replaced, re-validated."""
    data = self.model_dump()
    data.update({key: value for key, value in updates.items() if value is not None})
    return _validate(data, "overrides")

  def to_yaml(self) -> str:
    return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

  @classmethod
  def from_yaml(cls, text: str, source: str = "<string>") -> "RunConfig":
    try:
      data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
      raise ConfigError(f"Invalid YAML in {source}: {exc}") from exc
    if data is None:
      data = {}
    if not isinstance(data, dict):
      raise ConfigError(f"{source}: top level must be a mapping")
    return _validate(data, source)


def _validate(data: dict, source: str) -> RunConfig:
  try:
    return RunConfig.model_validate(data)
  except ValidationError as exc:
    errors = []
    for error in exc.errors():
      field = ".".join(str(part) for part in error['loc']) if error['loc'] else 'config'
      errors.append(f"{field} - {error['msg']}")
    raise ConfigError(f"Invalid configuration in {source}:\n" + "\n".join(f"  - {e}" for e in errors)) from exc


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
  """Load and validate a YAML config; no path means all defaults.

  Raises:
    ConfigError: Missing file, invalid YAML or failed validation
  """
  if path is None:
    return RunConfig()
  config_path = Path(path)
  try:
    text = config_path.read_text()
  except FileNotFoundError as exc:
    raise ConfigError(f"Config file not found: {config_path}") from exc
  config = RunConfig.from_yaml(text, str(config_path))
  logging.info(f"{LOG_INDENT}✓ Loaded configuration from {config_path}")
  return config


def default_config_path(cli_value: Optional[str]) -> Optional[str]:
  """--config wins; otherwise the environment variable, if set."""
  return cli_value or os.environ.get(CONFIG_ENV_VAR) or None


def write_resolved_config(config: RunConfig, output_dir: Optional[Union[str, Path]] = None) -> Path:
  """Echo the fully defaulted config next to the run's outputs."""
  directory = Path(output_dir) if output_dir is not None else config.output_dir
  directory.mkdir(parents=True, exist_ok=True)
  path = directory / RESOLVED_CONFIG_NAME
  path.write_text(config.to_yaml())
  return path


def config_hash(config: RunConfig) -> str:
  """SHA-256 over canonical JSON of the resolved config."""
  canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
  return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
