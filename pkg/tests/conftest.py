"""Shared pytest fixtures for codecomposer tests."""

import numpy as np
import pytest

from codecomposer.config import OptimizerSettings, RunConfig
from codecomposer.diffusion import NoiseSchedule
from codecomposer.toy import motif_corpus, style_corpus


@pytest.fixture
def rng():
  """Seeded generator so every test is reproducible."""
  return np.random.default_rng(0)


@pytest.fixture
def temp_db(tmp_path):
  """Provide a temporary manifest path for testing."""
  return str(tmp_path / "manifest.db")


@pytest.fixture
def two_step_schedule():
  """K=2, two steps of (alpha, beta, gamma) = (0.8, 0.05, 0.1)."""
  return NoiseSchedule.from_steps([0.8, 0.8], [0.1, 0.1], 2)


@pytest.fixture
def fast_optimizer():
  """Short-warmup AdamW settings for training tests."""
  return OptimizerSettings(learning_rate=5e-3, betas=(0.9, 0.96), warmup_steps=0, batch_size=8, weight_decay=0.0)


@pytest.fixture
def small_config(tmp_path):
  """A desk-scale config small enough for unit tests."""
  return RunConfig.model_validate({
    "seed": 3,
    "output_dir": str(tmp_path / "run"),
    "data": {"segment_frames": 32},
    "vqvae": {"codebook_size": 8, "code_dim": 4, "downsample": 4, "hidden_channels": 16, "steps": 20,
              "dead_code_steps": 10},
    "diffusion": {"timesteps": 4, "steps": 10},
    "denoiser": {"blocks": 1, "d_model": 16, "heads": 2},
    "classifier": {"channels": 4, "pool": 2, "steps": 10, "batch_size": 4},
    "generation": {"count": 2},
  })


@pytest.fixture
def toy_motifs(rng):
  """Three families of repeating 4-frame motifs, 64-frame segments."""
  return motif_corpus(rng, families=3, segments_per_family=6, segment_frames=64)


@pytest.fixture
def toy_styles(rng):
  """Three styles in disjoint pitch registers, 32-frame segments."""
  return style_corpus(rng, styles=3, segments_per_style=10, segment_frames=32)


@pytest.fixture(scope="session")
def toy_config_yaml():
  """YAML for a run that goes through every pipeline stage in well under a minute."""
  return """seed: 7
data:
  segment_frames: 64
  frame_rate: 32
vqvae:
  codebook_size: 16
  code_dim: 8
  downsample: 4
  hidden_channels: 32
  steps: 400
  dead_code_steps: 50
diffusion:
  timesteps: 10
  steps: 100
denoiser:
  blocks: 1
  d_model: 32
  heads: 2
classifier:
  channels: 8
  pool: 2
  steps: 60
optimizer:
  profile: desk
  learning_rate: 0.005
  warmup_steps: 10
generation:
  count: 3
"""
