"""End-to-end pipeline test on a small synthetic corpus.

Runs every CLI stage in order against motif MIDI files written to a
temporary directory. Takes a few minutes; run with:

    pytest tests/integration/test_pipeline.py -m slow -v
"""

import asyncio

import numpy as np
import pytest

from codecomposer.cli import RunPaths, main
from codecomposer.config import CONFIG_ENV_VAR
from codecomposer.evaluation import FEATURE_NAMES
from codecomposer.manifest import Manifest
from codecomposer.toy import motif_corpus, style_corpus, write_midi_corpus
from codecomposer.utils import read_csv

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, toy_config_yaml):
  """Ingest, train both models and generate once; shared by every test here."""
  root = tmp_path_factory.mktemp("pipeline")
  midi_dir = root / "midi"
  corpus = motif_corpus(np.random.default_rng(5), families=3, segments_per_family=8, segment_frames=64)
  write_midi_corpus(corpus, midi_dir, segments_per_file=2)

  config = root / "config.yaml"
  config.write_text(toy_config_yaml)
  out = root / "run"
  common = ["--config", str(config), "--out", str(out)]

  with pytest.MonkeyPatch.context() as mp:
    mp.delenv(CONFIG_ENV_VAR, raising=False)
    assert main(["ingest", str(midi_dir), *common]) == 0
    assert main(["train-vqvae", *common]) == 0
    assert main(["train-diffusion", *common]) == 0
    assert main(["generate", *common]) == 0
  return root, common, RunPaths(out)


def manifest_call(paths: RunPaths, method: str, *args):
  async def call():
    return await getattr(Manifest(paths.manifest), method)(*args)
  return asyncio.run(call())


def test_stage_outputs_exist(pipeline):
  """Test that every stage left its artifacts behind."""
  _, _, paths = pipeline
  for path in (paths.corpus, paths.vqvae, paths.tokens, paths.denoiser, paths.vqvae_history,
               paths.diffusion_history):
    assert path.exists(), path
  assert len(list(paths.generations.glob("style*_*.mid"))) == 9
  assert len(list(paths.generations.glob("style*_*.pgm"))) == 9


def test_vqvae_uses_several_codes(pipeline):
  """Test that tokenization did not collapse onto one codebook entry."""
  _, _, paths = pipeline
  metrics = manifest_call(paths, "latest_metrics", "train-vqvae")
  assert metrics["codes_used"] >= 2


def test_generate_one_style(pipeline):
  """Test that --style and --count produce tagged pieces."""
  _, common, paths = pipeline
  assert main(["generate", "--style", "2", "--count", "5", *common]) == 0
  for i in range(5):
    assert (paths.generations / f"style2_{i:03d}.mid").exists()

  # ingest, train-vqvae, train-diffusion and generate ran first
  run_id = 5
  run = manifest_call(paths, "get_run", run_id)
  assert run.command == "generate"
  generations = manifest_call(paths, "get_generations", run_id)
  assert len(generations) == 5
  assert {g["style"] for g in generations} == {2}


def test_generation_is_reproducible(pipeline):
  """Test that the same seed regenerates byte-identical files."""
  _, common, paths = pipeline
  first = [(paths.generations / f"style1_{i:03d}.mid").read_bytes() for i in range(3)]
  assert main(["generate", "--style", "1", *common]) == 0
  assert [(paths.generations / f"style1_{i:03d}.mid").read_bytes() for i in range(3)] == first


def test_evaluate_report(pipeline):
  """Test the OA values, their average and the accuracy matrix."""
  _, common, paths = pipeline
  assert main(["evaluate", *common]) == 0

  rows = read_csv(paths.root / "report.csv")
  oa = {row["name"]: float(row["value"]) for row in rows if row["section"] == "oa"}
  assert set(oa) == set(FEATURE_NAMES) | {"average"}
  for value in oa.values():
    assert 0.0 <= value <= 1.0
  assert oa["average"] == pytest.approx(np.mean([oa[name] for name in FEATURE_NAMES]))

  confusion = (paths.root / "confusion.csv").read_text().strip().splitlines()
  assert len(confusion) == 4
  assert (paths.root / "confusion.pgm").exists()
  assert paths.classifier.exists()


STYLE_CONFIG = """seed: 1
data:
  segment_frames: 64
vqvae:
  codebook_size: 16
  code_dim: 8
  downsample: 4
  hidden_channels: 32
  steps: 1000
  dead_code_steps: 100
diffusion:
  timesteps: 10
  steps: 1500
denoiser:
  blocks: 2
  d_model: 32
  heads: 2
classifier:
  channels: 8
  pool: 2
  steps: 300
optimizer:
  profile: desk
  learning_rate: 0.003
  warmup_steps: 20
generation:
  count: 30
"""


def test_generations_follow_requested_style(tmp_path):
  """Test that 30 pieces per composer land in the requested register and match the corpus features."""
  midi_dir = tmp_path / "midi"
  corpus = style_corpus(np.random.default_rng(2), styles=3, segments_per_style=20, segment_frames=64)
  write_midi_corpus(corpus, midi_dir, segments_per_file=4)
  config = tmp_path / "config.yaml"
  config.write_text(STYLE_CONFIG)
  out = tmp_path / "run"
  common = ["--config", str(config), "--out", str(out)]

  with pytest.MonkeyPatch.context() as mp:
    mp.delenv(CONFIG_ENV_VAR, raising=False)
    for command in (["ingest", str(midi_dir)], ["train-vqvae"], ["train-diffusion"], ["generate"], ["evaluate"]):
      assert main([*command, *common]) == 0, command

  rows = read_csv(out / "report.csv")
  accuracy = {row["name"]: float(row["value"]) for row in rows if row["section"] == "accuracy"}
  assert accuracy["overall"] >= 0.80
  oa = {row["name"]: float(row["value"]) for row in rows if row["section"] == "oa"}
  assert oa["average"] > 0.6
  assert len(list((out / "generations").glob("style*_*.mid"))) == 90
