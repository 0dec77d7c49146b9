"""Command-line pipeline: ingest, train-vqvae, train-diffusion, generate, evaluate, dump-schedule."""

import argparse
import asyncio
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from codecomposer.__version__ import __version__
from codecomposer.config import (
  LOG_INDENT, LOG_LEVEL_ENV_VAR, RunConfig, config_hash, default_config_path, load_config,
  write_resolved_config,
)
from codecomposer.denoiser import DenoiserArchitecture, DenoiserModel
from codecomposer.diffusion import sample_batch, sample_seed, schedule_from_config, train_diffusion
from codecomposer.errors import (
  CodecomposerError, MissingStageError, UsageError, build_error_report, error_details_of,
  extract_error_message, get_error_details,
)
from codecomposer.evaluation import (
  StyleClassifier, oa_report, roll_features, style_accuracy, train_classifier, write_report,
  holdout_split,
)
from codecomposer.manifest import MANIFEST_NAME, Manifest
from codecomposer.midi_io import (
  Corpus, Pianoroll, from_pianoroll, ingest_directory, read_notes, to_pianoroll, write_midi,
)
from codecomposer.utils import read_tokens, write_csv, write_pgm, write_records, write_tokens
from codecomposer.vqvae import VqVaeModel, decode, encode_tokens, reconstruction_accuracy, train_vqvae


LOG_FORMAT = '%(asctime)s %(levelprefix)s %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'
GENERATION_PATTERN = re.compile(r"style(\d+)_(\d+)\.mid$")

# Per-stage rng streams so every command is reproducible on its own
STAGE_STREAMS = {"train-vqvae": 1, "train-diffusion": 2, "generate": 3, "evaluate": 4}


class LevelPrefixFormatter(logging.Formatter):
  """Adds %(levelprefix)s: the level name and colon padded to nine columns."""

  def format(self, record: logging.LogRecord) -> str:
    record.levelprefix = f"{record.levelname}:".ljust(9)
    return super().format(record)


def setup_logging(level: str) -> None:
  handler = logging.StreamHandler(sys.stderr)
  handler.setFormatter(LevelPrefixFormatter(LOG_FORMAT, LOG_DATEFMT))
  root = logging.getLogger()
  root.handlers[:] = [handler]
  root.setLevel(level.upper())


@dataclass
class RunPaths:
  """Where each stage reads and writes inside the output directory."""
  root: Path

  @property
  def corpus(self) -> Path:
    return self.root / "corpus.npz"

  @property
  def vqvae(self) -> Path:
    return self.root / "vqvae.vqdt"

  @property
  def vqvae_history(self) -> Path:
    return self.root / "vqvae_history.csv"

  @property
  def tokens(self) -> Path:
    return self.root / "tokens.csv"

  @property
  def denoiser(self) -> Path:
    return self.root / "denoiser.vqdt"

  @property
  def diffusion_history(self) -> Path:
    return self.root / "diffusion_history.csv"

  @property
  def generations(self) -> Path:
    return self.root / "generations"

  @property
  def classifier(self) -> Path:
    return self.root / "classifier.vqdt"

  @property
  def manifest(self) -> Path:
    return self.root / MANIFEST_NAME

  def require(self, path: Path, stage: str) -> Path:
    if not path.exists():
      raise MissingStageError(stage, path)
    return path


@dataclass
class StageResult:
  """What a command produced, recorded in the manifest afterwards."""
  artifacts: list[tuple[str, Path]] = field(default_factory=list)
  generations: list[tuple[Path, int]] = field(default_factory=list)
  metrics: dict[str, float] = field(default_factory=dict)


def stage_rng(config: RunConfig, command: str) -> np.random.Generator:
  return np.random.default_rng([config.seed, STAGE_STREAMS.get(command, 0)])


def show_progress() -> bool:
  return sys.stderr.isatty()


# Commands

def cmd_ingest(config: RunConfig, paths: RunPaths, args: argparse.Namespace) -> StageResult:
  midi_dir = Path(args.midi_dir) if args.midi_dir else config.data.midi_dir
  if midi_dir is None:
    raise UsageError("No MIDI directory given (pass it as an argument or set data.midi_dir)")
  corpus = ingest_directory(midi_dir, config.data.segment_frames, config.data.frame_rate, config.data.workers)
  paths.root.mkdir(parents=True, exist_ok=True)
  corpus.save(paths.corpus)

  logging.info(f"Ingested {midi_dir}: {len(corpus)} segments of {corpus.segment_frames} frames")
  for name, count in corpus.label_counts().items():
    logging.info(f"{LOG_INDENT}{name}: {count} segments")
  print(f"{len(corpus.label_names)} labels, {len(corpus)} segments -> {paths.corpus}")

  result = StageResult(artifacts=[("corpus", paths.corpus)])
  result.metrics["segments"] = len(corpus)
  result.metrics["labels"] = len(corpus.label_names)
  return result


def _load_corpus(paths: RunPaths) -> Corpus:
  return Corpus.load(paths.require(paths.corpus, "ingest"))


def cmd_train_vqvae(config: RunConfig, paths: RunPaths, args: argparse.Namespace) -> StageResult:
  corpus = _load_corpus(paths)
  rng = stage_rng(config, "train-vqvae")
  if config.vqvae.holdout_fraction > 0 and len(corpus) > 1:
    train_idx, holdout_idx = holdout_split(corpus.labels, config.vqvae.holdout_fraction, rng)
  else:
    train_idx, holdout_idx = np.arange(len(corpus)), np.array([], dtype=np.int64)

  trained = train_vqvae(corpus.segments[train_idx], config.vqvae, config.resolve_optimizer(), rng,
                        progress=show_progress())
  model = trained.model
  model.save(paths.vqvae)
  write_csv(paths.vqvae_history, ["step", "loss"], enumerate(trained.history, start=1))

  tokens = encode_tokens(corpus.segments, model)
  write_tokens(paths.tokens, tokens, corpus.labels)

  result = StageResult(artifacts=[
    ("vqvae", paths.vqvae), ("vqvae_architecture", paths.vqvae.with_suffix(".json")),
    ("vqvae_history", paths.vqvae_history), ("tokens", paths.tokens),
  ])
  result.metrics["vqvae_final_loss"] = trained.history[-1]
  result.metrics["codes_used"] = trained.codes_used
  if len(holdout_idx):
    accuracy = reconstruction_accuracy(corpus.segments[holdout_idx], model)
    result.metrics["reconstruction_accuracy"] = accuracy
    logging.info(f"{LOG_INDENT}Held-out reconstruction accuracy: {accuracy:.4f}")
  return result


def cmd_train_diffusion(config: RunConfig, paths: RunPaths, args: argparse.Namespace) -> StageResult:
  corpus = _load_corpus(paths)
  paths.require(paths.vqvae, "train-vqvae")
  tokens, labels = read_tokens(paths.require(paths.tokens, "train-vqvae"))
  if labels is None:
    labels = corpus.labels
  k = config.vqvae.codebook_size
  schedule = schedule_from_config(config.diffusion, k)
  rng = stage_rng(config, "train-diffusion")
  architecture = DenoiserArchitecture(
    codebook_size=k, length=tokens.shape[1], styles=len(corpus.label_names),
    timesteps=schedule.timesteps, config=config.denoiser,
  )
  model = DenoiserModel(architecture, rng)
  trained = train_diffusion(model, tokens, labels, schedule, config.diffusion, config.resolve_optimizer(), rng,
                            progress=show_progress())
  model.save(paths.denoiser)
  write_csv(paths.diffusion_history, ["step", "loss", "kl"],
            ((i, loss, kl) for i, (loss, kl) in enumerate(zip(trained.history, trained.kl_history), start=1)))

  result = StageResult(artifacts=[
    ("denoiser", paths.denoiser), ("denoiser_architecture", paths.denoiser.with_suffix(".json")),
    ("diffusion_history", paths.diffusion_history),
  ])
  result.metrics["diffusion_final_loss"] = trained.history[-1]
  result.metrics["prior_term"] = trained.prior_term
  return result


def cmd_generate(config: RunConfig, paths: RunPaths, args: argparse.Namespace) -> StageResult:
  corpus = _load_corpus(paths)
  vqvae = VqVaeModel.load(paths.require(paths.vqvae, "train-vqvae"))
  denoiser = DenoiserModel.load(paths.require(paths.denoiser, "train-diffusion"))
  schedule = schedule_from_config(config.diffusion, vqvae.codebook_size)
  if denoiser.architecture.timesteps != schedule.timesteps:
    raise UsageError(
      f"denoiser was trained with T={denoiser.architecture.timesteps}, config has T={schedule.timesteps}"
    )

  styles = range(denoiser.architecture.styles) if args.style is None else [args.style]
  for style in styles:
    if not 0 <= style < denoiser.architecture.styles:
      raise UsageError(f"--style {style} outside [0, {denoiser.architecture.styles})")
  count = args.count or config.generation.count
  mode = args.mode or config.generation.mode
  paths.generations.mkdir(parents=True, exist_ok=True)

  result = StageResult()
  token_rows, token_labels = [], []
  for style in styles:
    rngs = [sample_seed(config.seed, style, i) for i in range(count)]
    sequences = sample_batch(denoiser, [style] * count, denoiser.architecture.length, schedule, rngs,
                             mode, config.diffusion.truncation_rate)
    for index, sequence in enumerate(sequences):
      _, roll = decode(sequence, vqvae, corpus.frame_rate)
      midi_path = paths.generations / f"style{style}_{index:03d}.mid"
      midi_path.write_bytes(write_midi(from_pianoroll(roll)))
      write_pgm(midi_path.with_suffix(".pgm"), roll.grid)
      result.generations.append((midi_path, style))
      token_rows.append(sequence.tokens)
      token_labels.append(style)
    logging.info(f"{LOG_INDENT}✓ Style {style} ({corpus.label_names[style]}): {count} samples")

  tokens_path = paths.generations / "tokens.csv"
  write_tokens(tokens_path, np.stack(token_rows), np.array(token_labels))
  result.artifacts.append(("generated_tokens", tokens_path))
  print(f"{len(result.generations)} pieces -> {paths.generations}")
  return result


def load_generations(paths: RunPaths, frame_rate: float, frames: int) -> list[tuple[Pianoroll, int]]:
  directory = paths.require(paths.generations, "generate")
  pieces = []
  for path in sorted(directory.glob("style*_*.mid")):
    match = GENERATION_PATTERN.search(path.name)
    if not match:
      continue
    roll = to_pianoroll(read_notes(path.read_bytes()), frame_rate, frames)
    pieces.append((roll, int(match.group(1))))
  if not pieces:
    raise MissingStageError("generate", directory / "style*_*.mid")
  return pieces


def cmd_evaluate(config: RunConfig, paths: RunPaths, args: argparse.Namespace) -> StageResult:
  corpus = _load_corpus(paths)
  generated = load_generations(paths, corpus.frame_rate, corpus.segment_frames)
  result = StageResult()

  if paths.classifier.exists():
    classifier = StyleClassifier.load(paths.classifier)
    logging.info(f"{LOG_INDENT}Using trained classifier {paths.classifier}")
  else:
    trained = train_classifier(corpus.segments, corpus.labels, len(corpus.label_names), config.classifier,
                               stage_rng(config, "evaluate"), progress=show_progress())
    classifier = trained.model
    classifier.save(paths.classifier)
    result.artifacts.append(("classifier", paths.classifier))
    result.metrics["classifier_holdout_accuracy"] = trained.holdout_accuracy

  train_features = [roll_features(roll) for roll, _ in corpus.items]
  generated_features = [roll_features(roll) for roll, _ in generated]
  oa = oa_report(train_features, generated_features)
  accuracy = style_accuracy(generated, classifier)

  for kind, path in zip(("report", "confusion", "confusion_heatmap"),
                        write_report(paths.root, oa, accuracy, corpus.label_names)):
    result.artifacts.append((kind, path))
  for name, value in oa.items():
    result.metrics[f"oa_{name}"] = value
  result.metrics["style_accuracy"] = accuracy.overall

  print(f"Average OA {oa['average']:.4f}, style accuracy {accuracy.overall:.4f}")
  return result


def cmd_dump_schedule(config: RunConfig, paths: RunPaths, args: argparse.Namespace) -> StageResult:
  schedule = schedule_from_config(config.diffusion, config.vqvae.codebook_size)
  rows = schedule.rows()
  if args.out:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, rows)
    print(f"{len(rows)} steps -> {out}")
  else:
    print(",".join(rows[0].keys()))
    for row in rows:
      print(",".join(repr(value) for value in row.values()))
  return StageResult()


COMMANDS: dict[str, Callable[[RunConfig, RunPaths, argparse.Namespace], StageResult]] = {
  "ingest": cmd_ingest,
  "train-vqvae": cmd_train_vqvae,
  "train-diffusion": cmd_train_diffusion,
  "generate": cmd_generate,
  "evaluate": cmd_evaluate,
  "dump-schedule": cmd_dump_schedule,
}


async def record_run(paths: RunPaths, command: str, config: RunConfig, result: StageResult,
                     status: str = "ok") -> int:
  manifest = Manifest(paths.manifest)
  await manifest.init()
  run_id = await manifest.start_run(command, config_hash(config), config.seed)
  for kind, path in result.artifacts:
    await manifest.record_artifact(run_id, kind, path)
  for path, style in result.generations:
    await manifest.record_generation(run_id, path, style)
  for name, value in result.metrics.items():
    await manifest.record_metric(run_id, name, value)
  await manifest.finish_run(run_id, status)
  return run_id


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(
    prog="codecomposer",
    description="Composer-conditioned symbolic music generation with VQ-VAE tokens and discrete diffusion"
  )
  parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument(
    "--config",
    default=None,
    help="Path to YAML config file (default: $CODECOMPOSER_CONFIG, else built-in defaults)"
  )
  common.add_argument(
    "--seed",
    type=int,
    default=None,
    help="Override the configured seed"
  )
  common.add_argument(
    "--out",
    default=None,
    help="Output directory (dump-schedule: CSV file; default prints to stdout)"
  )
  common.add_argument(
    "--log-level",
    default=None,
    help="Logging level (default: $CODECOMPOSER_LOG_LEVEL or INFO)"
  )

  sub = parser.add_subparsers(dest="command", required=True)
  ingest = sub.add_parser("ingest", parents=[common], help="Build the corpus from <midi_dir>/<composer>/*.mid")
  ingest.add_argument("midi_dir", nargs="?", help="MIDI directory (default: data.midi_dir)")
  sub.add_parser("train-vqvae", parents=[common], help="Train the VQ-VAE and tokenize the corpus")
  sub.add_parser("train-diffusion", parents=[common], help="Train the denoiser on the token corpus")
  generate = sub.add_parser("generate", parents=[common], help="Sample pieces for one or every style")
  generate.add_argument("--style", type=int, default=None, help="Composer label (default: every label)")
  generate.add_argument("--count", type=int, default=None, help="Samples per style (default: generation.count)")
  generate.add_argument("--mode", choices=["mask", "random"], default=None, help="Initial x_T (default: generation.mode)")
  sub.add_parser("evaluate", parents=[common], help="OA feature report and style accuracy of the generations")
  sub.add_parser("dump-schedule", parents=[common], help="Write the noise schedule as CSV")
  return parser


def report_failure(exc: Exception, command: str, paths: Optional[RunPaths], config: Optional[RunConfig]) -> int:
  """Record a failed run when the output directory exists and print the JSON error report."""
  code, error_type = get_error_details(exc)
  if paths is not None and config is not None and paths.root.is_dir() and command != "dump-schedule":
    try:
      asyncio.run(record_run(paths, command, config, StageResult(), status="failed"))
    except Exception as record_exc:
      logging.warning(f"Could not record failed run: {record_exc}")
  report = build_error_report(error_type, extract_error_message(exc), error_details_of(exc) or None)
  print(json.dumps(report, default=str), file=sys.stderr)
  return code


def main(argv: Optional[Sequence[str]] = None) -> int:
  """Entry point for the pipeline CLI. Returns the process exit code."""
  load_dotenv()
  parser = build_parser()
  args = parser.parse_args(argv)
  setup_logging(args.log_level or os.environ.get(LOG_LEVEL_ENV_VAR, "INFO"))

  paths: Optional[RunPaths] = None
  config: Optional[RunConfig] = None
  try:
    if args.command == "generate" and args.count is not None and args.count < 1:
      raise UsageError(f"--count must be at least 1, got {args.count}")
    config = load_config(default_config_path(args.config))
    output_dir = args.out if args.command != "dump-schedule" else None
    config = config.with_overrides(seed=args.seed, output_dir=output_dir)
    paths = RunPaths(config.output_dir)

    result = COMMANDS[args.command](config, paths, args)
    if args.command != "dump-schedule":
      write_resolved_config(config, paths.root)
      run_id = asyncio.run(record_run(paths, args.command, config, result))
      logging.info(f"{LOG_INDENT}✓ {args.command} recorded as run {run_id} in {paths.manifest}")
    return 0

  except CodecomposerError as exc:
    logging.error(extract_error_message(exc))
    return report_failure(exc, args.command, paths, config)

  except Exception as exc:
    # Anything outside the library hierarchy (corrupt .npz, disk errors) is a runtime failure
    logging.exception(f"Unexpected error in {args.command}: {exc}")
    return report_failure(exc, args.command, paths, config)


if __name__ == "__main__":
  sys.exit(main())
