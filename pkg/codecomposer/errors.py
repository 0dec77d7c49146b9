"""Exception hierarchy and CLI error reporting."""

import re
from typing import Any, Optional, Tuple


class CodecomposerError(Exception):
  """Base class for all library errors."""
  pass


class NumericsError(CodecomposerError):
  """Invalid tensor operation or non-finite result."""
  pass


class ShapeError(NumericsError):
  """Tensor shapes incompatible with the requested operation."""
  pass


class CheckpointError(CodecomposerError):
  """Malformed checkpoint or architecture mismatch on load."""
  pass


class MidiParseError(CodecomposerError):
  """Structured parse failure with the byte offset where it occurred."""

  def __init__(self, message: str, offset: int):
    super().__init__(f"{message} (at byte {offset})")
    self.offset = offset


class MidiWriteError(CodecomposerError):
  """Events cannot be encoded as a Standard MIDI File."""
  pass


class ScheduleError(CodecomposerError):
  """Noise schedule violates its invariants."""
  pass


class DiffusionError(CodecomposerError):
  """Invalid state in the forward or reverse diffusion process."""
  pass


class DenoiserError(CodecomposerError):
  """Invalid input to the denoising network."""
  pass


class TrainingDivergedError(CodecomposerError):
  """Training loss stayed far above its starting value."""

  def __init__(self, message: str, step: int, recent_losses: list[float]):
    super().__init__(message)
    self.step = step
    self.recent_losses = recent_losses


class EvaluationError(CodecomposerError):
  """Evaluation inputs are insufficient or degenerate."""
  pass


class DegenerateIntersectionError(EvaluationError):
  """Two fitted Gaussians have no unique crossing point between their means."""
  pass


class IngestError(CodecomposerError):
  """Corpus ingestion produced nothing usable."""
  pass


class MissingStageError(CodecomposerError):
  """A pipeline stage ran before the stage it depends on."""

  def __init__(self, stage: str, path: Any):
    super().__init__(f"Missing output of stage '{stage}': {path} not found (run '{stage}' first)")
    self.stage = stage
    self.path = path


class UsageError(CodecomposerError):
  """Bad command-line arguments or inputs detected after parsing."""
  pass


# Maps exception type to (exit code, error_type).
# ConfigError is registered by config.py to avoid a circular import.
ERROR_MAP: dict[type, Tuple[int, str]] = {
  UsageError: (2, "usage_error"),
  MissingStageError: (1, "missing_stage"),
  MidiParseError: (1, "midi_parse_error"),
  MidiWriteError: (1, "midi_write_error"),
  CheckpointError: (1, "checkpoint_error"),
  TrainingDivergedError: (1, "training_diverged"),
  ScheduleError: (1, "schedule_error"),
  DiffusionError: (1, "diffusion_error"),
  DenoiserError: (1, "denoiser_error"),
  ShapeError: (1, "shape_error"),
  NumericsError: (1, "numerics_error"),
  EvaluationError: (1, "evaluation_error"),
  IngestError: (1, "ingest_error"),
}


def get_error_details(exception: Exception) -> Tuple[int, str]:
  """Get exit code and error type for an exception.

  Args:
    exception: The exception to map

  Returns:
    Tuple of (exit_code, error_type)
  """
  for exc_type, (code, etype) in ERROR_MAP.items():
    if isinstance(exception, exc_type):
      return code, etype

  # Default for unknown errors
  return 1, "runtime_error"


def build_error_report(error_type: str, message: str, details: Optional[dict] = None) -> dict:
  """Build the structured error report the CLI prints.

  Args:
    error_type: Error type (e.g., 'missing_stage', 'config_error')
    message: Human-readable error message
    details: Optional extra fields (offset, stage, step, ...)

  Returns:
    Dictionary with an "error" object
  """
  error_obj: dict[str, Any] = {
    "message": message,
    "type": error_type,
  }
  if details:
    error_obj["details"] = details

  return {"error": error_obj}


def error_details_of(exception: Exception) -> dict:
  """Collect the extra attributes carried by library exceptions."""
  details: dict[str, Any] = {}
  for attr in ("offset", "stage", "step"):
    value = getattr(exception, attr, None)
    if value is not None:
      details[attr] = value
  return details


def extract_error_message(exception: Exception) -> str:
  """Extract a clean message from a possibly wrapped exception.

  Exceptions re-raised with context often read like
  "IngestError: MidiParseError: truncated chunk (at byte 12)". Only the innermost
  message is useful on the terminal.

  Args:
    exception: The exception to extract from

  Returns:
    Clean error message string
  """
  error_str = str(exception).strip()
  if not error_str:
    return type(exception).__name__

  # Strip "SomethingError: " prefixes left by nested wrapping
  while True:
    prefix_match = re.match(r'^[A-Z]\w*(Error|Exception):\s+(.+)$', error_str, re.DOTALL)
    if not prefix_match:
      break
    error_str = prefix_match.group(2)

  return error_str
