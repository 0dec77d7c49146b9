"""Unit tests for error mapping and CLI error reports."""

import pytest

from codecomposer.errors import (
  CheckpointError, CodecomposerError, DegenerateIntersectionError, DiffusionError, EvaluationError,
  IngestError, MidiParseError, MissingStageError, NumericsError, ShapeError, TrainingDivergedError,
  UsageError, build_error_report, error_details_of, extract_error_message, get_error_details,
)


def test_build_error_report_basic():
  """Test basic error report structure."""
  report = build_error_report("missing_stage", "Run train-vqvae first")

  assert report["error"]["type"] == "missing_stage"
  assert report["error"]["message"] == "Run train-vqvae first"
  assert "details" not in report["error"]


def test_build_error_report_with_details():
  """Test that details are attached when present."""
  report = build_error_report("midi_parse_error", "truncated", {"offset": 12})
  assert report["error"]["details"] == {"offset": 12}


@pytest.mark.parametrize("exception, expected", [
  (UsageError("bad flag"), (2, "usage_error")),
  (MissingStageError("ingest", "corpus.npz"), (1, "missing_stage")),
  (MidiParseError("bad header", 0), (1, "midi_parse_error")),
  (CheckpointError("bad magic"), (1, "checkpoint_error")),
  (TrainingDivergedError("diverged", 5, [1.0]), (1, "training_diverged")),
  (DiffusionError("unreachable"), (1, "diffusion_error")),
  (ShapeError("mismatch"), (1, "shape_error")),
  (NumericsError("nan"), (1, "numerics_error")),
  (DegenerateIntersectionError("identical"), (1, "evaluation_error")),
  (IngestError("nothing parsed"), (1, "ingest_error")),
  (RuntimeError("boom"), (1, "runtime_error")),
])
def test_get_error_details(exception, expected):
  """Test exit code and type mapping, subclasses included."""
  assert get_error_details(exception) == expected


def test_all_library_errors_share_base():
  """Test that every library error derives from CodecomposerError."""
  for cls in (UsageError, MissingStageError, MidiParseError, CheckpointError, EvaluationError, IngestError):
    assert issubclass(cls, CodecomposerError)


def test_midi_parse_error_carries_offset():
  """Test that the byte offset is kept and shown."""
  exc = MidiParseError("missing 'MThd' header chunk", 0)
  assert exc.offset == 0
  assert "(at byte 0)" in str(exc)
  assert error_details_of(exc) == {"offset": 0}


def test_missing_stage_names_stage():
  """Test that the absent stage is named in the message."""
  exc = MissingStageError("train-vqvae", "runs/x/vqvae.vqdt")
  assert "train-vqvae" in str(exc)
  assert error_details_of(exc) == {"stage": "train-vqvae"}


def test_training_diverged_details():
  """Test that divergence reports the step and recent losses."""
  exc = TrainingDivergedError("loss exploded", 120, [50.0, 60.0])
  assert exc.recent_losses == [50.0, 60.0]
  assert error_details_of(exc) == {"step": 120}


def test_error_details_empty_for_plain_errors():
  """Test that errors without extra attributes have no details."""
  assert error_details_of(ValueError("x")) == {}


def test_extract_error_message_strips_prefixes():
  """Test removal of nested exception-name prefixes."""
  exc = IngestError("IngestError: MidiParseError: truncated chunk (at byte 12)")
  assert extract_error_message(exc) == "truncated chunk (at byte 12)"


def test_extract_error_message_plain():
  """Test that plain messages pass through."""
  assert extract_error_message(ValueError("simple message")) == "simple message"


def test_extract_error_message_empty():
  """Test that empty messages fall back to the class name."""
  assert extract_error_message(DiffusionError()) == "DiffusionError"
