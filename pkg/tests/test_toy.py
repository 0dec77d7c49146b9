"""Unit tests for the synthetic corpora."""

import numpy as np
import pytest

from codecomposer.midi_io import ingest_directory
from codecomposer.toy import MOTIF_FRAMES, REGISTER_WIDTH, motif_corpus, register_base, style_corpus, tile, write_midi_corpus


def test_motif_corpus_shape_and_labels(rng):
  """Test segment shapes and family labels."""
  corpus = motif_corpus(rng, families=3, segments_per_family=4, segment_frames=32)
  assert corpus.segments.shape == (12, 128, 32)
  assert corpus.label_names == ["family0", "family1", "family2"]
  assert corpus.label_counts() == {"family0": 4, "family1": 4, "family2": 4}


def test_motif_corpus_is_periodic(rng):
  """Test that every segment repeats with the motif period."""
  corpus = motif_corpus(rng, families=3, segments_per_family=2, segment_frames=32)
  for segment in corpus.segments:
    np.testing.assert_array_equal(segment[:, MOTIF_FRAMES:], segment[:, :-MOTIF_FRAMES])
    assert segment.any()


def test_style_corpus_registers_are_disjoint(rng):
  """Test that each style only uses its own pitch register."""
  corpus = style_corpus(rng, styles=3, segments_per_style=5, segment_frames=32)
  for segment, label in zip(corpus.segments, corpus.labels):
    pitches = np.flatnonzero(segment.any(axis=1))
    assert pitches.min() >= register_base(label)
    assert pitches.max() < register_base(label) + REGISTER_WIDTH


def test_style_corpus_too_many_styles(rng):
  """Test that registers must fit in 128 pitches."""
  with pytest.raises(ValueError):
    style_corpus(rng, styles=5)


def test_tile_truncates():
  """Test tiling to a length that is not a multiple of the motif."""
  motif = np.arange(6).reshape(2, 3)
  np.testing.assert_array_equal(tile(motif, 5), [[0, 1, 2, 0, 1], [3, 4, 5, 3, 4]])


def test_write_midi_corpus_round_trip(tmp_path, rng):
  """Test that written files ingest back under the same labels."""
  corpus = style_corpus(rng, styles=2, segments_per_style=4, segment_frames=32)
  paths = write_midi_corpus(corpus, tmp_path, segments_per_file=2)
  assert len(paths) == 4
  assert {p.parent.name for p in paths} == {"composer0", "composer1"}
  ingested = ingest_directory(tmp_path, segment_frames=32)
  assert ingested.label_names == corpus.label_names
  first = ingested.segments[ingested.labels == 0][0]
  np.testing.assert_array_equal(first, corpus.segments[0])
