"""Synthetic corpora for desk-scale runs.

`motif_corpus` tiles short pianoroll patterns from a few families. `style_corpus`
gives every "composer" its own pitch register so styles are trivially separable.
`write_midi_corpus` renders either as a <root>/<composer>/*.mid tree for ingest.
"""

from pathlib import Path
from typing import Union

import numpy as np

from codecomposer.midi_io import DEFAULT_FRAME_RATE, PITCHES, Corpus, Pianoroll, from_pianoroll, write_midi


MOTIF_FRAMES = 4
REGISTER_WIDTH = 12


def _family_motif(family: int, transpose: int) -> np.ndarray:
  """Family 0: held note; 1: two alternating notes; 2: pulsed triad."""
  motif = np.zeros((PITCHES, MOTIF_FRAMES), dtype=np.uint8)
  root = 60 + transpose
  kind = family % 3
  if kind == 0:
    motif[root, 0:3] = 1
  elif kind == 1:
    motif[root, 0:2] = 1
    motif[root + 7, 2:4] = 1
  else:
    motif[[root, root + 4, root + 7], 0] = 1
    motif[[root, root + 4, root + 7], 2] = 1
  return motif


def tile(motif: np.ndarray, frames: int) -> np.ndarray:
  repeats = -(-frames // motif.shape[1])
  return np.tile(motif, (1, repeats))[:, :frames]


def motif_corpus(rng: np.random.Generator, families: int = 3, segments_per_family: int = 20,
                 segment_frames: int = 64, transpositions: tuple[int, ...] = (0, 2, 5),
                 frame_rate: float = DEFAULT_FRAME_RATE) -> Corpus:
  """Segments that repeat a 4-frame motif; the label is the motif family."""
  segments, labels = [], []
  for family in range(families):
    for _ in range(segments_per_family):
      transpose = int(rng.choice(transpositions)) + 12 * (family // 3)
      segments.append(tile(_family_motif(family, transpose), segment_frames))
      labels.append(family)
  names = [f"family{f}" for f in range(families)]
  return Corpus(np.stack(segments), np.array(labels), names, frame_rate)


def register_base(style: int) -> int:
  return 36 + 2 * REGISTER_WIDTH * style


def _style_motif(style: int, rng: np.random.Generator, motif_frames: int) -> np.ndarray:
  motif = np.zeros((PITCHES, motif_frames), dtype=np.uint8)
  base = register_base(style)
  for frame in range(0, motif_frames, 2):
    pitch = base + int(rng.integers(0, REGISTER_WIDTH))
    motif[pitch, frame:frame + 2] = 1
  return motif


def style_corpus(rng: np.random.Generator, styles: int = 3, segments_per_style: int = 20,
                 segment_frames: int = 64, motif_frames: int = 8,
                 frame_rate: float = DEFAULT_FRAME_RATE) -> Corpus:
  """Each style plays repeated motifs inside its own disjoint octave register."""
  if register_base(styles - 1) + REGISTER_WIDTH > PITCHES:
    raise ValueError(f"{styles} styles do not fit in {PITCHES} pitches")
  segments, labels = [], []
  for style in range(styles):
    for _ in range(segments_per_style):
      segments.append(tile(_style_motif(style, rng, motif_frames), segment_frames))
      labels.append(style)
  names = [f"composer{s}" for s in range(styles)]
  return Corpus(np.stack(segments), np.array(labels), names, frame_rate)


def write_midi_corpus(corpus: Corpus, root: Union[str, Path], segments_per_file: int = 4) -> list[Path]:
  """Concatenate consecutive same-label segments into MIDI files under root/<label>/."""
  root = Path(root)
  written = []
  for label, name in enumerate(corpus.label_names):
    directory = root / name
    directory.mkdir(parents=True, exist_ok=True)
    members = corpus.segments[corpus.labels == label]
    for index, start in enumerate(range(0, len(members), segments_per_file)):
      grid = np.concatenate(list(members[start:start + segments_per_file]), axis=1)
      events = from_pianoroll(Pianoroll(grid, corpus.frame_rate))
      path = directory / f"{name}_{index:03d}.mid"
      path.write_bytes(write_midi(events))
      written.append(path)
  return written
