"""Standard MIDI File I/O and the pianoroll corpus built from it.

Only the parts of SMF 1.1 that affect note timing are interpreted: note on/off,
set-tempo meta events, and the header division. Everything else is skipped by
length. Velocity and sustain pedal are dropped on pianoroll conversion.
"""

import bisect
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from codecomposer.errors import IngestError, MidiParseError, MidiWriteError, UsageError


PITCHES = 128
DEFAULT_FRAME_RATE = 32
DEFAULT_TEMPO = 500_000  # microseconds per quarter note (120 bpm)
DEFAULT_TICKS_PER_QUARTER = 480
GENERATED_VELOCITY = 80
MIDI_SUFFIXES = (".mid", ".midi")

# Frame boundaries are compared with this slack so that n / frame_rate maps back to n
_FRAME_EPS = 1e-9

# Data bytes per channel-voice status (high nibble)
_CHANNEL_MESSAGE_LENGTH = {
  0x80: 2,  # note off
  0x90: 2,  # note on
  0xA0: 2,  # polyphonic key pressure
  0xB0: 2,  # control change
  0xC0: 1,  # program change
  0xD0: 1,  # channel pressure
  0xE0: 2,  # pitch bend
}


@dataclass(frozen=True)
class NoteEvent:
  """A sounding note in seconds."""
  pitch: int
  onset: float
  duration: float
  velocity: int = GENERATED_VELOCITY

  def __post_init__(self):
    if not 0 <= self.pitch <= 127:
      raise ValueError(f"pitch must be in [0, 127], got {self.pitch}")
    if not math.isfinite(self.onset) or self.onset < 0:
      raise ValueError(f"onset must be finite and >= 0, got {self.onset}")
    if not math.isfinite(self.duration) or self.duration <= 0:
      raise ValueError(f"duration must be > 0, got {self.duration}")
    if not 1 <= self.velocity <= 127:
      raise ValueError(f"velocity must be in [1, 127], got {self.velocity}")

  @property
  def offset(self) -> float:
    return self.onset + self.duration


@dataclass
class TempoMap:
  """Tick-to-seconds conversion honoring every set-tempo event."""
  ticks_per_quarter: int
  changes: list[tuple[int, int]] = field(default_factory=list)  # (tick, us per quarter)
  ticks_per_second: Optional[float] = None  # SMPTE division

  def __post_init__(self):
    self.changes = sorted(self.changes)
    if not self.changes or self.changes[0][0] != 0:
      self.changes.insert(0, (0, DEFAULT_TEMPO))
    # Seconds elapsed at each change
    self._starts: list[float] = [0.0]
    for (tick, tempo), (next_tick, _) in zip(self.changes, self.changes[1:]):
      self._starts.append(self._starts[-1] + (next_tick - tick) * tempo / 1e6 / self.ticks_per_quarter)
    self._ticks = [tick for tick, _ in self.changes]

  def seconds(self, tick: int) -> float:
    if self.ticks_per_second:
      return tick / self.ticks_per_second
    i = bisect.bisect_right(self._ticks, tick) - 1
    start_tick, tempo = self.changes[i]
    return self._starts[i] + (tick - start_tick) * tempo / 1e6 / self.ticks_per_quarter


@dataclass
class Pianoroll:
  """Binary 128 x F grid sampled at `frame_rate` frames per second."""
  grid: np.ndarray
  frame_rate: float = DEFAULT_FRAME_RATE

  def __post_init__(self):
    grid = np.asarray(self.grid)
    if grid.ndim != 2 or grid.shape[0] != PITCHES:
      raise ValueError(f"pianoroll grid must be {PITCHES} x F, got {grid.shape}")
    if grid.shape[1] == 0:
      raise ValueError("pianoroll needs at least one frame")
    if not np.isin(grid, (0, 1)).all():
      raise ValueError("pianoroll entries must be 0 or 1")
    if self.frame_rate <= 0:
      raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
    self.grid = grid.astype(np.uint8)

  @property
  def frames(self) -> int:
    return int(self.grid.shape[1])

  @property
  def duration(self) -> float:
    return self.frames / self.frame_rate


@dataclass
class Corpus:
  """Fixed-length pianoroll segments with composer labels."""
  segments: np.ndarray  # (N, 128, F) uint8
  labels: np.ndarray  # (N,) int
  label_names: list[str]
  frame_rate: float = DEFAULT_FRAME_RATE

  def __post_init__(self):
    self.segments = np.asarray(self.segments, dtype=np.uint8)
    self.labels = np.asarray(self.labels, dtype=np.int64)
    if self.segments.ndim != 3 or self.segments.shape[1] != PITCHES:
      raise ValueError(f"segments must be (N, {PITCHES}, F), got {self.segments.shape}")
    if len(self.labels) != len(self.segments):
      raise ValueError("one label per segment required")
    if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
      raise ValueError("label id out of range")

  def __len__(self) -> int:
    return int(self.segments.shape[0])

  @property
  def segment_frames(self) -> int:
    return int(self.segments.shape[2])

  @property
  def items(self) -> list[tuple[Pianoroll, int]]:
    return [(Pianoroll(seg, self.frame_rate), int(label)) for seg, label in zip(self.segments, self.labels)]

  def label_counts(self) -> dict[str, int]:
    counts = np.bincount(self.labels, minlength=len(self.label_names))
    return {name: int(count) for name, count in zip(self.label_names, counts)}

  def save(self, path: Union[str, Path]) -> None:
    with open(path, "wb") as f:
      np.savez_compressed(
        f,
        segments=self.segments,
        labels=self.labels,
        label_names=np.array(self.label_names),
        frame_rate=np.array(self.frame_rate),
      )

  @classmethod
  def load(cls, path: Union[str, Path]) -> "Corpus":
    with np.load(path) as data:
      return cls(
        segments=data["segments"],
        labels=data["labels"],
        label_names=[str(name) for name in data["label_names"]],
        frame_rate=float(data["frame_rate"]),
      )


class _Reader:
  """Byte cursor that reports its offset on every failure."""

  def __init__(self, data: bytes, offset: int = 0, end: Optional[int] = None):
    self.data = data
    self.pos = offset
    self.end = len(data) if end is None else end

  def remaining(self) -> int:
    return self.end - self.pos

  def read(self, n: int) -> bytes:
    if n < 0 or self.pos + n > self.end:
      raise MidiParseError(f"truncated data: wanted {n} bytes, {self.remaining()} left", self.pos)
    chunk = self.data[self.pos:self.pos + n]
    self.pos += n
    return chunk

  def u8(self) -> int:
    return self.read(1)[0]

  def u16(self) -> int:
    return int(struct.unpack(">H", self.read(2))[0])

  def u32(self) -> int:
    return int(struct.unpack(">I", self.read(4))[0])

  def vlq(self) -> int:
    start = self.pos
    value = 0
    for _ in range(4):
      byte = self.u8()
      value = (value << 7) | (byte & 0x7F)
      if not byte & 0x80:
        return value
    raise MidiParseError("variable-length quantity longer than 4 bytes", start)


def read_vlq(data: bytes, offset: int = 0) -> tuple[int, int]:
  """Decode a variable-length quantity; returns (value, bytes consumed)."""
  reader = _Reader(data, offset)
  value = reader.vlq()
  return value, reader.pos - offset


def encode_vlq(value: int) -> bytes:
  if value < 0 or value > 0x0FFFFFFF:
    raise MidiWriteError(f"value {value} does not fit a variable-length quantity")
  out = [value & 0x7F]
  value >>= 7
  while value:
    out.append((value & 0x7F) | 0x80)
    value >>= 7
  return bytes(reversed(out))


@dataclass
class _RawNote:
  channel: int
  pitch: int
  velocity: int
  start: int
  end: int


def _parse_track(reader: _Reader, notes: list[_RawNote], tempos: list[tuple[int, int]]) -> None:
  chunk_start = reader.pos
  chunk_id = reader.read(4)
  if chunk_id != b"MTrk":
    raise MidiParseError(f"expected 'MTrk' chunk, got {chunk_id!r}", chunk_start)
  length = reader.u32()
  if length > reader.remaining():
    raise MidiParseError(f"track chunk declares {length} bytes, {reader.remaining()} left", chunk_start)
  track = _Reader(reader.data, reader.pos, reader.pos + length)
  reader.pos += length

  tick = 0
  status: Optional[int] = None
  pending: dict[tuple[int, int], list[tuple[int, int]]] = {}

  while track.remaining() > 0:
    tick += track.vlq()
    event_offset = track.pos
    first = track.u8()

    if first == 0xFF:
      meta_type = track.u8()
      payload = track.read(track.vlq())
      if meta_type == 0x51:
        if len(payload) != 3:
          raise MidiParseError("set-tempo event must carry 3 bytes", event_offset)
        tempo = int.from_bytes(payload, "big")
        if tempo == 0:
          raise MidiParseError("set-tempo of zero microseconds", event_offset)
        tempos.append((tick, tempo))
      elif meta_type == 0x2F:
        break
      continue

    if first in (0xF0, 0xF7):
      track.read(track.vlq())
      status = None
      continue

    if first >= 0x80:
      if first >= 0xF0:
        raise MidiParseError(f"unexpected system message 0x{first:02X} in track", event_offset)
      status = first
      data = track.read(_CHANNEL_MESSAGE_LENGTH[status & 0xF0])
    else:
      if status is None:
        raise MidiParseError("running status without a preceding status byte", event_offset)
      data = bytes([first]) + track.read(_CHANNEL_MESSAGE_LENGTH[status & 0xF0] - 1)

    kind, channel = status & 0xF0, status & 0x0F
    if kind not in (0x80, 0x90):
      continue
    pitch, velocity = data[0] & 0x7F, data[1] & 0x7F
    key = (channel, pitch)
    if kind == 0x90 and velocity > 0:
      pending.setdefault(key, []).append((tick, velocity))
      continue
    # Note-off, or note-on with velocity 0
    if not pending.get(key):
      logging.warning(f"Note-off without matching note-on (pitch {pitch}, channel {channel}) at byte {event_offset}; skipped")
      continue
    start, start_velocity = pending[key].pop(0)
    notes.append(_RawNote(channel, pitch, start_velocity, start, tick))

  for (channel, pitch), starts in pending.items():
    for start, velocity in starts:
      logging.warning(f"Note {pitch} on channel {channel} never released; closed at end of track")
      notes.append(_RawNote(channel, pitch, velocity, start, tick))


def parse_midi(data: bytes) -> tuple[list[NoteEvent], TempoMap]:
  """Parse a format 0 or 1 Standard MIDI File.

  Args:
    data: Raw file bytes

  Returns:
    Tuple of (note events sorted by onset then pitch, tempo map)

  Raises:
    MidiParseError: For any malformed input, with the byte offset of the failure
  """
  reader = _Reader(bytes(data))
  if reader.remaining() < 4 or reader.read(4) != b"MThd":
    raise MidiParseError("missing 'MThd' header chunk", 0)
  header_len = reader.u32()
  if header_len < 6:
    raise MidiParseError(f"header chunk too short ({header_len} bytes)", 4)
  if header_len > reader.remaining():
    raise MidiParseError("header chunk truncated", reader.pos)
  header = _Reader(reader.data, reader.pos, reader.pos + header_len)
  file_format = header.u16()
  track_count = header.u16()
  division = header.u16()
  reader.pos += header_len

  if file_format not in (0, 1):
    raise MidiParseError(f"unsupported MIDI format {file_format}", 8)
  if division == 0:
    raise MidiParseError("division of zero ticks per quarter", 12)

  ticks_per_second = None
  if division & 0x8000:
    frames_per_second = 256 - (division >> 8)
    ticks_per_second = float(frames_per_second * (division & 0xFF))
    if ticks_per_second <= 0:
      raise MidiParseError("invalid SMPTE division", 12)

  notes: list[_RawNote] = []
  tempos: list[tuple[int, int]] = []
  for _ in range(track_count):
    if reader.remaining() == 0:
      raise MidiParseError(f"header declares {track_count} tracks, file ends early", reader.pos)
    _parse_track(reader, notes, tempos)

  tempo_map = TempoMap(division & 0x7FFF if not ticks_per_second else 1, tempos, ticks_per_second)
  events = []
  for note in notes:
    onset = tempo_map.seconds(note.start)
    duration = tempo_map.seconds(note.end) - onset
    if duration <= 0:
      continue
    events.append(NoteEvent(note.pitch, onset, duration, max(1, note.velocity)))
  events.sort(key=lambda e: (e.onset, e.pitch, e.duration))
  return events, tempo_map


def read_notes(data: bytes) -> list[NoteEvent]:
  """Parse note events, discarding the tempo map."""
  events, _ = parse_midi(data)
  return events


def write_midi(events: Sequence[NoteEvent], ticks_per_quarter: int = DEFAULT_TICKS_PER_QUARTER,
               tempo: int = DEFAULT_TEMPO) -> bytes:
  """Encode events as a single-track format 0 file.

  Onsets and durations are each rounded to the nearest tick (at least one tick
  long), so both come back within half a tick.
  """
  if not 0 < ticks_per_quarter < 0x8000:
    raise MidiWriteError(f"ticks_per_quarter must be in [1, 32767], got {ticks_per_quarter}")
  if not 0 < tempo < 1 << 24:
    raise MidiWriteError(f"tempo must fit 3 bytes, got {tempo}")
  ticks_per_second = ticks_per_quarter * 1e6 / tempo

  # (tick, order, status, pitch, velocity); note-offs sort before note-ons at equal ticks
  messages = []
  for event in events:
    start = int(round(event.onset * ticks_per_second))
    length = max(1, int(round(event.duration * ticks_per_second)))
    messages.append((start, 1, 0x90, event.pitch, event.velocity))
    messages.append((start + length, 0, 0x80, event.pitch, 0))
  messages.sort()

  body = bytearray()
  body += b"\x00\xFF\x51\x03" + tempo.to_bytes(3, "big")
  last = 0
  for tick, _, status, pitch, velocity in messages:
    body += encode_vlq(tick - last)
    body += bytes([status, pitch, velocity])
    last = tick
  body += b"\x00\xFF\x2F\x00"

  if len(body) > 0xFFFFFFFF:
    raise MidiWriteError(f"track of {len(body)} bytes overflows the chunk length field")

  header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ticks_per_quarter)
  return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def to_pianoroll(events: Iterable[NoteEvent], frame_rate: float = DEFAULT_FRAME_RATE,
                 frame_count: Optional[int] = None) -> Pianoroll:
  """Sample events into a binary grid.

  Cell (p, f) is 1 iff a note of pitch p sounds at time f / frame_rate, i.e.
  onset <= f / frame_rate < onset + duration. Notes past frame_count are cut.
  """
  if frame_rate <= 0:
    raise ValueError(f"frame_rate must be positive, got {frame_rate}")
  events = list(events)
  if frame_count is None:
    frame_count = max((_frame_ceil(e.offset, frame_rate) for e in events), default=1)
    frame_count = max(frame_count, 1)
  grid = np.zeros((PITCHES, frame_count), dtype=np.uint8)
  for event in events:
    start = _frame_ceil(event.onset, frame_rate)
    end = min(_frame_ceil(event.offset, frame_rate), frame_count)
    if start < end:
      grid[event.pitch, start:end] = 1
  return Pianoroll(grid, frame_rate)


def _frame_ceil(seconds: float, frame_rate: float) -> int:
  return max(0, math.ceil(seconds * frame_rate - _FRAME_EPS))


def from_pianoroll(roll: Pianoroll, velocity: int = GENERATED_VELOCITY) -> list[NoteEvent]:
  """Turn each maximal run of 1s in a pitch row into one note."""
  events = []
  padded = np.pad(roll.grid.astype(np.int8), ((0, 0), (1, 1)))
  edges = np.diff(padded, axis=1)
  for pitch in range(PITCHES):
    starts = np.flatnonzero(edges[pitch] == 1)
    ends = np.flatnonzero(edges[pitch] == -1)
    for start, end in zip(starts, ends):
      events.append(NoteEvent(pitch, start / roll.frame_rate, (end - start) / roll.frame_rate, velocity))
  events.sort(key=lambda e: (e.onset, e.pitch))
  return events


def segment_pianoroll(roll: Pianoroll, segment_frames: int) -> list[np.ndarray]:
  """Cut consecutive non-overlapping windows; a shorter remainder is dropped."""
  if segment_frames <= 0:
    raise ValueError(f"segment_frames must be positive, got {segment_frames}")
  count = roll.frames // segment_frames
  return [roll.grid[:, i * segment_frames:(i + 1) * segment_frames] for i in range(count)]


def _load_piece(path: Path, frame_rate: float) -> tuple[Path, Optional[Pianoroll], Optional[str]]:
  try:
    events = read_notes(path.read_bytes())
  except (MidiParseError, OSError) as exc:
    return path, None, str(exc)
  if not events:
    return path, None, "no note events"
  return path, to_pianoroll(events, frame_rate), None


def ingest_directory(midi_dir: Union[str, Path], segment_frames: int,
                     frame_rate: float = DEFAULT_FRAME_RATE, workers: int = 1) -> Corpus:
  """Build a corpus from <midi_dir>/<composer>/*.mid.

  Composer labels are the sorted subdirectory names. Unparsable files are
  skipped with a warning. Results are ordered by file path whatever `workers` is.

  Raises:
    UsageError: No MIDI files under the directory
    IngestError: A composer has no usable file, or no segments were produced
  """
  root = Path(midi_dir)
  if not root.is_dir():
    raise UsageError(f"MIDI directory not found: {root}")
  label_dirs = sorted(p for p in root.iterdir() if p.is_dir())
  files = {d.name: sorted(f for f in d.rglob("*") if f.suffix.lower() in MIDI_SUFFIXES) for d in label_dirs}
  files = {name: paths for name, paths in files.items() if paths}
  if not files:
    raise UsageError(f"No MIDI files found under {root} (expected one subdirectory per composer)")

  label_names = sorted(files)
  all_paths = [(label, path) for label, name in enumerate(label_names) for path in files[name]]
  with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
    results = list(pool.map(lambda item: _load_piece(item[1], frame_rate), all_paths))

  segments: list[np.ndarray] = []
  labels: list[int] = []
  errors: list[str] = []
  parsed_per_label = [0] * len(label_names)
  for (label, _), (path, roll, error) in zip(all_paths, results):
    if roll is None:
      logging.warning(f"Skipping {path}: {error}")
      errors.append(f"{path}: {error}")
      continue
    parsed_per_label[label] += 1
    pieces = segment_pianoroll(roll, segment_frames)
    if not pieces:
      logging.warning(f"{path} is shorter than one {segment_frames}-frame segment; no segments taken")
    segments.extend(pieces)
    labels.extend([label] * len(pieces))

  if not any(parsed_per_label):
    raise IngestError("No parsable MIDI files:\n  " + "\n  ".join(errors))
  empty = [name for name, count in zip(label_names, parsed_per_label) if count == 0]
  if empty:
    raise IngestError(f"No parsable MIDI file for composer(s): {', '.join(empty)}")
  if not segments:
    raise IngestError(f"No piece is at least {segment_frames} frames long")

  return Corpus(np.stack(segments), np.array(labels), label_names, frame_rate)
