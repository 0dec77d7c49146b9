"""Utility functions for hashing, figure/CSV export and training bookkeeping."""

import csv
import hashlib
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from codecomposer.errors import TrainingDivergedError


PathLike = Union[str, Path]


def content_hash(payload: bytes) -> str:
  """Git blob hash of a byte payload.

  Args:
    payload: File contents

  Returns:
    40-character hex SHA-1 over "blob <len>\\0" + payload, as `git hash-object` prints
  """
  header = f"blob {len(payload)}\0".encode("ascii")
  return hashlib.sha1(header + payload).hexdigest()


def file_hash(path: PathLike) -> str:
  return content_hash(Path(path).read_bytes())


def encode_pgm(grid: np.ndarray, flip: bool = True) -> bytes:
  """Binary PGM (P5) image of a 2-D array, one byte per cell.

  Args:
    grid: Values in [0, 1]; binary pianorolls map to 0/255
    flip: Put row 0 at the bottom, so low pitches sit low in the image

  Returns:
    PGM bytes
  """
  grid = np.asarray(grid, dtype=np.float64)
  if grid.ndim != 2 or grid.size == 0:
    raise ValueError(f"PGM export needs a non-empty 2-D array, got shape {grid.shape}")
  pixels = np.clip(np.rint(grid * 255), 0, 255).astype(np.uint8)
  if flip:
    pixels = pixels[::-1]
  height, width = pixels.shape
  return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path: PathLike, grid: np.ndarray, flip: bool = True) -> bytes:
  payload = encode_pgm(grid, flip)
  Path(path).write_bytes(payload)
  return payload


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
  path = Path(path)
  with path.open("w", newline="") as f:
    writer = csv.writer(f)
    writer.writerow(header)
    writer.writerows(rows)
  return path


def write_records(path: PathLike, records: Sequence[Mapping[str, Any]]) -> Path:
  """CSV from dictionaries sharing the keys of the first record."""
  if not records:
    raise ValueError("no records to write")
  header = list(records[0].keys())
  return write_csv(path, header, ([record[key] for key in header] for record in records))


def read_csv(path: PathLike) -> list[dict[str, str]]:
  with Path(path).open(newline="") as f:
    return list(csv.DictReader(f))


def write_pianoroll_csv(path: PathLike, grid: np.ndarray) -> Path:
  """One frame per line, 128 pitch columns."""
  grid = np.asarray(grid)
  return write_csv(path, [f"p{p}" for p in range(grid.shape[0])], grid.T.astype(int).tolist())


def write_tokens(path: PathLike, tokens: np.ndarray, labels: Optional[np.ndarray] = None) -> Path:
  """Token sequences as CSV: one sequence per line, optional leading label."""
  tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
  header = [f"t{i}" for i in range(tokens.shape[1])]
  if labels is None:
    return write_csv(path, header, tokens.tolist())
  rows = ([int(label)] + row for label, row in zip(labels, tokens.tolist()))
  return write_csv(path, ["label"] + header, rows)


def read_tokens(path: PathLike) -> tuple[np.ndarray, Optional[np.ndarray]]:
  with Path(path).open(newline="") as f:
    reader = csv.reader(f)
    header = next(reader)
    rows = [[int(value) for value in row] for row in reader]
  values = np.array(rows, dtype=np.int64).reshape(len(rows), len(header))
  if header and header[0] == "label":
    return values[:, 1:], values[:, 0]
  return values, None


class DivergenceMonitor:
  """Abort training when the loss stays far above its first value.

  Raises TrainingDivergedError after `patience` consecutive steps with
  loss > factor * initial loss.
  """

  def __init__(self, name: str, factor: float, patience: int):
    self.name = name
    self.factor = factor
    self.patience = patience
    self.initial: Optional[float] = None
    self.window: list[float] = []

  def update(self, step: int, loss: float) -> None:
    if self.initial is None:
      self.initial = loss
    if loss > self.factor * self.initial:
      self.window.append(loss)
    else:
      self.window.clear()
    if len(self.window) >= self.patience:
      raise TrainingDivergedError(
        f"{self.name} loss above {self.factor:g}x its initial value {self.initial:.4g} "
        f"for {len(self.window)} consecutive steps (step {step}, last {loss:.4g})",
        step, list(self.window),
      )
