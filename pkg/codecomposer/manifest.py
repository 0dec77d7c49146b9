"""Run manifest: SQLite record of runs, artifacts, generations and metrics."""

import aiosqlite
from contextlib import asynccontextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

from codecomposer.utils import file_hash

UTC = timezone.utc


MANIFEST_NAME = "manifest.db"


@dataclass
class RunRecord:
  """One pipeline command execution."""
  id: int
  timestamp: str
  command: str
  config_hash: str
  seed: int
  status: str


class Manifest:
  """Async interface to the per-output-directory run manifest."""

  def __init__(self, path: Union[str, Path]):
    self.path = str(path)

  @asynccontextmanager
  async def _get_connection(self):
    """Context manager for database connections."""
    conn = await aiosqlite.connect(self.path)
    try:
      yield conn
      await conn.commit()
    finally:
      await conn.close()

  async def init(self):
    """Create tables if missing."""
    async with self._get_connection() as conn:
      await conn.execute("""
        CREATE TABLE IF NOT EXISTS runs (
          id INTEGER PRIMARY KEY AUTOINCREMENT,
          timestamp TEXT NOT NULL,
          command TEXT NOT NULL,
          config_hash TEXT NOT NULL,
          seed INTEGER NOT NULL,
          status TEXT NOT NULL DEFAULT 'running'
        )
      """)
      await conn.execute("""
        CREATE TABLE IF NOT EXISTS artifacts (
          run_id INTEGER NOT NULL REFERENCES runs(id),
          kind TEXT NOT NULL,
          path TEXT NOT NULL,
          content_hash TEXT NOT NULL
        )
      """)
      await conn.execute("""
        CREATE TABLE IF NOT EXISTS generations (
          run_id INTEGER NOT NULL REFERENCES runs(id),
          path TEXT NOT NULL,
          style INTEGER NOT NULL,
          content_hash TEXT NOT NULL
        )
      """)
      await conn.execute("""
        CREATE TABLE IF NOT EXISTS metrics (
          run_id INTEGER NOT NULL REFERENCES runs(id),
          name TEXT NOT NULL,
          value REAL
        )
      """)
      await conn.execute("""
        CREATE INDEX IF NOT EXISTS idx_metrics_name
        ON metrics(name)
      """)

  async def start_run(self, command: str, config_hash: str, seed: int) -> int:
    """Insert a run in 'running' state and return its id."""
    async with self._get_connection() as conn:
      cursor = await conn.execute("""
        INSERT INTO runs (timestamp, command, config_hash, seed, status)
        VALUES (?, ?, ?, ?, 'running')
      """, (
        datetime.now(UTC).isoformat().replace('+00:00', 'Z'),
        command,
        config_hash,
        seed,
      ))
      run_id = cursor.lastrowid
    assert run_id is not None
    return run_id

  async def record_artifact(self, run_id: int, kind: str, path: Union[str, Path],
                            content_hash: Optional[str] = None) -> str:
    """Record a written file; the hash is computed from disk when not given."""
    digest = content_hash or file_hash(path)
    async with self._get_connection() as conn:
      await conn.execute(
        "INSERT INTO artifacts (run_id, kind, path, content_hash) VALUES (?, ?, ?, ?)",
        (run_id, kind, str(path), digest),
      )
    return digest

  async def record_generation(self, run_id: int, path: Union[str, Path], style: int,
                              content_hash: Optional[str] = None) -> str:
    digest = content_hash or file_hash(path)
    async with self._get_connection() as conn:
      await conn.execute(
        "INSERT INTO generations (run_id, path, style, content_hash) VALUES (?, ?, ?, ?)",
        (run_id, str(path), style, digest),
      )
    return digest

  async def record_metric(self, run_id: int, name: str, value: float):
    async with self._get_connection() as conn:
      await conn.execute(
        "INSERT INTO metrics (run_id, name, value) VALUES (?, ?, ?)",
        (run_id, name, float(value)),
      )

  async def finish_run(self, run_id: int, status: str = "ok"):
    async with self._get_connection() as conn:
      await conn.execute("UPDATE runs SET status = ? WHERE id = ?", (status, run_id))

  async def get_run(self, run_id: int) -> Optional[RunRecord]:
    async with self._get_connection() as conn:
      cursor = await conn.execute(
        "SELECT id, timestamp, command, config_hash, seed, status FROM runs WHERE id = ?",
        (run_id,),
      )
      row = await cursor.fetchone()
    return RunRecord(*row) if row else None

  async def get_generations(self, run_id: int) -> list[dict]:
    async with self._get_connection() as conn:
      cursor = await conn.execute(
        "SELECT path, style, content_hash FROM generations WHERE run_id = ? ORDER BY rowid",
        (run_id,),
      )
      rows = await cursor.fetchall()
    return [{"path": path, "style": style, "content_hash": digest} for path, style, digest in rows]

  async def get_artifacts(self, run_id: int) -> list[dict]:
    async with self._get_connection() as conn:
      cursor = await conn.execute(
        "SELECT kind, path, content_hash FROM artifacts WHERE run_id = ? ORDER BY rowid",
        (run_id,),
      )
      rows = await cursor.fetchall()
    return [{"kind": kind, "path": path, "content_hash": digest} for kind, path, digest in rows]

  async def latest_metrics(self, command: Optional[str] = None) -> dict[str, float]:
    """Metrics of the most recent successful run, optionally of one command."""
    async with self._get_connection() as conn:
      query = "SELECT id FROM runs WHERE status = 'ok'"
      params: list = []
      if command:
        query += " AND command = ?"
        params.append(command)
      cursor = await conn.execute(query + " ORDER BY id DESC LIMIT 1", params)
      row = await cursor.fetchone()
      if not row:
        return {}
      cursor = await conn.execute(
        "SELECT name, value FROM metrics WHERE run_id = ? ORDER BY rowid", (row[0],)
      )
      rows = await cursor.fetchall()
    return {name: value for name, value in rows}
