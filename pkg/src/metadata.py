"""
Artifact registry for weakcat.
Tracks every file a command writes (vocabularies, datasets, checkpoints,
logs, reports) in SQLite so reruns can be checked for byte-identical output.
"""

import hashlib
import logging
import os
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)


def calculate_file_hash(file_path: Union[str, Path]) -> str:
    """Calculate SHA256 hash of a file."""
    sha256_hash = hashlib.sha256()
    try:
        with open(file_path, "rb") as f:
            for chunk in iter(lambda: f.read(65536), b""):
                sha256_hash.update(chunk)
        return sha256_hash.hexdigest()
    except Exception as e:
        logger.error(f"Error calculating hash for {file_path}: {e}")
        raise


class ArtifactRegistry:
    """Records produced artifacts in a SQLite database."""

    def __init__(self, db_path: str = "weakcat_artifacts.db"):
        self.db_path = db_path
        self._init_database()

    def _init_database(self) -> None:
        with sqlite3.connect(self.db_path) as conn:
            conn.execute("""
                CREATE TABLE IF NOT EXISTS artifacts (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    file_path TEXT NOT NULL,
                    kind TEXT NOT NULL,
                    command TEXT NOT NULL,
                    seed INTEGER,
                    file_size_bytes INTEGER NOT NULL,
                    sha256_hash TEXT NOT NULL,
                    recorded_at TEXT NOT NULL
                )
            """)
            conn.execute("CREATE INDEX IF NOT EXISTS idx_artifacts_path ON artifacts(file_path)")
            conn.commit()
        logger.debug(f"Artifact registry ready at {self.db_path}")

    @staticmethod
    def _key(path: Union[str, Path]) -> str:
        return str(Path(path).resolve())

    def record(self, path: Union[str, Path], kind: str, command: str, seed: Optional[int] = None) -> int:
        """Hash a freshly written file and store it; returns the row id."""
        file_hash = calculate_file_hash(path)
        file_size = os.path.getsize(path)
        previous = self.latest(path)
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute(
                """
                INSERT INTO artifacts
                (file_path, kind, command, seed, file_size_bytes, sha256_hash, recorded_at)
                VALUES (?, ?, ?, ?, ?, ?, ?)
                """,
                (self._key(path), kind, command, seed, file_size, file_hash, datetime.now().isoformat()),
            )
            conn.commit()
            row_id = cursor.lastrowid
        if previous and previous["sha256_hash"] != file_hash:
            logger.info(f"{kind} {path} changed since the last run ({previous['sha256_hash'][:12]} -> {file_hash[:12]})")
        else:
            logger.debug(f"Recorded {kind} {path} ({file_hash[:12]})")
        return row_id

    def latest(self, path: Union[str, Path]) -> Optional[Dict[str, Any]]:
        """Most recent entry for a path."""
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            row = conn.execute(
                "SELECT * FROM artifacts WHERE file_path = ? ORDER BY id DESC LIMIT 1",
                (self._key(path),),
            ).fetchone()
            return dict(row) if row else None

    def history(self, path: Union[str, Path]) -> List[Dict[str, Any]]:
        """All entries for a path, oldest first."""
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            rows = conn.execute(
                "SELECT * FROM artifacts WHERE file_path = ? ORDER BY id", (self._key(path),)
            ).fetchall()
            return [dict(row) for row in rows]

    def is_unchanged(self, path: Union[str, Path]) -> bool:
        """True when the file on disk still matches its last recorded hash."""
        entry = self.latest(path)
        if entry is None or not Path(path).exists():
            return False
        return calculate_file_hash(path) == entry["sha256_hash"]
