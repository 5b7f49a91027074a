"""Single-file relational store behind the feedback service.

Feedback records are append-only; fine-tune jobs reference immutable id
batches and may only move their status forward; the active-checkpoint
pointer lives in a small key/value table. Each call opens its own sqlite
connection, so the store is safe to use from request handlers and the job
worker thread alike.
"""

from __future__ import annotations

import json
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .errors import InputError

JOB_STATUS_ORDER = ("queued", "running", "done", "failed")

_SCHEMA = """
CREATE TABLE IF NOT EXISTS feedback (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    sample_id TEXT NOT NULL,
    corrected_label TEXT,
    mask_path TEXT,
    source TEXT NOT NULL,
    created_at TEXT NOT NULL,
    consumed_by_job INTEGER
);
CREATE TABLE IF NOT EXISTS jobs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    status TEXT NOT NULL,
    checkpoint_in TEXT NOT NULL,
    checkpoint_out TEXT,
    config_json TEXT NOT NULL,
    feedback_ids_json TEXT NOT NULL,
    metrics_before_json TEXT,
    metrics_after_json TEXT,
    holdout_comparison_json TEXT,
    error TEXT,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS checkpoints (
    id TEXT PRIMARY KEY,
    path TEXT NOT NULL,
    parent TEXT,
    job_id INTEGER,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
"""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class ServiceStore:
    def __init__(self, db_path):
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        with self._connect() as conn:
            conn.executescript(_SCHEMA)
            # databases created before the per-sample comparison existed
            columns = {row["name"] for row in conn.execute("PRAGMA table_info(jobs)")}
            if "holdout_comparison_json" not in columns:
                conn.execute("ALTER TABLE jobs ADD COLUMN holdout_comparison_json TEXT")

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path, timeout=30.0)
        conn.row_factory = sqlite3.Row
        return conn

    # -- feedback (append-only) ----------------------------------------------

    def add_feedback(
        self,
        sample_id: str,
        corrected_label: Optional[str],
        mask_path: Optional[str],
        source: str,
    ) -> int:
        if corrected_label is None and mask_path is None:
            raise InputError("feedback must correct the label, the mask, or both")
        with self._connect() as conn:
            cur = conn.execute(
                "INSERT INTO feedback (sample_id, corrected_label, mask_path, source, created_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (sample_id, corrected_label, mask_path, source, _now()),
            )
            return int(cur.lastrowid)

    def get_feedback(self, ids: Sequence[int]) -> list[dict]:
        if not ids:
            return []
        marks = ",".join("?" for _ in ids)
        with self._connect() as conn:
            rows = conn.execute(
                f"SELECT * FROM feedback WHERE id IN ({marks}) ORDER BY id", list(ids)
            ).fetchall()
        return [dict(r) for r in rows]

    def pending_feedback(self) -> list[dict]:
        with self._connect() as conn:
            rows = conn.execute(
                "SELECT * FROM feedback WHERE consumed_by_job IS NULL ORDER BY id"
            ).fetchall()
        return [dict(r) for r in rows]

    def consume_feedback(self, ids: Sequence[int], job_id: int) -> None:
        marks = ",".join("?" for _ in ids)
        with self._connect() as conn:
            conn.execute(
                f"UPDATE feedback SET consumed_by_job = ? WHERE id IN ({marks})",
                [job_id, *ids],
            )

    def release_feedback(self, job_id: int) -> None:
        """A failed job's batch becomes pending again."""
        with self._connect() as conn:
            conn.execute(
                "UPDATE feedback SET consumed_by_job = NULL WHERE consumed_by_job = ?",
                (job_id,),
            )

    # -- jobs ------------------------------------------------------------------

    def create_job(self, checkpoint_in: str, config: dict, feedback_ids: Sequence[int]) -> int:
        now = _now()
        with self._connect() as conn:
            cur = conn.execute(
                "INSERT INTO jobs (status, checkpoint_in, config_json, feedback_ids_json,"
                " created_at, updated_at) VALUES ('queued', ?, ?, ?, ?, ?)",
                (checkpoint_in, json.dumps(config), json.dumps(list(feedback_ids)), now, now),
            )
            return int(cur.lastrowid)

    def get_job(self, job_id: int) -> Optional[dict]:
        with self._connect() as conn:
            row = conn.execute("SELECT * FROM jobs WHERE id = ?", (job_id,)).fetchone()
        if row is None:
            return None
        job = dict(row)
        job["config"] = json.loads(job.pop("config_json"))
        job["feedback_ids"] = json.loads(job.pop("feedback_ids_json"))
        for key in ("metrics_before_json", "metrics_after_json", "holdout_comparison_json"):
            payload = job.pop(key)
            job[key.replace("_json", "")] = json.loads(payload) if payload else None
        return job

    def list_jobs(self) -> list[dict]:
        with self._connect() as conn:
            rows = conn.execute("SELECT id FROM jobs ORDER BY id").fetchall()
        return [self.get_job(int(r["id"])) for r in rows]

    def advance_job(self, job_id: int, status: str, **fields) -> None:
        """Move a job's status forward; backward transitions are refused."""
        if status not in JOB_STATUS_ORDER:
            raise InputError(f"unknown job status {status!r}")
        current = self.get_job(job_id)
        if current is None:
            raise InputError(f"no job {job_id}")
        if JOB_STATUS_ORDER.index(status) <= JOB_STATUS_ORDER.index(current["status"]):
            raise InputError(
                f"job {job_id}: cannot move status {current['status']} -> {status}"
            )
        sets = ["status = ?", "updated_at = ?"]
        args: list = [status, _now()]
        renames = {
            "metrics_before": "metrics_before_json",
            "metrics_after": "metrics_after_json",
            "holdout_comparison": "holdout_comparison_json",
        }
        for key, value in fields.items():
            column = renames.get(key, key)
            if column.endswith("_json"):
                value = json.dumps(value)
            sets.append(f"{column} = ?")
            args.append(value)
        args.append(job_id)
        with self._connect() as conn:
            conn.execute(f"UPDATE jobs SET {', '.join(sets)} WHERE id = ?", args)

    def running_job(self) -> Optional[dict]:
        with self._connect() as conn:
            row = conn.execute(
                "SELECT id FROM jobs WHERE status IN ('queued', 'running') ORDER BY id LIMIT 1"
            ).fetchone()
        return self.get_job(int(row["id"])) if row else None

    # -- checkpoints and the active pointer -------------------------------------

    def add_checkpoint(self, checkpoint_id: str, path: str, parent: Optional[str], job_id: Optional[int]) -> None:
        with self._connect() as conn:
            conn.execute(
                "INSERT INTO checkpoints (id, path, parent, job_id, created_at) VALUES (?, ?, ?, ?, ?)",
                (checkpoint_id, path, parent, job_id, _now()),
            )

    def get_checkpoint(self, checkpoint_id: str) -> Optional[dict]:
        with self._connect() as conn:
            row = conn.execute(
                "SELECT * FROM checkpoints WHERE id = ?", (checkpoint_id,)
            ).fetchone()
        return dict(row) if row else None

    def list_checkpoints(self) -> list[dict]:
        with self._connect() as conn:
            rows = conn.execute("SELECT * FROM checkpoints ORDER BY created_at, id").fetchall()
        return [dict(r) for r in rows]

    def next_checkpoint_id(self) -> str:
        with self._connect() as conn:
            n = conn.execute("SELECT COUNT(*) AS n FROM checkpoints").fetchone()["n"]
        return f"ckpt_{int(n):04d}"

    def get_meta(self, key: str) -> Optional[str]:
        with self._connect() as conn:
            row = conn.execute("SELECT value FROM meta WHERE key = ?", (key,)).fetchone()
        return row["value"] if row else None

    def set_meta(self, key: str, value: str) -> None:
        with self._connect() as conn:
            conn.execute(
                "INSERT INTO meta (key, value) VALUES (?, ?)"
                " ON CONFLICT(key) DO UPDATE SET value = excluded.value",
                (key, value),
            )
