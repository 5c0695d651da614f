"""
SQLite run registry: one row per command invocation (its manifest) plus an
activity log of durable run events.
"""

import json
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Optional

DB_FILE = Path("boltzgen_runs.db")
MAX_EVENTS_PER_RUN = 500


def get_conn() -> sqlite3.Connection:
    conn = sqlite3.connect(str(DB_FILE))
    conn.row_factory = sqlite3.Row
    return conn


def init_db():
    with get_conn() as conn:
        # WAL mode so --threads workers can log while the main thread reads
        conn.execute("PRAGMA journal_mode=WAL")
        conn.execute("PRAGMA synchronous=NORMAL")
        conn.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id        TEXT PRIMARY KEY,
                command       TEXT NOT NULL,
                system        TEXT,
                config_hash   TEXT NOT NULL,
                seed          INTEGER,
                versions      TEXT,
                wall_time     REAL,
                energy_calls  INTEGER NOT NULL DEFAULT 0,
                status        TEXT NOT NULL DEFAULT 'running',
                output_dir    TEXT,
                warnings      TEXT,
                created_at    TEXT NOT NULL DEFAULT (datetime('now')),
                updated_at    TEXT NOT NULL DEFAULT (datetime('now'))
            )
        """)
        conn.execute("""
            CREATE TABLE IF NOT EXISTS activity_log (
                id          INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id      TEXT NOT NULL,
                event_type  TEXT NOT NULL,
                message     TEXT,
                created_at  TEXT NOT NULL
            )
        """)
        conn.execute("CREATE INDEX IF NOT EXISTS idx_activity_run ON activity_log(run_id)")
        _migrate_runs_schema(conn)
        conn.commit()


def _migrate_runs_schema(conn: sqlite3.Connection) -> None:
    """Add columns introduced after the first registry layout."""
    for col, definition in [("warnings", "TEXT"), ("system", "TEXT")]:
        if not _table_has_column(conn, "runs", col):
            conn.execute(f"ALTER TABLE runs ADD COLUMN {col} {definition}")


def _table_has_column(conn: sqlite3.Connection, table: str, column: str) -> bool:
    rows = conn.execute(f"PRAGMA table_info({table})").fetchall()
    return any(r["name"] == column for r in rows)


# ── Runs ───────────────────────────────────────────────────────────────────────

def upsert_run(manifest: dict) -> None:
    """Insert or refresh the registry row for `manifest["run_id"]`."""
    now = datetime.utcnow().isoformat()
    row = (
        manifest["command"], manifest.get("system"), manifest["config_hash"], manifest.get("seed"),
        json.dumps(manifest.get("versions", {})), manifest.get("wall_time"),
        int(manifest.get("energy_calls", 0)), manifest.get("status", "running"),
        manifest.get("output_dir"), json.dumps(manifest.get("warnings", [])), now,
    )
    with get_conn() as conn:
        conn.execute(
            "INSERT OR IGNORE INTO runs (run_id, command, config_hash, created_at, updated_at) VALUES (?,?,?,?,?)",
            (manifest["run_id"], manifest["command"], manifest["config_hash"], now, now),
        )
        conn.execute(
            """UPDATE runs SET command=?, system=?, config_hash=?, seed=?, versions=?, wall_time=?,
                   energy_calls=?, status=?, output_dir=?, warnings=?, updated_at=?
               WHERE run_id=?""",
            (*row, manifest["run_id"]),
        )
        conn.commit()


def get_run(run_id: str) -> Optional[dict]:
    with get_conn() as conn:
        row = conn.execute("SELECT * FROM runs WHERE run_id=?", (run_id,)).fetchone()
    return _row_to_dict(row) if row else None


# ── Activity log ───────────────────────────────────────────────────────────────

def log_event(run_id: str, event_type: str, message: str):
    now = datetime.utcnow().isoformat()
    with get_conn() as conn:
        conn.execute(
            "INSERT INTO activity_log (run_id, event_type, message, created_at) VALUES (?,?,?,?)",
            (run_id, event_type, message, now),
        )
        conn.execute(f"""
            DELETE FROM activity_log
            WHERE run_id=? AND id NOT IN (
                SELECT id FROM activity_log WHERE run_id=? ORDER BY id DESC LIMIT {MAX_EVENTS_PER_RUN}
            )
        """, (run_id, run_id))
        conn.commit()


def get_recent_events(run_id: str, limit: int = 50) -> list[dict]:
    with get_conn() as conn:
        rows = conn.execute(
            "SELECT * FROM activity_log WHERE run_id=? ORDER BY id DESC LIMIT ?",
            (run_id, limit),
        ).fetchall()
    return [dict(r) for r in rows]


# ── Internal helpers ───────────────────────────────────────────────────────────

def _row_to_dict(row) -> dict:
    d = dict(row)
    for key in ("versions", "warnings"):
        if d.get(key):
            try:
                d[key] = json.loads(d[key])
            except Exception:
                pass
    return d
