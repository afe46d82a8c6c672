import os
import json
import time
import sqlite3
import logging
import threading
from typing import Any, Dict, Iterable, List, Optional, Tuple

logger = logging.getLogger(__name__)

PENDING = 'pending'
RUNNING = 'running'
DONE = 'done'
FAILED = 'failed'
STATUSES = (PENDING, RUNNING, DONE, FAILED)

LEDGER_FILENAME = 'ledger.sqlite3'


def ledger_path(out_dir: str) -> str:
    """GRIT_LEDGER_PATH if set, else a file inside the run's output dir."""
    return os.environ.get('GRIT_LEDGER_PATH') or os.path.join(out_dir, LEDGER_FILENAME)


class RunLedger:
    """Status of every (arm, seed) cell of a run, kept in a SQLite file (WAL
    mode) so worker processes and the parent see the same table. Falls back
    to a private in-memory dict if the file can't be opened; the parent
    still records outcomes then, workers' updates just stay local."""

    def __init__(self, path: str, plan: str):
        self.path = path
        self.plan = plan
        self._lock = threading.Lock()
        self._memory: Dict[Tuple[str, int], Dict[str, Any]] = {}
        self._sqlite_ok = self._init_sqlite()

    def _init_sqlite(self) -> bool:
        try:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            conn = sqlite3.connect(self.path, timeout=5)
            try:
                conn.execute("PRAGMA journal_mode=WAL")
                conn.execute("""
                    CREATE TABLE IF NOT EXISTS cells (
                        plan TEXT NOT NULL,
                        arm TEXT NOT NULL,
                        seed INTEGER NOT NULL,
                        status TEXT NOT NULL,
                        attempts INTEGER NOT NULL DEFAULT 0,
                        config_hash TEXT,
                        summary_hash TEXT,
                        error TEXT,
                        updated_at REAL NOT NULL,
                        PRIMARY KEY (plan, arm, seed)
                    )
                """)
                conn.commit()
            finally:
                conn.close()
            return True
        except (sqlite3.Error, OSError) as e:
            logger.warning(f"SQLite run ledger unavailable ({e}) - falling back to in-memory ledger "
                           "for this process (not shared with workers)")
            return False

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.path, timeout=5)

    @property
    def shared(self) -> bool:
        return self._sqlite_ok

    def register(self, cells: Iterable[Tuple[str, int, str]]) -> None:
        """Reset the given (arm, seed, config_hash) cells to pending."""
        now = time.time()
        cells = list(cells)
        if not self._sqlite_ok:
            with self._lock:
                for arm, seed, chash in cells:
                    self._memory[(arm, seed)] = {'status': PENDING, 'attempts': 0, 'config_hash': chash,
                                                 'summary_hash': None, 'error': None, 'updated_at': now}
            return
        try:
            conn = self._connect()
            try:
                conn.executemany(
                    """
                    INSERT INTO cells (plan, arm, seed, status, attempts, config_hash, summary_hash, error, updated_at)
                    VALUES (?, ?, ?, ?, 0, ?, NULL, NULL, ?)
                    ON CONFLICT(plan, arm, seed) DO UPDATE SET
                        status = excluded.status,
                        config_hash = excluded.config_hash,
                        summary_hash = NULL,
                        error = NULL,
                        updated_at = excluded.updated_at
                    """,
                    [(self.plan, arm, seed, PENDING, chash, now) for arm, seed, chash in cells]
                )
                conn.commit()
            finally:
                conn.close()
        except sqlite3.Error as e:
            logger.warning(f"SQLite ledger register failed ({e})")

    def _transition(self, arm: str, seed: int, status: str, summary_hash: Optional[str] = None,
                    error: Optional[str] = None) -> None:
        now = time.time()
        bump = 1 if status == RUNNING else 0
        if not self._sqlite_ok:
            with self._lock:
                entry = self._memory.setdefault((arm, seed), {'status': PENDING, 'attempts': 0, 'config_hash': None,
                                                              'summary_hash': None, 'error': None, 'updated_at': now})
                entry.update(status=status, attempts=entry['attempts'] + bump, summary_hash=summary_hash,
                             error=error, updated_at=now)
            return
        try:
            conn = self._connect()
            try:
                # IMMEDIATE takes the write lock before the read, so a worker and
                # the parent updating one cell can't interleave.
                conn.execute("BEGIN IMMEDIATE")
                row = conn.execute("SELECT attempts FROM cells WHERE plan = ? AND arm = ? AND seed = ?",
                                   (self.plan, arm, seed)).fetchone()
                if row is None:
                    conn.execute(
                        "INSERT INTO cells (plan, arm, seed, status, attempts, summary_hash, error, updated_at) "
                        "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                        (self.plan, arm, seed, status, bump, summary_hash, error, now))
                else:
                    conn.execute(
                        "UPDATE cells SET status = ?, attempts = ?, summary_hash = ?, error = ?, updated_at = ? "
                        "WHERE plan = ? AND arm = ? AND seed = ?",
                        (status, row[0] + bump, summary_hash, error, now, self.plan, arm, seed))
                conn.commit()
            finally:
                conn.close()
        except sqlite3.Error as e:
            logger.warning(f"SQLite ledger update failed ({e}), cell {arm}/seed-{seed} not marked {status}")

    def mark_running(self, arm: str, seed: int) -> None:
        self._transition(arm, seed, RUNNING)

    def mark_done(self, arm: str, seed: int, summary_hash: str) -> None:
        self._transition(arm, seed, DONE, summary_hash=summary_hash)

    def mark_failed(self, arm: str, seed: int, error: str) -> None:
        self._transition(arm, seed, FAILED, error=error)

    def cells(self) -> List[Dict[str, Any]]:
        """Every cell of this plan, sorted by (arm, seed)."""
        if not self._sqlite_ok:
            with self._lock:
                rows = [dict(arm=arm, seed=seed, **entry) for (arm, seed), entry in self._memory.items()]
            return sorted(rows, key=lambda r: (r['arm'], r['seed']))
        try:
            conn = self._connect()
            try:
                cursor = conn.execute(
                    "SELECT arm, seed, status, attempts, config_hash, summary_hash, error, updated_at "
                    "FROM cells WHERE plan = ? ORDER BY arm, seed", (self.plan,))
                names = [c[0] for c in cursor.description]
                return [dict(zip(names, row)) for row in cursor.fetchall()]
            finally:
                conn.close()
        except sqlite3.Error as e:
            logger.warning(f"SQLite ledger read failed ({e})")
            return []

    def incomplete(self) -> List[Dict[str, Any]]:
        return [c for c in self.cells() if c['status'] != DONE]

    def export_manifest(self, path: str, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """Write manifest.json via a temp file and rename, so readers only
        ever see a complete document. Timestamps stay in the ledger."""
        cells = [{k: c[k] for k in ('arm', 'seed', 'status', 'config_hash', 'summary_hash', 'error')}
                 for c in self.cells()]
        manifest = {'plan': self.plan, **(extra or {}), 'complete': all(c['status'] == DONE for c in cells),
                    'cells': cells}
        tmp = f"{path}.tmp"
        with open(tmp, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write('\n')
        os.replace(tmp, path)
        return manifest
