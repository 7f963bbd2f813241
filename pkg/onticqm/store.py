from __future__ import annotations

import json
from pathlib import Path
import time
from typing import Any

import aiosqlite

from .report import RunReport


def now_ts() -> int:
    return int(time.time())


class RunStore:
    """History of scenario runs in a local SQLite file."""

    def __init__(self, path: str):
        self.path = path
        self._conn: aiosqlite.Connection | None = None

    @property
    def conn(self) -> aiosqlite.Connection:
        if self._conn is None:
            raise RuntimeError("Run store is not connected.")
        return self._conn

    async def connect(self) -> None:
        Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._conn = await aiosqlite.connect(self.path)
        self._conn.row_factory = aiosqlite.Row
        await self._conn.execute("PRAGMA foreign_keys = ON;")
        await self._conn.commit()

    async def close(self) -> None:
        if self._conn is not None:
            await self._conn.close()
            self._conn = None

    async def init_schema(self) -> None:
        await self.conn.executescript(
            """
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                scenario TEXT NOT NULL,
                seed INTEGER NOT NULL,
                samples INTEGER NOT NULL,
                started_at INTEGER NOT NULL,
                finished_at INTEGER NOT NULL,
                exit_code INTEGER NOT NULL,
                report_path TEXT,
                diagnostic TEXT
            );

            CREATE TABLE IF NOT EXISTS task_results (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL REFERENCES runs(id) ON DELETE CASCADE,
                task TEXT NOT NULL,
                kind TEXT NOT NULL,
                status TEXT NOT NULL CHECK(status IN ('passed', 'failed', 'done')),
                payload TEXT NOT NULL
            );

            CREATE INDEX IF NOT EXISTS idx_task_results_run ON task_results(run_id);
            """
        )
        await self.conn.commit()

    async def record_run(
        self,
        *,
        scenario: str,
        seed: int,
        samples: int,
        started_at: int,
        exit_code: int,
        report: RunReport | None = None,
        report_path: str | None = None,
        diagnostic: str | None = None,
    ) -> int:
        cursor = await self.conn.execute(
            """
            INSERT INTO runs (scenario, seed, samples, started_at, finished_at, exit_code, report_path, diagnostic)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (scenario, seed, samples, started_at, now_ts(), exit_code, report_path, diagnostic),
        )
        run_id = int(cursor.lastrowid)
        if report is not None:
            await self.conn.executemany(
                "INSERT INTO task_results (run_id, task, kind, status, payload) VALUES (?, ?, ?, ?, ?)",
                [
                    (run_id, r.name, r.kind, r.status, json.dumps(r.to_dict(), ensure_ascii=False))
                    for r in report.results
                ],
            )
        await self.conn.commit()
        return run_id

    async def recent_runs(self, limit: int = 10) -> list[dict[str, Any]]:
        cursor = await self.conn.execute(
            """
            SELECT r.id, r.scenario, r.seed, r.samples, r.started_at, r.finished_at,
                   r.exit_code, r.report_path, r.diagnostic,
                   COUNT(t.id) AS tasks_total,
                   SUM(CASE WHEN t.status = 'failed' THEN 1 ELSE 0 END) AS tasks_failed
            FROM runs r
            LEFT JOIN task_results t ON t.run_id = r.id
            GROUP BY r.id
            ORDER BY r.id DESC
            LIMIT ?
            """,
            (limit,),
        )
        rows = await cursor.fetchall()
        return [dict(row) for row in rows]

    async def task_results(self, run_id: int) -> list[dict[str, Any]]:
        cursor = await self.conn.execute(
            "SELECT task, kind, status, payload FROM task_results WHERE run_id = ? ORDER BY id",
            (run_id,),
        )
        rows = await cursor.fetchall()
        return [
            {"task": row["task"], "kind": row["kind"], "status": row["status"], "payload": json.loads(row["payload"])}
            for row in rows
        ]
