"""Read-only, time-bounded SQLite execution."""

from __future__ import annotations

import os
import sqlite3
import time
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_TIMEOUT_S = 5.0
_STEP_GRANULARITY = 100

_PARSE_ERROR_MARKERS = ("syntax error", "incomplete input", "unrecognized token", "near \"")


@dataclass
class ExecResult:
    ok: bool
    rows: list[tuple] = field(default_factory=list)
    columns: list[str] = field(default_factory=list)
    error: str | None = None
    parse_error: bool = False
    timed_out: bool = False
    elapsed_ms: int = 0
    # SQLite virtual-machine instructions executed, in units of the step granularity.
    vm_steps: int = 0


def open_readonly(db_path: str | os.PathLike) -> sqlite3.Connection:
    uri = Path(db_path).resolve().as_uri() + "?mode=ro"
    conn = sqlite3.connect(uri, uri=True, check_same_thread=False)
    conn.execute("PRAGMA query_only = 1")
    return conn


def is_parse_error(message: str) -> bool:
    low = message.lower()
    return any(m in low for m in _PARSE_ERROR_MARKERS)


def execute(
    db_path: str | os.PathLike,
    sql: str,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    max_rows: int | None = None,
    conn: sqlite3.Connection | None = None,
    step_granularity: int = _STEP_GRANULARITY,
) -> ExecResult:
    own = conn is None
    try:
        conn = conn or open_readonly(db_path)
    except sqlite3.Error as exc:
        return ExecResult(ok=False, error=f"cannot open database: {exc}")
    steps = 0
    deadline = time.monotonic() + timeout_s

    def progress():
        nonlocal steps
        steps += 1
        return 1 if time.monotonic() > deadline else 0

    conn.set_progress_handler(progress, step_granularity)
    start = time.perf_counter()
    try:
        cur = conn.execute(sql.strip().rstrip(";").strip() or sql)
        rows = cur.fetchall() if max_rows is None else cur.fetchmany(max_rows)
        cols = [d[0] for d in cur.description] if cur.description else []
        return ExecResult(
            ok=True,
            rows=rows,
            columns=cols,
            elapsed_ms=int((time.perf_counter() - start) * 1000),
            vm_steps=steps,
        )
    except (sqlite3.Error, sqlite3.Warning, ValueError) as exc:
        msg = str(exc)
        timed_out = "interrupted" in msg.lower() and time.monotonic() > deadline
        return ExecResult(
            ok=False,
            error=f"query exceeded {timeout_s:g}s timeout" if timed_out else msg,
            parse_error=is_parse_error(msg),
            timed_out=timed_out,
            elapsed_ms=int((time.perf_counter() - start) * 1000),
            vm_steps=steps,
        )
    finally:
        conn.set_progress_handler(None, 0)
        if own:
            conn.close()
