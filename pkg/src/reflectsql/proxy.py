"""Offline context proxy: a compact, reusable stand-in for a SQLite database.

A proxy bundles normalized column descriptors, short table summaries, join
candidates and budgeted value samples. Columns with at most ``budget_k``
distinct values are enumerated in full; everything else is suppressed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import sqlite3
from dataclasses import asdict, dataclass
from decimal import Decimal
from pathlib import Path
from typing import Any

from .errors import (
    CorruptFile,
    IntrospectionFailure,
    UnknownTable,
    UnreadableDatabase,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_BUDGET_K = 20
CORROBORATION_SAMPLE = 100
CORROBORATION_THRESHOLD = 0.9


@dataclass
class ColumnDescriptor:
    table: str
    column: str
    declared_type: str
    nullable: bool
    is_primary_key: bool
    key_likelihood: float
    distinct_count: int | None

    @property
    def ref(self) -> str:
        return f"{self.table}.{self.column}"


@dataclass
class TableSummary:
    table: str
    summary: str
    row_count: int | None


@dataclass
class JoinCandidate:
    from_ref: str
    to_ref: str
    source: str  # "declared_fk" | "sample_corroborated"
    confidence: float


@dataclass
class ValueSample:
    column_ref: str
    values: list[str]
    cardinality_class: str  # "low" | "high"
    distinct_count: int
    enumerated: bool


@dataclass
class ContextProxy:
    db_id: str
    descriptors: list[ColumnDescriptor]
    summaries: list[TableSummary]
    join_candidates: list[JoinCandidate]
    value_samples: list[ValueSample]
    budget_k: int
    content_hash: str
    format_version: int = FORMAT_VERSION

    # -- lookups -----------------------------------------------------------

    def tables(self) -> list[str]:
        seen: dict[str, None] = {}
        for d in self.descriptors:
            seen.setdefault(d.table, None)
        return list(seen)

    def columns(self, table: str) -> list[ColumnDescriptor]:
        table = self.resolve_table(table) or table
        return [d for d in self.descriptors if d.table == table]

    def resolve_table(self, name: str) -> str | None:
        """Case-insensitive table lookup; returns the canonical spelling."""
        wanted = _strip_ident(name).lower()
        for t in self.tables():
            if t.lower() == wanted:
                return t
        return None

    def resolve_column(self, ref: str, tables: list[str] | None = None) -> str | None:
        """Resolve ``table.column`` or a bare column to a canonical ``table.column``.

        A bare column resolves only when exactly one candidate table has it.
        """
        ref = ref.strip()
        if "." in ref:
            t, c = ref.rsplit(".", 1)
            table = self.resolve_table(t)
            if table is None:
                return None
            for d in self.columns(table):
                if d.column.lower() == _strip_ident(c).lower():
                    return d.ref
            return None
        wanted = _strip_ident(ref).lower()
        pool = [self.resolve_table(t) for t in tables] if tables else self.tables()
        hits = [d.ref for d in self.descriptors if d.table in pool and d.column.lower() == wanted]
        return hits[0] if len(hits) == 1 else None

    def descriptor(self, ref: str) -> ColumnDescriptor | None:
        canon = self.resolve_column(ref)
        for d in self.descriptors:
            if d.ref == canon:
                return d
        return None

    def sample(self, ref: str) -> ValueSample | None:
        canon = self.resolve_column(ref)
        for s in self.value_samples:
            if s.column_ref == canon:
                return s
        return None

    def primary_keys(self, table: str) -> list[str]:
        return [d.ref for d in self.columns(table) if d.is_primary_key]

    def to_dict(self) -> dict:
        return {
            "db_id": self.db_id,
            "budget_k": self.budget_k,
            "descriptors": [asdict(d) for d in self.descriptors],
            "summaries": [asdict(s) for s in self.summaries],
            "join_candidates": [asdict(j) for j in self.join_candidates],
            "value_samples": [asdict(v) for v in self.value_samples],
            "content_hash": self.content_hash,
            "format_version": self.format_version,
        }


def _strip_ident(name: str) -> str:
    name = name.strip()
    if len(name) >= 2 and name[0] in "\"`[" and name[-1] in "\"`]":
        return name[1:-1]
    return name


def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def canonical_value(value: Any) -> str:
    """Stored text for strings, plain decimal rendering for numbers."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            return repr(value)
        text = format(Decimal(repr(value)), "f")
        return text
    if isinstance(value, bytes):
        return value.hex()
    return str(value)


def database_hash(db_path: str | os.PathLike, budget_k: int) -> str:
    h = hashlib.sha256()
    with open(db_path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    h.update(f"|k={budget_k}|v={FORMAT_VERSION}".encode())
    return h.hexdigest()


def connect_readonly(db_path: str | os.PathLike) -> sqlite3.Connection:
    path = Path(db_path)
    if not path.is_file():
        raise UnreadableDatabase(f"{db_path}: no such database file")
    uri = path.resolve().as_uri() + "?mode=ro"
    try:
        conn = sqlite3.connect(uri, uri=True, check_same_thread=False)
        conn.execute("SELECT count(*) FROM sqlite_master").fetchone()
    except sqlite3.DatabaseError as exc:
        raise UnreadableDatabase(f"{db_path}: {exc}") from exc
    return conn


def _key_likelihood(column: str, is_pk: bool, is_fk_endpoint: bool) -> float:
    if is_pk:
        return 1.0
    is_id = column.lower().endswith("_id") or column.lower() == "id"
    if is_id and is_fk_endpoint:
        return 0.8
    if is_id:
        return 0.5
    return 0.1


def summarize_table(
    table: str,
    descriptors: list[ColumnDescriptor],
    samples: list[ValueSample] | None = None,
    gateway=None,
    row_count: int | None = None,
) -> TableSummary:
    """One- or two-sentence table summary; template fallback when no model is given."""
    cols = [d for d in descriptors if d.table == table]
    if not cols:
        raise ValueError(f"table {table} has no descriptors")
    if gateway is not None:
        from .gateway import ModelRequest

        lines = [f"- {d.column} {d.declared_type}".rstrip() for d in cols]
        enumerated = [s for s in samples or [] if s.enumerated and s.column_ref.startswith(f"{table}.")]
        for s in enumerated:
            lines.append(f"  values of {s.column_ref}: {', '.join(s.values[:5])}")
        request = ModelRequest(
            stage_tag="summarizer",
            system_text="Summarize the database table in at most two short sentences. Plain text only.",
            user_text=f"Table {table}:\n" + "\n".join(lines),
        )
        text = _first_sentences(gateway.complete(request).text, 2)
        if text:
            return TableSummary(table=table, summary=text, row_count=row_count)
    names = [d.column for d in cols]
    shown = ", ".join(names[:3])
    if len(names) > 3:
        shown += f" and {len(names) - 3} more"
    noun = "column" if len(names) == 1 else "columns"
    return TableSummary(table=table, summary=f"Table {table} with {len(names)} {noun}: {shown}.", row_count=row_count)


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def _first_sentences(text: str, n: int) -> str:
    text = " ".join(text.split())
    parts = [p for p in _SENTENCE_END.split(text) if p]
    return " ".join(parts[:n]).strip()


def build_proxy(
    db_path: str | os.PathLike,
    budget_k: int = DEFAULT_BUDGET_K,
    summarizer=None,
    db_id: str | None = None,
) -> ContextProxy:
    if budget_k < 1:
        raise ValueError("budget_k must be >= 1")
    db_path = Path(db_path)
    db_id = db_id or db_path.stem
    conn = connect_readonly(db_path)
    try:
        return _build(conn, db_path, db_id, budget_k, summarizer)
    except sqlite3.DatabaseError as exc:
        raise IntrospectionFailure(f"{db_path}: {exc}") from exc
    finally:
        conn.close()


def _build(conn, db_path, db_id, budget_k, summarizer) -> ContextProxy:
    tables = [
        r[0]
        for r in conn.execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
        )
    ]
    table_cols: dict[str, list[tuple]] = {}
    for t in tables:
        info = conn.execute(f"PRAGMA table_info({quote_ident(t)})").fetchall()
        if not info:
            raise IntrospectionFailure(f"table {t} reports no columns")
        table_cols[t] = info

    def canon_col(table: str, col: str | None) -> str | None:
        cols = table_cols.get(table)
        if cols is None:
            return None
        if col is None:
            pks = [c for c in cols if c[5]]
            return pks[0][1] if len(pks) == 1 else None
        for c in cols:
            if c[1].lower() == col.lower():
                return c[1]
        return None

    def canon_table(name: str) -> str | None:
        for t in tables:
            if t.lower() == name.lower():
                return t
        return None

    fk_pairs: list[tuple[str, str]] = []
    for t in tables:
        for row in conn.execute(f"PRAGMA foreign_key_list({quote_ident(t)})"):
            # (id, seq, table, from, to, on_update, on_delete, match)
            target = canon_table(row[2])
            src = canon_col(t, row[3])
            dst = canon_col(target, row[4]) if target else None
            if src is None or target is None or dst is None:
                logger.warning("%s: skipping foreign key %s.%s -> %s.%s (endpoint missing)", db_id, t, row[3], row[2], row[4])
                continue
            pair = (f"{t}.{src}", f"{target}.{dst}")
            if pair not in fk_pairs:
                fk_pairs.append(pair)
    fk_endpoints = {ref for pair in fk_pairs for ref in pair}

    descriptors: list[ColumnDescriptor] = []
    samples: list[ValueSample] = []
    row_counts: dict[str, int] = {}
    for t in tables:
        row_counts[t] = conn.execute(f"SELECT COUNT(*) FROM {quote_ident(t)}").fetchone()[0]
        for cid, name, ctype, notnull, _default, pk in table_cols[t]:
            qt, qc = quote_ident(t), quote_ident(name)
            distinct = conn.execute(f"SELECT COUNT(DISTINCT {qc}) FROM {qt}").fetchone()[0]
            descriptors.append(
                ColumnDescriptor(
                    table=t,
                    column=name,
                    declared_type=(ctype or "").upper(),
                    nullable=not (notnull or pk),
                    is_primary_key=bool(pk),
                    key_likelihood=_key_likelihood(name, bool(pk), f"{t}.{name}" in fk_endpoints),
                    distinct_count=distinct,
                )
            )
            if distinct <= budget_k:
                rows = conn.execute(
                    f"SELECT DISTINCT {qc} FROM {qt} WHERE {qc} IS NOT NULL ORDER BY {qc}"
                ).fetchall()
                values = [canonical_value(r[0]) for r in rows]
                samples.append(ValueSample(f"{t}.{name}", values, "low", distinct, True))
            else:
                samples.append(ValueSample(f"{t}.{name}", [], "high", distinct, False))

    joins = [JoinCandidate(a, b, "declared_fk", 1.0) for a, b in fk_pairs]
    if not fk_pairs:
        joins = _corroborated_joins(conn, descriptors)

    summaries = [
        summarize_table(t, descriptors, samples, gateway=summarizer, row_count=row_counts[t]) for t in tables
    ]
    return ContextProxy(
        db_id=db_id,
        descriptors=descriptors,
        summaries=summaries,
        join_candidates=joins,
        value_samples=samples,
        budget_k=budget_k,
        content_hash=database_hash(db_path, budget_k),
    )


def _corroborated_joins(conn, descriptors: list[ColumnDescriptor]) -> list[JoinCandidate]:
    """Infer joins by value containment when the schema declares no foreign keys.

    Targets are key-like columns (primary keys or ``*_id``); a source column must
    share the target's name or be ``<table>_id`` for the target table.
    """
    out: list[JoinCandidate] = []
    targets = [d for d in descriptors if d.is_primary_key or d.column.lower().endswith("_id")]
    for tgt in targets:
        tgt_values = None
        for src in descriptors:
            if src.table == tgt.table:
                continue
            name_ok = src.column.lower() == tgt.column.lower() or (
                tgt.is_primary_key and src.column.lower() == f"{tgt.table.lower()}_{tgt.column.lower()}"
            )
            if not name_ok or (src.is_primary_key and tgt.is_primary_key and not tgt.column.lower().endswith("_id")):
                continue
            sample = [
                r[0]
                for r in conn.execute(
                    f"SELECT {quote_ident(src.column)} FROM {quote_ident(src.table)} "
                    f"WHERE {quote_ident(src.column)} IS NOT NULL ORDER BY rowid LIMIT {CORROBORATION_SAMPLE}"
                )
            ]
            if not sample:
                continue
            if tgt_values is None:
                tgt_values = {
                    r[0]
                    for r in conn.execute(
                        f"SELECT DISTINCT {quote_ident(tgt.column)} FROM {quote_ident(tgt.table)}"
                    )
                }
            contained = sum(1 for v in sample if v in tgt_values) / len(sample)
            if contained >= CORROBORATION_THRESHOLD:
                out.append(JoinCandidate(src.ref, tgt.ref, "sample_corroborated", round(contained, 6)))
    return out


# -- rendering -------------------------------------------------------------


def render_schema(proxy: ContextProxy, tables: list[str] | None = None) -> str:
    chosen = _chosen_tables(proxy, tables)
    summaries = {s.table: s for s in proxy.summaries}
    lines = []
    for t in chosen:
        s = summaries.get(t)
        lines.append(f"Table {t}" + (f": {s.summary}" if s else ""))
        for d in proxy.columns(t):
            tags = []
            if d.is_primary_key:
                tags.append("primary key")
            if not d.nullable and not d.is_primary_key:
                tags.append("not null")
            suffix = f" ({', '.join(tags)})" if tags else ""
            lines.append(f"  - {d.column} {d.declared_type or 'ANY'}{suffix}")
    chosen_set = set(chosen)
    fks = [
        j
        for j in proxy.join_candidates
        if j.from_ref.split(".", 1)[0] in chosen_set and j.to_ref.split(".", 1)[0] in chosen_set
    ]
    lines.append("Foreign keys:")
    if fks:
        for j in fks:
            note = "" if j.source == "declared_fk" else f" (inferred, confidence {j.confidence:g})"
            lines.append(f"  - {j.from_ref} -> {j.to_ref}{note}")
    else:
        lines.append("  (none)")
    return "\n".join(lines)


def render_values(proxy: ContextProxy, tables: list[str] | None = None) -> str:
    chosen = set(_chosen_tables(proxy, tables))
    lines = []
    for s in proxy.value_samples:
        if s.enumerated and s.column_ref.split(".", 1)[0] in chosen and s.values:
            lines.append(f"  - {s.column_ref}: " + ", ".join(_quote_value(v) for v in s.values))
    return "\n".join(lines) if lines else "  (none)"


def render_context(proxy: ContextProxy, selection=None) -> str:
    """Schema block plus value-instance block, optionally restricted to a selection."""
    tables = list(selection.tables) if selection is not None else None
    return render_schema(proxy, tables) + "\nValue instances:\n" + render_values(proxy, tables)


def _chosen_tables(proxy: ContextProxy, tables: list[str] | None) -> list[str]:
    if tables is None:
        return proxy.tables()
    out = []
    for t in tables:
        canon = proxy.resolve_table(t)
        if canon is None:
            raise UnknownTable(f"table {t!r} is not in database {proxy.db_id}")
        if canon not in out:
            out.append(canon)
    return out


def _quote_value(v: str) -> str:
    return "'" + v.replace("'", "''") + "'"


# -- persistence -------------------------------------------------------------


def save_proxy(proxy: ContextProxy, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(proxy.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def load_proxy(path: str | os.PathLike) -> ContextProxy:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CorruptFile(f"{path}: expected a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        return ContextProxy(
            db_id=doc["db_id"],
            descriptors=[ColumnDescriptor(**d) for d in doc["descriptors"]],
            summaries=[TableSummary(**s) for s in doc["summaries"]],
            join_candidates=[JoinCandidate(**j) for j in doc["join_candidates"]],
            value_samples=[ValueSample(**v) for v in doc["value_samples"]],
            budget_k=doc["budget_k"],
            content_hash=doc["content_hash"],
            format_version=doc["format_version"],
        )
    except (KeyError, TypeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc


def proxy_cache_path(cache_dir: str | os.PathLike, db_id: str) -> Path:
    return Path(cache_dir) / f"{db_id}.proxy.json"
