"""Dataset loading, EX / VES scoring and benchmark runs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import sqlglot
from sqlglot import exp

from .errors import MalformedRecord, MeasurementError, MissingFile, ProxyError
from .gateway import Gateway
from .orchestrator import LoopConfig, Outcome, SetResult, solve_set
from .prompts import StagePromptSet
from .proxy import (
    DEFAULT_BUDGET_K,
    build_proxy,
    database_hash,
    load_proxy,
    proxy_cache_path,
    save_proxy,
)
from .refiner import theta_store_path
from .sqlexec import DEFAULT_TIMEOUT_S, execute

log = logging.getLogger(__name__)

FLAVORS = ("spider", "bird")
DB_DIRS = {"spider": "database", "bird": "dev_databases"}
VES_TIMERS = ("steps", "wall")
VES_REPEATS = 5
NUMERIC_PLACES = 6


@dataclass
class BenchExample:
    example_id: str
    db_id: str
    question: str
    gold_sql: str
    evidence: str | None = None
    db_path: str | None = None

    def identity(self) -> dict:
        return {
            "example_id": self.example_id,
            "db_id": self.db_id,
            "question": self.question,
            "gold_sql": self.gold_sql,
            "evidence": self.evidence,
        }


def _db_readable(path: Path) -> bool:
    if not path.is_file():
        return False
    try:
        res = execute(path, "SELECT count(*) FROM sqlite_master")
    except Exception:
        return False
    return res.ok


def load_dataset(path: str | os.PathLike, flavor: str) -> list[BenchExample]:
    """Read a Spider- or BIRD-style dev split.

    ``path`` is the split directory (containing ``dev.json``) or the JSON file
    itself. Examples whose database cannot be opened are skipped with a warning.
    """
    if flavor not in FLAVORS:
        raise ValueError(f"unknown dataset flavor {flavor!r}")
    path = Path(path)
    json_path = path if path.is_file() else path / "dev.json"
    root = json_path.parent
    if not json_path.is_file():
        raise MissingFile(f"{json_path}: not found")
    try:
        records = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{json_path}: {exc}") from exc
    if not isinstance(records, list):
        raise MalformedRecord(f"{json_path}: expected a JSON array of records")
    gold_key = "query" if flavor == "spider" else "SQL"
    out: list[BenchExample] = []
    readable: dict[str, bool] = {}
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise MalformedRecord(f"{json_path}: record {i} is not an object")
        missing = [k for k in ("db_id", "question", gold_key) if not isinstance(rec.get(k), str)]
        if missing:
            raise MalformedRecord(f"{json_path}: record {i} lacks {', '.join(missing)}")
        if flavor == "bird":
            ex_id = str(rec.get("question_id", i))
            evidence = rec.get("evidence") or None
        else:
            ex_id = str(rec.get("example_id", i))
            evidence = None
        db_id = rec["db_id"]
        db_path = root / DB_DIRS[flavor] / db_id / f"{db_id}.sqlite"
        if db_id not in readable:
            readable[db_id] = _db_readable(db_path)
            if not readable[db_id]:
                log.warning("skipping database %s: %s is not readable", db_id, db_path)
        if not readable[db_id]:
            continue
        out.append(BenchExample(ex_id, db_id, rec["question"], rec[gold_key], evidence, str(db_path)))
    return out


def dataset_digest(examples: list[BenchExample]) -> str:
    blob = json.dumps([e.identity() for e in examples], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- execution accuracy -------------------------------------------------------


def has_top_level_order(sql: str) -> bool:
    try:
        tree = sqlglot.parse_one(sql, read="sqlite")
    except sqlglot.errors.SqlglotError:
        return "order by" in " ".join(sql.lower().split())
    while isinstance(tree, exp.Subquery):
        tree = tree.this
    return tree is not None and tree.args.get("order") is not None


def normalize_cell(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return repr(value)
        r = round(value, NUMERIC_PLACES)
        if r.is_integer() and abs(r) < 2**53:
            return int(r)
        return r
    return value


def normalize_row(row) -> tuple:
    return tuple(normalize_cell(v) for v in row)


def results_match(pred_rows, gold_rows, ordered: bool) -> bool:
    pred = [normalize_row(r) for r in pred_rows]
    gold = [normalize_row(r) for r in gold_rows]
    if ordered:
        return pred == gold
    return Counter(pred) == Counter(gold)


def execution_accuracy(
    pred_sql: str, gold_sql: str, db_path: str | os.PathLike, timeout_s: float = DEFAULT_TIMEOUT_S
) -> bool:
    gold = execute(db_path, gold_sql, timeout_s=timeout_s)
    if not gold.ok:
        raise MalformedRecord(f"gold query failed: {gold.error}")
    pred = execute(db_path, pred_sql, timeout_s=timeout_s)
    if not pred.ok:
        return False
    return results_match(pred.rows, gold.rows, has_top_level_order(gold_sql))


# -- valid efficiency score ---------------------------------------------------


def ves(results) -> float:
    """100 * mean of match * sqrt(gold_runtime / pred_runtime)."""
    results = list(results)
    if not results:
        return 0.0
    total = 0.0
    for match, pred_rt, gold_rt in results:
        if pred_rt <= 0 or gold_rt <= 0:
            raise MeasurementError(f"runtimes must be positive, got pred={pred_rt} gold={gold_rt}")
        if match:
            total += math.sqrt(gold_rt / pred_rt)
    return 100.0 * total / len(results)


def measure_runtime(
    sql: str, db_path: str | os.PathLike, timer: str = "steps", repeats: int = VES_REPEATS
) -> float:
    """Cost of one execution: SQLite VM steps (deterministic) or median wall seconds."""
    if timer == "steps":
        res = execute(db_path, sql, step_granularity=1)
        if not res.ok:
            raise MeasurementError(f"query failed during measurement: {res.error}")
        return float(max(res.vm_steps, 1))
    if timer != "wall":
        raise ValueError(f"unknown timer {timer!r}")
    times = []
    execute(db_path, sql)  # warm the page cache
    for _ in range(repeats):
        start = time.perf_counter()
        res = execute(db_path, sql)
        times.append(time.perf_counter() - start)
        if not res.ok:
            raise MeasurementError(f"query failed during measurement: {res.error}")
    value = statistics.median(times)
    if value <= 0:
        raise MeasurementError("measured a non-positive runtime")
    return value


# -- benchmark runs -----------------------------------------------------------


@dataclass
class BenchReport:
    ex_at_t: dict[int, float]
    ves: float
    avg_iterations: float
    per_example: list[dict]
    config: dict
    dataset_digest: str
    commits: int = 0
    regressions: list[dict] = field(default_factory=list)
    pass_counts: dict[str, list[int]] = field(default_factory=dict)
    gold_errors: list[dict] = field(default_factory=list)

    @property
    def ex(self) -> float:
        return self.ex_at_t[max(self.ex_at_t)] if self.ex_at_t else 0.0

    def to_dict(self) -> dict:
        return {
            "ex_at_t": {str(t): v for t, v in sorted(self.ex_at_t.items())},
            "ex": self.ex,
            "ves": self.ves,
            "avg_iterations": self.avg_iterations,
            "per_example": self.per_example,
            "config": self.config,
            "dataset_digest": self.dataset_digest,
            "commits": self.commits,
            "regressions": self.regressions,
            "pass_counts": self.pass_counts,
            "gold_errors": self.gold_errors,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "ex"])
        for t, v in sorted(self.ex_at_t.items()):
            w.writerow([t, f"{v:.6f}"])
        return buf.getvalue()

    def write(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        (out / "curves.csv").write_text(self.curves_csv(), encoding="utf-8")
        return out / "report.json"


@dataclass
class BenchOptions:
    proxy_cache: str | None = None
    theta_store: str | None = None
    out_dir: str | None = None
    jobs: int = 1
    budget_k: int = DEFAULT_BUDGET_K
    ves_timer: str = "steps"


def _proxy_for(db_id: str, db_path: str, opts: BenchOptions):
    if opts.proxy_cache:
        cache = proxy_cache_path(opts.proxy_cache, db_id)
        if cache.is_file():
            try:
                proxy = load_proxy(cache)
                if proxy.content_hash == database_hash(db_path, opts.budget_k):
                    return proxy
            except ProxyError:
                log.warning("rebuilding unusable proxy cache %s", cache)
        proxy = build_proxy(db_path, opts.budget_k, db_id=db_id)
        save_proxy(proxy, cache)
        return proxy
    return build_proxy(db_path, opts.budget_k, db_id=db_id)


def _run_db(db_id: str, examples: list[BenchExample], config: LoopConfig, gateway: Gateway, opts: BenchOptions):
    db_path = examples[0].db_path
    proxy = _proxy_for(db_id, db_path, opts)
    store = theta_store_path(opts.theta_store, db_id) if opts.theta_store else None
    theta = StagePromptSet.load(store) if store and store.is_file() else StagePromptSet.defaults(db_id)
    result = solve_set(examples, db_path, proxy, theta, config, gateway)
    if store is not None:
        result.theta.save(store)
    return result


def _ex_for(candidate_text: str, ex: BenchExample, cache: dict) -> bool:
    if candidate_text not in cache:
        cache[candidate_text] = bool(candidate_text.strip()) and execution_accuracy(
            candidate_text, ex.gold_sql, ex.db_path
        )
    return cache[candidate_text]


def run_benchmark(
    examples: list[BenchExample],
    config: LoopConfig,
    gateway: Gateway,
    opts: BenchOptions | None = None,
) -> BenchReport:
    """Solve every example and score it against gold.

    EX at iteration t uses the candidate standing at t; after an early stop the
    last candidate carries forward. Databases run in parallel up to
    ``opts.jobs``; examples within a database run in order.
    """
    opts = opts or BenchOptions()
    groups: dict[str, list[BenchExample]] = {}
    for ex in examples:
        groups.setdefault(ex.db_id, []).append(ex)

    results: dict[str, SetResult] = {}
    if opts.jobs > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=opts.jobs) as pool:
            futures = {db: pool.submit(_run_db, db, exs, config, gateway, opts) for db, exs in groups.items()}
            for db, fut in futures.items():
                results[db] = fut.result()
    else:
        for db, exs in groups.items():
            results[db] = _run_db(db, exs, config, gateway, opts)

    outcomes: dict[str, Outcome] = {}
    for res in results.values():
        for o in res.outcomes:
            outcomes[o.example_id] = o

    horizon = config.effective_budget
    hits = {t: 0 for t in range(horizon + 1)}
    per_example, ves_rows, gold_errors = [], [], []
    iterations = []
    for ex in examples:
        o = outcomes[ex.example_id]
        iterations.append(o.iterations_used)
        cache: dict[str, bool] = {}
        cands = [r.candidate.text for r in o.trace]
        try:
            for t in range(horizon + 1):
                text = cands[min(t, len(cands) - 1)] if cands else ""
                hits[t] += _ex_for(text, ex, cache)
            match = _ex_for(o.final_sql.text, ex, cache)
        except MalformedRecord as exc:
            gold_errors.append({"example_id": ex.example_id, "error": str(exc)})
            match = False
        if match:
            ves_rows.append(
                (True, measure_runtime(o.final_sql.text, ex.db_path, opts.ves_timer),
                 measure_runtime(ex.gold_sql, ex.db_path, opts.ves_timer))
            )
        else:
            ves_rows.append((False, 1.0, 1.0))
        per_example.append(
            {
                "example_id": ex.example_id,
                "db_id": ex.db_id,
                "solved": o.solved,
                "iterations": o.iterations_used,
                "ex_match": match,
                "final_sql": o.final_sql.text,
                "commits": o.commits,
                "error": o.error,
            }
        )
        if opts.out_dir:
            o.write_trace(Path(opts.out_dir) / "traces" / f"{_safe(ex.example_id)}.jsonl")

    n = len(examples)
    report = BenchReport(
        ex_at_t={t: (hits[t] / n if n else 0.0) for t in hits},
        ves=ves(ves_rows),
        avg_iterations=(sum(iterations) / n if n else 0.0),
        per_example=per_example,
        config=dict(config.echo(), ves_timer=opts.ves_timer, budget_k=opts.budget_k),
        dataset_digest=dataset_digest(examples),
        commits=sum(r.commits for r in results.values()),
        regressions=[g.to_dict() for db in sorted(results) for g in results[db].regressions],
        pass_counts={db: results[db].pass_counts for db in sorted(results)},
        gold_errors=gold_errors,
    )
    if opts.out_dir:
        report.write(opts.out_dir)
    return report


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
