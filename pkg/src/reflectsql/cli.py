"""Command-line entry points: build-context, ask, bench, replay.

Exit codes: 0 success, 1 configuration or I/O error, 2 unsolved (ask) or
diverging replay.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bench import FLAVORS, VES_TIMERS, BenchOptions, load_dataset, run_benchmark
from .critic import CRITIC_MODES, FEEDBACK_MODES
from .errors import CassetteMiss, ReflectSQLError
from .gateway import (
    API_KEY_ENV,
    Cassette,
    Gateway,
    HttpBackend,
    ReplayBackend,
    ScriptedBackend,
)
from .judges import JUDGE_MODES
from .orchestrator import ABLATIONS, DEFAULT_BUDGET, LoopConfig, solve
from .prompts import StagePromptSet
from .proxy import (
    DEFAULT_BUDGET_K,
    build_proxy,
    database_hash,
    load_proxy,
    proxy_cache_path,
    save_proxy,
)
from .refiner import ThetaStore, theta_store_path

EXIT_OK, EXIT_CONFIG, EXIT_UNSOLVED = 0, 1, 2
DEFAULT_PROXY_CACHE = ".reflectsql/proxies"

log = logging.getLogger("reflectsql")


class ConfigError(Exception):
    pass


def _add_loop_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("http", "replay", "scripted"), default="scripted")
    p.add_argument("--model", help="model name for the http backend")
    p.add_argument("--base-url", default=None, help="OpenAI-compatible endpoint (http backend)")
    p.add_argument("--script", help="JSON script for the scripted backend")
    p.add_argument("--cassette", help="cassette to replay from, or to record into for other backends")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="refinement budget T")
    p.add_argument("--feedback", choices=FEEDBACK_MODES, default="granular")
    p.add_argument("--ablation", action="append", choices=ABLATIONS, default=[])
    p.add_argument("--judge", choices=JUDGE_MODES, help="semantic judge (default: model for http, else stub)")
    p.add_argument("--critic", choices=CRITIC_MODES, help="critic (default: model for http, else rules)")
    p.add_argument(
        "--regression-check",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="re-check earlier solved examples after each prompt revision (default: on except for http)",
    )
    p.add_argument("--theta-store", help="directory of per-database prompt sets")
    p.add_argument("--proxy-cache", default=DEFAULT_PROXY_CACHE)
    p.add_argument("--budget-k", type=int, default=DEFAULT_BUDGET_K)
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed for fixture generation only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflectsql", description="Staged text-to-SQL with prompt refinement.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-context", help="build context proxies for databases")
    p.add_argument("--db", action="append", required=True, help="SQLite database file (repeatable)")
    p.add_argument("--budget-k", type=int, default=DEFAULT_BUDGET_K)
    p.add_argument("--proxy-cache", default=DEFAULT_PROXY_CACHE)

    p = sub.add_parser("ask", help="answer one question against one database")
    p.add_argument("--db", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--evidence", default=None)
    p.add_argument("--build-context", action="store_true", help="build the proxy if it is missing")
    _add_loop_flags(p)

    p = sub.add_parser("bench", help="run a benchmark split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--flavor", choices=FLAVORS, default="spider")
    p.add_argument("--jobs", type=int, default=1, help="parallel databases")
    p.add_argument("--ves-timer", choices=VES_TIMERS, default="steps")
    _add_loop_flags(p)

    p = sub.add_parser("replay", help="re-run a benchmark from a recorded cassette")
    p.add_argument("--cassette", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--flavor", choices=FLAVORS, default="spider")
    p.add_argument("--compare", help="report.json to compare against")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--ves-timer", choices=VES_TIMERS, default="steps")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--feedback", choices=FEEDBACK_MODES, default="granular")
    p.add_argument("--ablation", action="append", choices=ABLATIONS, default=[])
    p.add_argument("--judge", choices=JUDGE_MODES)
    p.add_argument("--critic", choices=CRITIC_MODES)
    p.add_argument("--regression-check", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--theta-store")
    p.add_argument("--proxy-cache", default=DEFAULT_PROXY_CACHE)
    p.add_argument("--budget-k", type=int, default=DEFAULT_BUDGET_K)
    p.add_argument("--out", default="runs/replay")
    return parser


# -- config -------------------------------------------------------------------


def make_gateway(args, backend: str | None = None) -> tuple[Gateway, Cassette | None]:
    backend = backend or args.backend
    if backend == "replay":
        if not args.cassette:
            raise ConfigError("the replay backend needs --cassette")
        if not Path(args.cassette).is_file():
            raise ConfigError(f"cassette {args.cassette} not found")
        return Gateway(ReplayBackend(Cassette.load(args.cassette))), None
    recorder = Cassette() if getattr(args, "cassette", None) else None
    if backend == "scripted":
        if not args.script:
            raise ConfigError("the scripted backend needs --script")
        if not Path(args.script).is_file():
            raise ConfigError(f"script {args.script} not found")
        return Gateway(ScriptedBackend.from_file(args.script), recorder), recorder
    if not args.model:
        raise ConfigError("the http backend needs --model")
    key = os.environ.get(API_KEY_ENV)
    if not key:
        raise ConfigError(f"the http backend needs credentials in ${API_KEY_ENV}")
    kwargs = {"base_url": args.base_url} if args.base_url else {}
    return Gateway(HttpBackend(args.model, api_key=key, **kwargs), recorder), recorder


def make_config(args, backend: str) -> LoopConfig:
    regression = args.regression_check
    if regression is None:
        regression = backend != "http"
    if args.budget < 0:
        raise ConfigError("--budget must be non-negative")
    return LoopConfig(
        budget_t=args.budget,
        feedback_mode=args.feedback,
        ablations=frozenset(args.ablation),
        judge_mode=args.judge or ("model" if backend == "http" else "stub"),
        critic_mode=args.critic or ("model" if backend == "http" else "rules"),
        regression_check=regression,
    )


# -- commands -----------------------------------------------------------------


def cmd_build_context(args) -> int:
    failed = 0
    for db in args.db:
        db_path = Path(db)
        db_id = db_path.stem
        cache = proxy_cache_path(args.proxy_cache, db_id)
        try:
            if cache.is_file():
                try:
                    existing = load_proxy(cache)
                    if existing.content_hash == database_hash(db_path, args.budget_k):
                        print(f"{db_id}: skipped (hash match)")
                        continue
                except ReflectSQLError:
                    pass
            proxy = build_proxy(db_path, args.budget_k, db_id=db_id)
            save_proxy(proxy, cache)
            print(f"{db_id}: built {cache}")
        except (ReflectSQLError, OSError) as exc:
            failed += 1
            print(f"{db_id}: failed: {exc}", file=sys.stderr)
    if failed:
        print(f"{failed} database(s) failed", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_ask(args) -> int:
    db_path = Path(args.db)
    if not db_path.is_file():
        raise ConfigError(f"database {db_path} not found")
    db_id = db_path.stem
    cache = proxy_cache_path(args.proxy_cache, db_id)
    if not cache.is_file():
        if not args.build_context:
            raise ConfigError(
                f"no context proxy at {cache}; run 'reflectsql build-context --db {db_path}' or pass --build-context"
            )
        save_proxy(build_proxy(db_path, args.budget_k, db_id=db_id), cache)
    proxy = load_proxy(cache)
    gateway, recorder = make_gateway(args)
    config = make_config(args, args.backend)
    store = ThetaStore.open(theta_store_path(args.theta_store, db_id), db_id) if args.theta_store else None
    theta = store.current if store else StagePromptSet.defaults(db_id)
    outcome = solve(args.question, db_path, proxy, theta, config, gateway, example_id="ask",
                    extra_evidence=args.evidence)
    if store is not None:
        store.replace(outcome.theta)
    trace = outcome.write_trace(Path(args.out) / "ask.jsonl")
    if recorder is not None:
        recorder.save(args.cassette)
    print(outcome.final_sql.text)
    status = "solved" if outcome.solved else "unsolved (budget exhausted)"
    print(f"# {status}; iterations={outcome.iterations_used}; commits={outcome.commits}; trace={trace}",
          file=sys.stderr)
    if outcome.error:
        print(f"# error: {outcome.error}", file=sys.stderr)
    return EXIT_OK if outcome.solved else EXIT_UNSOLVED


def _bench(args, gateway: Gateway, backend: str):
    examples = load_dataset(args.dataset, args.flavor)
    opts = BenchOptions(
        proxy_cache=args.proxy_cache,
        theta_store=args.theta_store,
        out_dir=args.out,
        jobs=args.jobs,
        budget_k=args.budget_k,
        ves_timer=args.ves_timer,
    )
    return run_benchmark(examples, make_config(args, backend), gateway, opts)


def cmd_bench(args) -> int:
    gateway, recorder = make_gateway(args)
    report = _bench(args, gateway, args.backend)
    if recorder is not None:
        recorder.save(args.cassette)
    print(f"EX={report.ex:.4f} VES={report.ves:.2f} avg_iterations={report.avg_iterations:.2f}")
    print(f"report: {Path(args.out) / 'report.json'}")
    return EXIT_OK


def first_divergence(expected: dict, actual: dict) -> str | None:
    """Describe the first per-example difference between two reports, if any."""
    exp_rows = {r["example_id"]: r for r in expected.get("per_example", [])}
    for row in actual.get("per_example", []):
        old = exp_rows.get(row["example_id"])
        if old != row:
            if old is None:
                return f"example {row['example_id']}: not in the compared report"
            keys = sorted(k for k in set(old) | set(row) if old.get(k) != row.get(k))
            detail = "; ".join(f"{k}: {old.get(k)!r} -> {row.get(k)!r}" for k in keys)
            return f"example {row['example_id']}: {detail}"
    if expected != actual:
        keys = sorted(k for k in set(expected) | set(actual) if expected.get(k) != actual.get(k))
        return "report fields differ: " + ", ".join(keys)
    return None


def cmd_replay(args) -> int:
    gateway, _ = make_gateway(args, backend="replay")
    try:
        _bench(args, gateway, "replay")
    except CassetteMiss as exc:
        print(f"replay aborted: cassette miss for fingerprint {exc.fingerprint} (stage {exc.stage_tag})",
              file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) / "report.json"
    print(f"report: {out}")
    if args.compare:
        old_text = Path(args.compare).read_text(encoding="utf-8")
        new_text = out.read_text(encoding="utf-8")
        if old_text == new_text:
            print("identical to compared report")
            return EXIT_OK
        where = first_divergence(json.loads(old_text), json.loads(new_text))
        print(f"DIVERGED: {where or 'formatting differs'}")
        return EXIT_UNSOLVED
    return EXIT_OK


COMMANDS = {"build-context": cmd_build_context, "ask": cmd_ask, "bench": cmd_bench, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ReflectSQLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
