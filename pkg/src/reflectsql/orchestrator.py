"""The compose / evaluate / critique / refine / restart control loop."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .critic import FEEDBACK_MODES, Critique, critique, localize
from .errors import CassetteMiss, ContractViolation, GatewayError, StageError
from .gateway import Gateway
from .judges import JUDGE_MODES, EvalReport, evaluate
from .pipeline import PipelineState, SqlCandidate, compose, rerun_from
from .prompts import StagePromptSet
from .proxy import ContextProxy
from .refiner import PROMPT_FOR, RESTART_FOR, PromptRevision, commit, reflect
from .sqlexec import DEFAULT_TIMEOUT_S

log = logging.getLogger(__name__)

ABLATIONS = ("no-critic", "no-semantic-checker", "single-shot")
DEFAULT_BUDGET = 3


@dataclass(frozen=True)
class LoopConfig:
    budget_t: int = DEFAULT_BUDGET
    feedback_mode: str = "granular"
    ablations: frozenset = frozenset()
    judge_mode: str = "stub"
    critic_mode: str = "rules"
    regression_check: bool = False
    timeout_s: float = DEFAULT_TIMEOUT_S

    def __post_init__(self):
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        if self.budget_t < 0:
            raise ValueError("budget_t must be non-negative")
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ValueError(f"unknown feedback mode {self.feedback_mode!r}")
        unknown = self.ablations - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations: {sorted(unknown)}")
        if self.judge_mode not in JUDGE_MODES:
            raise ValueError(f"unknown judge mode {self.judge_mode!r}")

    @property
    def effective_budget(self) -> int:
        return 0 if "single-shot" in self.ablations else self.budget_t

    @property
    def semantic_enabled(self) -> bool:
        # Without a critic the loop stops on syntax alone.
        return not ({"no-semantic-checker", "no-critic"} & self.ablations)

    def echo(self) -> dict:
        return {
            "budget_t": self.budget_t,
            "feedback_mode": self.feedback_mode,
            "ablations": sorted(self.ablations),
            "judge_mode": self.judge_mode,
            "critic_mode": self.critic_mode,
            "regression_check": self.regression_check,
        }


@dataclass
class IterationRecord:
    iteration: int
    candidate: SqlCandidate
    report: EvalReport
    theta_versions: dict[str, int]
    critique: Critique | None = None
    refined_stage: str | None = None
    restart_stage: str | None = None
    revision: PromptRevision | None = None
    stage_outputs: dict | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "candidate": self.candidate.to_dict(),
            "report": self.report.to_dict(),
            "critique": self.critique.to_dict() if self.critique else None,
            "refined_stage": self.refined_stage,
            "restart_stage": self.restart_stage,
            "revision": self.revision.to_dict() if self.revision else None,
            "theta_versions": dict(self.theta_versions),
            "stage_outputs": self.stage_outputs,
            "error": self.error,
        }


@dataclass
class Outcome:
    example_id: str | None
    final_sql: SqlCandidate
    solved: bool
    iterations_used: int
    trace: list[IterationRecord]
    theta: StagePromptSet
    commits: int = 0
    error: str | None = None

    def summary(self) -> dict:
        return {
            "example_id": self.example_id,
            "final_sql": self.final_sql.text,
            "solved": self.solved,
            "iterations_used": self.iterations_used,
            "commits": self.commits,
            "error": self.error,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) for r in self.trace]
        lines.append(json.dumps({"outcome": self.summary()}, sort_keys=True, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    def write_trace(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


def _stage_outputs(state: PipelineState) -> dict:
    d = state.to_dict()
    return {k: d[k] for k in ("stage1", "stage2", "plan", "events")}


def _failure(example_id, theta, trace, last: SqlCandidate | None, iterations: int, commits: int, exc) -> Outcome:
    msg = f"{type(exc).__name__}: {exc}"
    if trace:
        trace[-1].error = msg
    final = last if last is not None else SqlCandidate("", terminated=False)
    return Outcome(example_id, final, False, iterations, trace, theta, commits, msg)


def solve(
    question: str,
    db_path: str | os.PathLike,
    proxy: ContextProxy,
    theta: StagePromptSet,
    config: LoopConfig,
    gateway: Gateway,
    *,
    example_id: str | None = None,
    extra_evidence: str | None = None,
) -> Outcome:
    """Answer one question, refining stage prompts on failure.

    The returned outcome carries the (possibly revised) prompt set; ``theta``
    itself is never modified. Replay cassette misses propagate; every other
    failure ends the loop with an unsolved outcome.
    """
    budget = config.effective_budget
    trace: list[IterationRecord] = []
    commits = 0
    try:
        state = compose(question, proxy, theta, gateway, example_id=example_id, extra_evidence=extra_evidence)
    except CassetteMiss:
        raise
    except (StageError, GatewayError, ContractViolation) as exc:
        return _failure(example_id, theta, trace, None, 0, 0, exc)

    t = 0
    while True:
        candidate = SqlCandidate(state.sql.text, state.sql.terminated, t)
        report = evaluate(
            candidate,
            db_path,
            question,
            state.plan,
            proxy,
            gateway,
            mode=config.judge_mode,
            semantic=config.semantic_enabled,
            example_id=example_id,
            iteration=t,
            timeout_s=config.timeout_s,
        )
        record = IterationRecord(t, candidate, report, theta.versions(), stage_outputs=_stage_outputs(state))
        trace.append(record)
        if report.passed:
            return Outcome(example_id, candidate, True, t, trace, theta, commits)
        if t >= budget:
            return Outcome(example_id, candidate, False, t, trace, theta, commits)

        try:
            if "no-critic" in config.ablations:
                restart = "sql"
            else:
                crit = critique(
                    report,
                    proxy,
                    candidate,
                    state,
                    question,
                    gateway,
                    config.feedback_mode,
                    critic_mode=config.critic_mode,
                    example_id=example_id,
                    iteration=t,
                )
                record.critique = crit
                if crit.likely_stage is None:
                    # The critic attributed nothing: spend the iteration on a fresh SQL attempt,
                    # no prompt change, instead of localize's stage3 fallback.
                    restart = "sql"
                else:
                    blamed = localize(crit, report)
                    stage = PROMPT_FOR[blamed]
                    revision = reflect(
                        theta.text(stage),
                        stage,
                        crit,
                        report,
                        gateway,
                        version=theta.version(stage),
                        example_id=example_id,
                        iteration=t,
                    )
                    record.revision = revision
                    if revision.accepted:
                        theta = commit(theta, revision)
                        record.refined_stage = stage
                        commits += 1
                    restart = RESTART_FOR[blamed]
            record.restart_stage = restart
            state = rerun_from(state, restart, proxy, theta, gateway)
        except CassetteMiss:
            raise
        except (StageError, GatewayError, ContractViolation) as exc:
            return _failure(example_id, theta, trace, candidate, t, commits, exc)
        t += 1


@dataclass
class Query:
    example_id: str
    question: str
    evidence: str | None = None


@dataclass
class Regression:
    example_id: str
    after_commit_by: str
    theta_digest: str

    def to_dict(self) -> dict:
        return {"example_id": self.example_id, "after_commit_by": self.after_commit_by, "theta_digest": self.theta_digest}


@dataclass
class SetResult:
    outcomes: list[Outcome]
    theta: StagePromptSet
    commits: int = 0
    regressions: list[Regression] = field(default_factory=list)
    # Examples passing (among those seen so far) right after each example that committed.
    pass_counts: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter(self.outcomes)

    def __len__(self) -> int:
        return len(self.outcomes)

    def __getitem__(self, i):
        return self.outcomes[i]

    @property
    def solved_count(self) -> int:
        return sum(o.solved for o in self.outcomes)


def recheck(
    query, db_path, proxy: ContextProxy, theta: StagePromptSet, config: LoopConfig, gateway: Gateway
) -> bool:
    """Does ``query`` pass at t=0 under ``theta``? No refinement is attempted."""
    single = LoopConfig(
        budget_t=0,
        feedback_mode=config.feedback_mode,
        ablations=config.ablations,
        judge_mode=config.judge_mode,
        critic_mode=config.critic_mode,
        timeout_s=config.timeout_s,
    )
    outcome = solve(
        query.question,
        db_path,
        proxy,
        theta,
        single,
        gateway,
        example_id=query.example_id,
        extra_evidence=getattr(query, "evidence", None),
    )
    return outcome.solved


def solve_set(
    queries,
    db_path: str | os.PathLike,
    proxy: ContextProxy,
    theta: StagePromptSet,
    config: LoopConfig,
    gateway: Gateway,
) -> SetResult:
    """Solve queries in order against one database, carrying prompt revisions forward.

    With ``config.regression_check`` on, every example that changes the prompt
    set triggers a t=0 re-check of all earlier solved examples.
    """
    result = SetResult([], theta)
    passing: dict[str, bool] = {}
    for q in queries:
        before = result.theta.digest()
        outcome = solve(
            q.question,
            db_path,
            proxy,
            result.theta,
            config,
            gateway,
            example_id=q.example_id,
            extra_evidence=getattr(q, "evidence", None),
        )
        result.outcomes.append(outcome)
        result.theta = outcome.theta
        result.commits += outcome.commits
        passing[q.example_id] = outcome.solved
        if result.theta.digest() == before:
            continue
        if config.regression_check:
            for prev in result.outcomes[:-1]:
                if not prev.solved:
                    continue
                ok = recheck(_query_of(queries, prev.example_id), db_path, proxy, result.theta, config, gateway)
                passing[prev.example_id] = ok
                if not ok:
                    result.regressions.append(Regression(prev.example_id, q.example_id, result.theta.digest()))
                    log.warning("example %s regressed after revision from %s", prev.example_id, q.example_id)
        result.pass_counts.append(sum(passing.values()))
    return result


def _query_of(queries, example_id):
    for q in queries:
        if q.example_id == example_id:
            return q
    raise KeyError(example_id)
