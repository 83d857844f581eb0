"""Prompt revision for the stage a critique blames.

Only the implicated stage's prompt changes. Every revision is validated before
it can be committed; a rejected revision leaves the prompt set untouched.
"""

from __future__ import annotations

import json
import os
import re
import string
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import contracts
from .contracts import require_keys
from .critic import Critique
from .errors import ContractViolation, StaleVersion
from .gateway import PIPELINE_STAGES, Gateway, ModelRequest
from .judges import EvalReport
from .prompts import (
    AVAILABLE_VALUES,
    REQUIRED_HEADERS,
    HistoryEntry,
    StagePrompt,
    StagePromptSet,
    load_template,
    render,
)

# The critic blames three stages; the third covers plan and SQL jointly. Its
# revision targets the SQL prompt and the restart begins at the plan.
PROMPT_FOR = {"stage1": "stage1", "stage2": "stage2", "stage3": "sql"}
RESTART_FOR = {"stage1": "stage1", "stage2": "stage2", "stage3": "plan"}


@dataclass
class PromptRevision:
    stage: str
    old_version: int
    new_prompt: str
    explanation: str
    accepted: bool
    rejection_reasons: list[str] = field(default_factory=list)
    critique_digest: str = ""
    attempts: int = 1

    def to_dict(self, with_prompt: bool = False) -> dict:
        d = {
            "stage": self.stage,
            "old_version": self.old_version,
            "explanation": self.explanation,
            "accepted": self.accepted,
            "rejection_reasons": list(self.rejection_reasons),
            "critique_digest": self.critique_digest,
            "attempts": self.attempts,
        }
        if with_prompt:
            d["new_prompt"] = self.new_prompt
        return d


_TOKEN = re.compile(r"\{\{|\}\}|\{[^{}]*\}|[{}]")


def _tokens(text: str) -> list[str]:
    """Single-brace spans and stray braces; doubled braces are escapes and skipped."""
    return [t for t in _TOKEN.findall(text) if t not in ("{{", "}}")]


def _count_placeholder(text: str, name: str) -> int:
    return sum(1 for t in _tokens(text) if t == "{" + name + "}")


def validate_prompt(new_prompt: str, stage: str, original: str) -> list[str]:
    """All rule violations of ``new_prompt`` relative to ``original``.

    Checks run in order: placeholders kept, headers kept, brace safety, non-empty.
    """
    problems: list[str] = []
    originals = []
    for t in _tokens(original):
        if len(t) > 2 and t[0] == "{" and t[-1] == "}":
            name = t[1:-1]
            if name not in originals:
                originals.append(name)
    for name in originals:
        if _count_placeholder(new_prompt, name) < _count_placeholder(original, name):
            problems.append(f"missing placeholder {{{name}}}")
    for header in REQUIRED_HEADERS:
        if new_prompt.count(header) < original.count(header):
            problems.append(f"missing header {header!r}")
    allowed = set(originals) | set(AVAILABLE_VALUES.get(stage, ()))
    for t in _tokens(new_prompt):
        if t in ("{", "}"):
            problems.append(f"unescaped brace {t!r}")
        elif t[1:-1] not in allowed:
            problems.append(f"unescaped brace span {t}")
    if not problems:
        try:
            list(string.Formatter().parse(new_prompt))
        except ValueError as exc:
            problems.append(f"not a valid format string ({exc})")
    if not new_prompt.strip():
        problems.append("empty prompt")
    return problems


def parse_revision(text: str) -> dict:
    doc = contracts.parse_json_object("refiner", text)
    require_keys("refiner", doc, ("new_prompt", "explanation"))
    problems = []
    if not isinstance(doc["new_prompt"], str):
        problems.append("new_prompt must be a string")
    if not isinstance(doc["explanation"], str):
        problems.append("explanation must be a string")
    if problems:
        raise ContractViolation("refiner", problems)
    return doc


def reflect(
    theta_text: str,
    stage: str,
    critique: Critique,
    report: EvalReport,
    gateway: Gateway,
    *,
    version: int = 0,
    example_id: str | None = None,
    iteration: int = 0,
) -> PromptRevision:
    """Ask the refiner for a new ``stage`` prompt; retry once if validation rejects it.

    ``stage`` is a pipeline stage name (``stage1``, ``stage2``, ``plan``, ``sql``).
    """
    if stage not in PIPELINE_STAGES:
        raise ValueError(f"unknown pipeline stage {stage!r}")
    critique_json = json.dumps(
        {"critique": critique.to_dict(), "report": report.to_dict()}, indent=2, ensure_ascii=False
    )
    system, user = render(
        load_template("refiner"), stage=stage, original_prompt=theta_text, critique_json=critique_json
    )
    request = ModelRequest(
        "refiner",
        system,
        user,
        example_id=example_id,
        version=iteration,
        meta={"original_prompt": theta_text, "stage": stage},
    )
    digest = critique.digest()
    attempts = 0
    doc: dict = {"new_prompt": "", "explanation": ""}
    reasons: list[str] = []
    for attempt in range(2):
        if attempt == 1:
            request = request.with_user_suffix(
                "Your previous revision was rejected: " + "; ".join(reasons) + ". Fix these problems."
            )
        try:
            doc, calls = contracts.invoke(gateway, request, parse_revision)
        except ContractViolation as exc:
            attempts += 2
            return PromptRevision(stage, version, "", "", False, [f"contract violation: {exc}"], digest, attempts)
        attempts += calls
        reasons = validate_prompt(doc["new_prompt"], stage, theta_text)
        if not reasons:
            return PromptRevision(stage, version, doc["new_prompt"], doc["explanation"], True, [], digest, attempts)
    return PromptRevision(stage, version, doc["new_prompt"], doc["explanation"], False, reasons, digest, attempts)


def commit(theta: StagePromptSet, revision: PromptRevision) -> StagePromptSet:
    """New prompt set with only ``revision.stage`` changed; ``theta`` is not modified."""
    if not revision.accepted:
        raise ValueError("cannot commit a rejected revision")
    current = theta.version(revision.stage)
    if revision.old_version != current:
        raise StaleVersion(
            f"{revision.stage}: revision based on version {revision.old_version}, current is {current}"
        )
    new = theta.snapshot()
    new.prompts[revision.stage] = StagePrompt(revision.new_prompt, current + 1)
    new.history.append(HistoryEntry(revision.stage, current, revision.critique_digest, revision.explanation))
    return new


class ThetaStore:
    """Single-writer holder of one database's prompt set, optionally persisted."""

    def __init__(self, theta: StagePromptSet, path: str | os.PathLike | None = None):
        self._theta = theta
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()

    @classmethod
    def open(cls, path: str | os.PathLike, db_id: str) -> "ThetaStore":
        path = Path(path)
        theta = StagePromptSet.load(path) if path.is_file() else StagePromptSet.defaults(db_id)
        return cls(theta, path)

    @property
    def current(self) -> StagePromptSet:
        return self._theta.snapshot()

    def commit(self, revision: PromptRevision) -> StagePromptSet:
        with self._lock:
            self._theta = commit(self._theta, revision)
            if self.path is not None:
                self._theta.save(self.path)
            return self._theta.snapshot()

    def replace(self, theta: StagePromptSet) -> None:
        with self._lock:
            self._theta = theta.snapshot()
            if self.path is not None:
                self._theta.save(self.path)


def theta_store_path(store_dir: str | os.PathLike, db_id: str) -> Path:
    return Path(store_dir) / f"{db_id}.theta.json"
