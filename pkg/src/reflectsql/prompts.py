"""Prompt templates and the versioned per-stage prompt set.

Templates use ``str.format`` placeholders; literal braces are doubled. The
section starting at the ``Task Invocation`` (or ``Inputs``) line is sent as the
user message, everything before it as the system message.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .gateway import PIPELINE_STAGES

REQUIRED_HEADERS = ("Question:", "Relevant tables/attributes:", "Value instances:")
INVOCATION_MARKERS = ("Task Invocation", "Inputs")

THETA_FORMAT_VERSION = 1


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("reflectsql").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def placeholders(template: str) -> list[str]:
    """Named fields of a format string, in order of first appearance.

    Raises ``ValueError`` for text that is not a valid format string.
    """
    seen: list[str] = []
    for _literal, name, _spec, _conv in string.Formatter().parse(template):
        if name is not None and name not in seen:
            seen.append(name)
    return seen


def split_invocation(text: str) -> tuple[str, str]:
    lines = text.splitlines(keepends=True)
    for i, line in enumerate(lines):
        if line.strip() in INVOCATION_MARKERS:
            return "".join(lines[:i]).rstrip() + "\n", "".join(lines[i + 1 :]).strip() + "\n"
    return text, ""


def render(template: str, **values: str) -> tuple[str, str]:
    """Fill a template and split it into (system_text, user_text).

    Every placeholder must be supplied; substituted values are never re-scanned,
    so braces inside them are safe.
    """
    missing = [p for p in placeholders(template) if p not in values]
    if missing:
        raise KeyError(f"missing template values: {', '.join(missing)}")
    system, user = split_invocation(template)
    return system.format(**values), user.format(**values)


@dataclass
class StagePrompt:
    text: str
    version: int = 0


@dataclass
class HistoryEntry:
    stage: str
    old_version: int
    critique_digest: str
    explanation: str = ""


@dataclass
class StagePromptSet:
    """Theta: the per-stage prompt texts that refinement mutates."""

    db_id: str = ""
    prompts: dict[str, StagePrompt] = field(default_factory=dict)
    history: list[HistoryEntry] = field(default_factory=list)

    @classmethod
    def defaults(cls, db_id: str = "") -> "StagePromptSet":
        return cls(db_id=db_id, prompts={s: StagePrompt(load_template(s), 0) for s in PIPELINE_STAGES})

    def text(self, stage: str) -> str:
        return self.prompts[stage].text

    def version(self, stage: str) -> int:
        return self.prompts[stage].version

    def versions(self) -> dict[str, int]:
        return {s: p.version for s, p in self.prompts.items()}

    def snapshot(self) -> "StagePromptSet":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "db_id": self.db_id,
            "format_version": THETA_FORMAT_VERSION,
            "prompts": {s: {"text": p.text, "version": p.version} for s, p in self.prompts.items()},
            "history": [vars(h).copy() for h in self.history],
        }

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "StagePromptSet":
        prompts = {s: StagePrompt(p["text"], int(p["version"])) for s, p in doc["prompts"].items()}
        missing = [s for s in PIPELINE_STAGES if s not in prompts]
        if missing:
            raise ValueError(f"prompt set lacks stages: {missing}")
        history = [HistoryEntry(**h) for h in doc.get("history", [])]
        return cls(db_id=doc.get("db_id", ""), prompts=prompts, history=history)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "StagePromptSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


REQUIRED_PLACEHOLDERS = {
    "stage1": ("question", "schema"),
    "stage2": ("question", "stage1"),
    "plan": ("question", "stage1", "stage2"),
    "sql": ("semantic_plan", "question"),
}

# Every value a stage renderer can supply; anything else in a template is an error.
AVAILABLE_VALUES = {
    "stage1": ("question", "schema", "extra_evidence"),
    "stage2": ("question", "stage1", "extra_db_info", "values"),
    "plan": ("question", "stage1", "stage2"),
    "sql": ("semantic_plan", "extra_db_info", "extra_evidence", "question"),
}


def theta_problems(theta: StagePromptSet) -> list[str]:
    """Structural problems that make a prompt set unusable."""
    problems = []
    for stage in PIPELINE_STAGES:
        if stage not in theta.prompts:
            problems.append(f"missing stage {stage}")
            continue
        text = theta.text(stage)
        try:
            names = placeholders(text)
        except ValueError as exc:
            problems.append(f"{stage}: not a valid format string ({exc})")
            continue
        for p in REQUIRED_PLACEHOLDERS[stage]:
            if p not in names:
                problems.append(f"{stage}: missing placeholder {{{p}}}")
        for p in names:
            if p not in AVAILABLE_VALUES[stage]:
                problems.append(f"{stage}: unknown placeholder {{{p}}}")
    return problems
