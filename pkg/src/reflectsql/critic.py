"""Stage-level error attribution.

A critique names the stage most likely responsible for a failed evaluation.
Stages are reported in three-stage terms: ``stage1`` (schema selection),
``stage2`` (literal signals), ``stage3`` (plan and SQL realization).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

from . import contracts
from .contracts import is_str_list, require_keys
from .errors import ContractViolation, UnparseableSQL
from .gateway import Gateway, ModelRequest
from .judges import EvalReport, Signature, extract_signature
from .pipeline import PipelineState, SqlCandidate, dumps
from .prompts import load_template, render
from .proxy import ContextProxy, render_schema

CRITIC_STAGES = ("stage1", "stage2", "stage3")
FEEDBACK_MODES = ("coarse", "granular", "epistemic-only")
CRITIC_MODES = ("rules", "model")

CRITERIA = {
    "stage1": ("schema-missing", "schema-hallucination", "fk-assumption"),
    "stage2": ("predicate-mapping", "literal-typing", "aggregation-constraint"),
    "stage3": ("sql-structure", "join-missing", "order-group-having", "semantic-mismatch", "stage1-leak"),
}

ALL_CORRECT_NOTE = "SQL is correct and semantically aligned with the question and schema."

# Assumption-level wording per criterion, used in epistemic-only feedback.
_ASSUMPTIONS = {
    "schema-missing": "the schema selection assumed fewer tables or attributes than the question needs",
    "schema-hallucination": "the schema selection assumed objects that the database does not have",
    "fk-assumption": "the schema selection assumed a relationship the database does not declare",
    "predicate-mapping": "a question literal was assumed to map to the wrong column, operator or value",
    "literal-typing": "a literal was assumed to have the wrong type for its column",
    "aggregation-constraint": "an aggregation constraint from the question was assumed incorrectly",
    "sql-structure": "the final query structure does not follow the plan",
    "join-missing": "the query assumed tables can be combined without a join condition",
    "order-group-having": "the ordering or grouping assumption differs from the plan",
    "semantic-mismatch": "the query assumes a different meaning than the plan states",
    "stage1-leak": "the query assumed objects that were not surfaced by schema selection",
}

_MODE_INSTRUCTIONS = {
    "coarse": "Feedback style: coarse. Report pass/fail per stage only; no criteria, no SQL fragments.",
    "granular": "Feedback style: granular. For each issue give the criterion and the implicated SQL fragment.",
    "epistemic-only": (
        "Feedback style: epistemic-only. Describe the mistaken assumption behind each issue; "
        "do not quote SQL fragments."
    ),
}


@dataclass(frozen=True)
class Violation:
    stage: str
    criterion: str
    message: str
    fragment: str | None = None

    def __post_init__(self):
        if self.stage not in CRITIC_STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.criterion not in CRITERIA[self.stage]:
            raise ValueError(f"criterion {self.criterion!r} does not belong to {self.stage}")


@dataclass
class Critique:
    likely_stage: str | None
    issues: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)

    def __post_init__(self):
        if self.likely_stage is not None and self.likely_stage not in CRITIC_STAGES:
            raise ValueError(f"unknown stage {self.likely_stage!r}")
        if self.likely_stage is None and self.issues:
            raise ValueError("a critique without a likely stage cannot carry issues")

    def to_dict(self) -> dict:
        return {"likely_stage": self.likely_stage, "issues": list(self.issues), "notes": list(self.notes)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def earliest(stages) -> str | None:
    stages = set(stages)
    present = [s for s in CRITIC_STAGES if s in stages]
    return present[0] if present else None


def format_issue(v: Violation, mode: str) -> str:
    if mode == "coarse":
        return f"{v.stage}: fail"
    if mode == "epistemic-only":
        return f"{v.stage}: {_ASSUMPTIONS[v.criterion]}"
    text = f"{v.stage}/{v.criterion}: {v.message}"
    return text + (f" | fragment: {v.fragment}" if v.fragment else "")


def shape(violations: list[Violation], mode: str, notes: list[str] | None = None) -> Critique:
    if mode not in FEEDBACK_MODES:
        raise ValueError(f"unknown feedback mode {mode!r}")
    stage = earliest(v.stage for v in violations)
    if stage is None:
        return Critique(None, [], list(notes) if notes is not None else [ALL_CORRECT_NOTE], [])
    issues: list[str] = []
    for v in violations:
        text = format_issue(v, mode)
        if text not in issues:
            issues.append(text)
    return Critique(stage, issues, list(notes or []), list(violations))


# -- rule-based critic --------------------------------------------------------

_NO_TABLE = re.compile(r"no such table:\s*(?:\w+\.)?([\w\"`\[\] ]+)", re.IGNORECASE)
_NO_COLUMN = re.compile(r"no such column:\s*([\w.\"`\[\]]+)", re.IGNORECASE)
_NEAR = re.compile(r'near "([^"]*)"')
_NUMERIC_TYPES = ("INT", "REAL", "FLOA", "DOUB", "NUM", "DEC")


def _plan_tables(state: PipelineState, proxy: ContextProxy) -> set[str]:
    plan = state.plan
    if plan is None:
        return set()
    tables = set()
    for e in plan.entities:
        if isinstance(e, str) and proxy.resolve_table(e):
            tables.add(proxy.resolve_table(e))
    for a in plan.attributes:
        if isinstance(a, str) and "." in a:
            ref = proxy.resolve_column(a)
            if ref:
                tables.add(ref.split(".", 1)[0])
    return tables


def _is_numeric(proxy: ContextProxy, ref: str) -> bool:
    d = proxy.descriptor(ref)
    return bool(d and d.declared_type and any(t in d.declared_type.upper() for t in _NUMERIC_TYPES))


def _is_number_text(text: str) -> bool:
    try:
        float(text)
    except (TypeError, ValueError):
        return False
    return True


def rule_violations(
    report: EvalReport, proxy: ContextProxy, candidate: SqlCandidate, state: PipelineState
) -> list[Violation]:
    """Deterministic pattern checks standing in for the model critic."""
    out: list[Violation] = []
    selected = {proxy.resolve_table(t) or t for t in (state.stage1.tables if state.stage1 else [])}

    required = _plan_tables(state, proxy)
    for t in sorted(required - selected):
        out.append(Violation("stage1", "schema-missing", f"table {t} is needed but missing from schema selection", t))

    interp = report.interpreter
    if not interp.exec_ok:
        msg = interp.error_message or ""
        m_table, m_col = _NO_TABLE.search(msg), _NO_COLUMN.search(msg)
        if m_table:
            name = m_table.group(1).strip('"`[] ')
            if proxy.resolve_table(name) is None:
                out.append(Violation("stage3", "sql-structure", f"query references unknown table {name}", name))
            elif proxy.resolve_table(name) not in selected:
                out.append(Violation("stage3", "stage1-leak", f"table {name} was not surfaced by schema selection", name))
            else:
                out.append(Violation("stage3", "sql-structure", msg, name))
        elif m_col:
            name = m_col.group(1)
            ref = proxy.resolve_column(name)
            if ref is not None and ref.split(".", 1)[0] not in selected:
                out.append(Violation("stage3", "stage1-leak", f"column {name} was not surfaced by schema selection", name))
            else:
                out.append(Violation("stage3", "sql-structure", f"query references unknown column {name}", name))
        else:
            near = _NEAR.search(msg)
            out.append(Violation("stage3", "sql-structure", msg or "query failed", near.group(1) if near else None))
        return out

    try:
        sig = extract_signature(candidate)
    except UnparseableSQL:
        sig = Signature()
    for t in sorted(sig.tables):
        canon = proxy.resolve_table(t)
        if canon is not None and canon not in selected:
            out.append(Violation("stage3", "stage1-leak", f"table {canon} was not surfaced by schema selection", canon))
    if len({proxy.resolve_table(t) for t in sig.tables} - {None}) >= 2 and not sig.join_pairs:
        if not re.search(r"\b(join|union|intersect|except)\b|\bin\s*\(\s*select\b", candidate.text, re.IGNORECASE):
            out.append(Violation("stage3", "join-missing", "several tables are combined without a join condition"))

    if state.stage2 is not None:
        for lit in state.stage2.literals:
            ref = proxy.resolve_column(lit.column_candidate) if lit.column_candidate else None
            if ref is None:
                continue
            col = ref.split(".", 1)[1].lower()
            for pcol, op, val in sig.predicates:
                if pcol != col or isinstance(val, tuple):
                    continue
                if _is_numeric(proxy, ref) and not _is_number_text(val) and _is_number_text(lit.raw_expression):
                    out.append(Violation("stage2", "literal-typing", f"{col} is numeric but compared to text", f"{col} {op} '{val}'"))

    for item in report.coverage_missing:
        kind = item.split(":", 1)[0]
        criterion = "order-group-having" if kind in ("order", "grouping") else "semantic-mismatch"
        out.append(Violation("stage3", criterion, f"plan constraint not realized: {item}", item.split(":", 1)[-1].strip()))
    if report.pass_syn and not report.semantic.intent_preserved and not report.coverage_missing:
        for m in report.semantic.missing_constraints or [report.semantic.rationale or "intent not preserved"]:
            out.append(Violation("stage3", "semantic-mismatch", m))

    # Extra stage-1 attributes are expected and never checked here.
    return out


# -- model critic -------------------------------------------------------------


def parse_critique(text: str) -> Critique:
    doc = contracts.parse_json_object("critic", text)
    require_keys("critic", doc, ("likely_stage", "issues", "notes"))
    problems = []
    stage = doc["likely_stage"]
    if stage is not None and stage not in CRITIC_STAGES:
        problems.append(f"likely_stage must be one of {', '.join(CRITIC_STAGES)} or null, got {stage!r}")
    if not is_str_list(doc["issues"]):
        problems.append("issues must be a list of strings")
    if not is_str_list(doc["notes"]):
        problems.append("notes must be a list of strings")
    if not problems and stage is None and doc["issues"]:
        problems.append("issues must be empty when likely_stage is null")
    if problems:
        raise ContractViolation("critic", problems)
    return Critique(stage, list(doc["issues"]), list(doc["notes"]))


_FRAGMENT_TAIL = re.compile(r"\s*\|\s*fragment:.*$", re.IGNORECASE)
_BACKTICKED = re.compile(r"`[^`]*`")


def reshape_model_critique(critique: Critique, mode: str) -> Critique:
    """Enforce the feedback style on free-text model issues."""
    if critique.likely_stage is None or mode == "granular":
        return critique
    if mode == "coarse":
        return Critique(critique.likely_stage, [f"{critique.likely_stage}: fail"], critique.notes)
    issues = []
    for issue in critique.issues:
        text = _BACKTICKED.sub("the implicated clause", _FRAGMENT_TAIL.sub("", issue)).strip()
        if text and text not in issues:
            issues.append(text)
    return Critique(critique.likely_stage, issues or [f"{critique.likely_stage}: an assumption failed"], critique.notes)


def critique(
    report: EvalReport,
    proxy: ContextProxy,
    candidate: SqlCandidate,
    state: PipelineState,
    question: str,
    gateway: Gateway | None = None,
    mode: str = "granular",
    *,
    critic_mode: str = "rules",
    example_id: str | None = None,
    iteration: int = 0,
) -> Critique:
    if mode not in FEEDBACK_MODES:
        raise ValueError(f"unknown feedback mode {mode!r}")
    if critic_mode == "rules":
        return shape(rule_violations(report, proxy, candidate, state), mode)
    if critic_mode != "model":
        raise ValueError(f"unknown critic mode {critic_mode!r}")
    system, user = render(
        load_template("critic"),
        question=question,
        schema=render_schema(proxy),
        sql=candidate.text,
        stage1=dumps(state.stage1.to_dict() if state.stage1 else None),
        stage2=dumps(state.stage2.to_dict() if state.stage2 else None),
        analysis=dumps(report.to_dict()),
    )
    request = ModelRequest("critic", system, user, example_id=example_id, version=iteration)
    request = request.with_user_suffix(_MODE_INSTRUCTIONS[mode])
    result, _ = contracts.invoke(gateway, request, parse_critique)
    return reshape_model_critique(result, mode)


def localize(crit: Critique | None, report: EvalReport) -> str | None:
    """Stage to refine: the critique's attribution, else stage3 if any judge failed."""
    if crit is not None and crit.likely_stage is not None:
        return crit.likely_stage
    if not (report.pass_syn and report.pass_sem):
        return "stage3"
    return None
