"""The four typed generation stages and their composition.

``stage1`` selects tables and attributes, ``stage2`` extracts literal and
constraint signals, ``plan`` writes a semantics-first plan, and ``sql`` realizes
the plan. Each stage output is parsed against a strict contract; a malformed
output gets one repair call before the stage fails.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Any

from . import contracts
from .contracts import is_number, is_str_list, require_keys
from .errors import ContractViolation, StageError
from .gateway import PIPELINE_STAGES, Gateway, ModelRequest
from .prompts import StagePromptSet, render
from .proxy import ContextProxy, render_context, render_schema, render_values

COMPARISON_TYPES = ("literal", "equality", "range", "superlative", "comparative", "unknown")
DIRECTIONS = ("min", "max", "greater", "less")
CARDINALITY_HINTS = ("single", "multiple", "unknown")
DIRECTED_TYPES = ("superlative", "comparative", "range")

PLAN_KEYS = (
    "intent",
    "entities",
    "attributes",
    "filters",
    "aggregations",
    "joins",
    "order",
    "limit",
    "grouping",
    "derived",
    "feasibility_checked",
    "cardinality",
    "distinct",
)

# Operators and SQL keywords that must not appear in stage-2 signal text.
_SQL_OPERATOR = re.compile(r"(>=|<=|<>|!=|==|[<>=])|\b(SELECT|WHERE|LIKE|BETWEEN|GROUP\s+BY|ORDER\s+BY|HAVING)\b|\b(COUNT|SUM|AVG|MIN|MAX)\s*\(")
_SQL_STATEMENT = re.compile(r"\bselect\b[\s\S]+\bfrom\b", re.IGNORECASE)

STAGE_ORDER = {s: i for i, s in enumerate(PIPELINE_STAGES)}


@dataclass
class SchemaSelection:
    tables: list[str]
    attributes: list[str]

    def to_dict(self) -> dict:
        return {"tables": list(self.tables), "attributes": list(self.attributes)}


@dataclass
class LiteralSignal:
    column_candidate: str | None
    raw_expression: str
    comparison_type: str
    direction: str | None
    cardinality_hint: str
    confidence: float


@dataclass
class SignalSet:
    literals: list[LiteralSignal]
    filter_candidates: list[str]
    notes: str | None

    def to_dict(self) -> dict:
        return {
            "literals": [asdict(lit) for lit in self.literals],
            "filter_candidates": list(self.filter_candidates),
            "notes": self.notes,
        }


@dataclass
class SemanticPlan:
    intent: str
    entities: list
    attributes: list
    filters: list
    aggregations: dict | None
    joins: list
    order: list
    limit: int | None
    grouping: list
    derived: list
    feasibility_checked: bool
    cardinality: str
    distinct: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in PLAN_KEYS}

    @classmethod
    def from_dict(cls, doc: dict) -> "SemanticPlan":
        return cls(**{k: doc[k] for k in PLAN_KEYS})


@dataclass
class SqlCandidate:
    text: str
    terminated: bool = True
    produced_at_iteration: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineState:
    question: str
    example_id: str | None = None
    extra_evidence: str | None = None
    stage1: SchemaSelection | None = None
    stage2: SignalSet | None = None
    plan: SemanticPlan | None = None
    sql: SqlCandidate | None = None
    versions: dict[str, int] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)

    def output(self, stage: str):
        return getattr(self, stage)

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "example_id": self.example_id,
            "extra_evidence": self.extra_evidence,
            "stage1": self.stage1.to_dict() if self.stage1 else None,
            "stage2": self.stage2.to_dict() if self.stage2 else None,
            "plan": self.plan.to_dict() if self.plan else None,
            "sql": self.sql.to_dict() if self.sql else None,
            "versions": dict(self.versions),
            "events": list(self.events),
        }

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    def copy(self) -> "PipelineState":
        return PipelineState(
            question=self.question,
            example_id=self.example_id,
            extra_evidence=self.extra_evidence,
            stage1=self.stage1,
            stage2=self.stage2,
            plan=self.plan,
            sql=self.sql,
            versions=dict(self.versions),
            events=list(self.events),
        )


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False)


# -- contract parsers ------------------------------------------------------


def parse_stage1(text: str, proxy: ContextProxy) -> tuple[SchemaSelection, list[str]]:
    """Validate a stage-1 answer. Returns the selection and normalization events.

    Missing primary keys of selected tables, and tables implied by selected
    attributes, are added rather than rejected (recall-first selection).
    """
    doc = contracts.parse_json_object("stage1", text)
    require_keys("stage1", doc, ("tables", "attributes"))
    if not is_str_list(doc["tables"]) or not is_str_list(doc["attributes"]):
        raise ContractViolation("stage1", "tables and attributes must be lists of strings")
    problems, events = [], []
    tables: list[str] = []
    for t in doc["tables"]:
        canon = proxy.resolve_table(t)
        if canon is None:
            problems.append(f"unknown table {t!r}")
        elif canon not in tables:
            tables.append(canon)
    attributes: list[str] = []
    for a in doc["attributes"]:
        if "." not in a:
            problems.append(f"attribute {a!r} is not qualified as table.attribute")
            continue
        canon = proxy.resolve_column(a)
        if canon is None:
            problems.append(f"unknown attribute {a!r}")
            continue
        if canon not in attributes:
            attributes.append(canon)
        table = canon.split(".", 1)[0]
        if table not in tables:
            tables.append(table)
            events.append(f"stage1: added table {table} implied by {canon}")
    if problems:
        raise ContractViolation("stage1", problems)
    if not tables:
        raise ContractViolation("stage1", "no tables selected")
    for t in tables:
        for pk in proxy.primary_keys(t):
            if pk not in attributes:
                attributes.append(pk)
                events.append(f"stage1: added primary key {pk}")
    return SchemaSelection(tables=tables, attributes=attributes), events


def parse_stage2(text: str, proxy: ContextProxy) -> SignalSet:
    doc = contracts.parse_json_object("stage2", text)
    require_keys("stage2", doc, ("literals", "filter_candidates", "notes"))
    problems = []
    if not isinstance(doc["literals"], list):
        raise ContractViolation("stage2", "literals must be a list")
    if not is_str_list(doc["filter_candidates"]):
        problems.append("filter_candidates must be a list of strings")
    if doc["notes"] is not None and not isinstance(doc["notes"], str):
        problems.append("notes must be null or a string")
    literals = []
    keys = ("column_candidate", "raw_expression", "comparison_type", "direction", "cardinality_hint", "confidence")
    for i, raw in enumerate(doc["literals"]):
        if not isinstance(raw, dict):
            problems.append(f"literal {i} is not an object")
            continue
        try:
            require_keys("stage2", raw, keys)
        except ContractViolation as exc:
            problems.extend(f"literal {i}: {p}" for p in exc.problems)
            continue
        col = raw["column_candidate"]
        if col is not None:
            if not isinstance(col, str) or proxy.resolve_column(col) is None:
                if not (isinstance(col, str) and _bare_column_exists(proxy, col)):
                    problems.append(f"literal {i}: unknown column_candidate {col!r}")
        expr = raw["raw_expression"]
        if not isinstance(expr, str) or not expr.strip():
            problems.append(f"literal {i}: raw_expression must be a non-empty string")
        elif _SQL_OPERATOR.search(expr):
            problems.append(f"literal {i}: raw_expression contains SQL operators or functions")
        ctype = raw["comparison_type"]
        if ctype not in COMPARISON_TYPES:
            problems.append(f"literal {i}: invalid comparison_type {ctype!r}")
        direction = raw["direction"]
        if direction == "none":
            direction = None
        if direction is not None and direction not in DIRECTIONS:
            problems.append(f"literal {i}: invalid direction {direction!r}")
        elif direction is not None and ctype not in DIRECTED_TYPES:
            problems.append(f"literal {i}: direction {direction!r} given for comparison_type {ctype!r}")
        if raw["cardinality_hint"] not in CARDINALITY_HINTS:
            problems.append(f"literal {i}: invalid cardinality_hint {raw['cardinality_hint']!r}")
        conf = raw["confidence"]
        if not is_number(conf) or not 0.0 <= conf <= 1.0:
            problems.append(f"literal {i}: confidence must be a number in [0, 1]")
        if not problems:
            literals.append(
                LiteralSignal(col, expr, ctype, direction, raw["cardinality_hint"], float(conf))
            )
    for fc in doc["filter_candidates"] if isinstance(doc["filter_candidates"], list) else []:
        if isinstance(fc, str) and _SQL_OPERATOR.search(fc):
            problems.append(f"filter candidate {fc!r} contains SQL operators or functions")
    if problems:
        raise ContractViolation("stage2", problems)
    return SignalSet(literals=literals, filter_candidates=list(doc["filter_candidates"]), notes=doc["notes"])


def _bare_column_exists(proxy: ContextProxy, name: str) -> bool:
    name = name.strip().strip('"`').lower()
    return any(d.column.lower() == name for d in proxy.descriptors)


def _column_exists(proxy: ContextProxy, ref: str) -> bool:
    return proxy.resolve_column(ref) is not None or ("." not in ref and _bare_column_exists(proxy, ref))


def parse_plan(text: str, proxy: ContextProxy) -> SemanticPlan:
    doc = contracts.parse_json_object("plan", text)
    require_keys("plan", doc, PLAN_KEYS)
    problems = []
    if not isinstance(doc["intent"], str):
        problems.append("intent must be a string")
    for key in ("entities", "attributes", "filters", "joins", "order", "grouping", "derived"):
        if not isinstance(doc[key], list):
            problems.append(f"{key} must be a list")
    if doc["aggregations"] is not None and not isinstance(doc["aggregations"], dict):
        problems.append("aggregations must be an object or null")
    limit = doc["limit"]
    if limit is not None and (not isinstance(limit, int) or isinstance(limit, bool) or limit <= 0):
        problems.append("limit must be null or a positive integer")
    if doc["feasibility_checked"] is not True:
        problems.append("feasibility_checked must be true")
    if doc["cardinality"] not in CARDINALITY_HINTS:
        problems.append(f"invalid cardinality {doc['cardinality']!r}")
    if not isinstance(doc["distinct"], bool):
        problems.append("distinct must be a boolean")
    if problems:
        raise ContractViolation("plan", problems)
    for e in doc["entities"]:
        if not isinstance(e, str) or proxy.resolve_table(e) is None:
            problems.append(f"entity {e!r} is not a table in the schema")
    for a in doc["attributes"]:
        if not isinstance(a, str):
            problems.append(f"attribute {a!r} must be a string")
        elif a.strip() != "*" and not _column_exists(proxy, a):
            problems.append(f"attribute {a!r} is not a column in the schema")
    for s in _strings_in(doc):
        if _SQL_STATEMENT.search(s):
            problems.append("plan values must not contain SQL statements")
            break
    if problems:
        raise ContractViolation("plan", problems)
    return SemanticPlan.from_dict(doc)


def _strings_in(obj) -> list[str]:
    if isinstance(obj, str):
        return [obj]
    if isinstance(obj, dict):
        return [s for k, v in obj.items() for s in _strings_in(k) + _strings_in(v)]
    if isinstance(obj, list):
        return [s for v in obj for s in _strings_in(v)]
    return []


def split_statements(sql: str) -> list[str]:
    """Split on top-level semicolons, honouring quotes and comments."""
    parts, buf = [], []
    i, n = 0, len(sql)
    quote: str | None = None
    while i < n:
        ch = sql[i]
        if quote:
            buf.append(ch)
            if ch == quote:
                if i + 1 < n and sql[i + 1] == quote and quote != "]":
                    buf.append(sql[i + 1])
                    i += 1
                else:
                    quote = None
        elif ch in "'\"`":
            quote = ch
            buf.append(ch)
        elif ch == "[":
            quote = "]"
            buf.append(ch)
        elif sql.startswith("--", i):
            j = sql.find("\n", i)
            j = n if j == -1 else j
            buf.append(sql[i:j])
            i = j
            continue
        elif sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            j = n if j == -1 else j + 2
            buf.append(sql[i:j])
            i = j
            continue
        elif ch == ";":
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
        i += 1
    parts.append("".join(buf))
    return [p.strip() for p in parts if _has_code(p)]


def _has_code(fragment: str) -> bool:
    stripped = re.sub(r"--[^\n]*|/\*[\s\S]*?(\*/|$)", "", fragment)
    return bool(stripped.strip())


def parse_sql(text: str) -> tuple[SqlCandidate, list[str]]:
    events = []
    body, fenced = contracts.strip_fences(text)
    if fenced:
        events.append("sql: stripped code fences")
    if body.lower().startswith("sql\n"):
        body = body[4:].strip()
    statements = split_statements(body)
    if not statements:
        raise ContractViolation("sql", "empty SQL output")
    if len(statements) > 1:
        raise ContractViolation("sql", f"expected one statement, got {len(statements)}")
    sql = statements[0].rstrip() + ";"
    if not body.rstrip().endswith(";"):
        events.append("sql: appended terminating semicolon")
    return SqlCandidate(text=sql, terminated=True), events


# -- stages ------------------------------------------------------------------


def _request(stage: str, theta_text: str, version: int, example_id, **values) -> ModelRequest:
    system, user = render(theta_text, **values)
    return ModelRequest(stage_tag=stage, system_text=system, user_text=user, example_id=example_id, version=version)


def _evidence(evidence: str | None) -> str:
    return evidence.strip() if evidence and evidence.strip() else "None"


def run_stage1(question, proxy, theta_text, gateway, *, version=0, example_id=None, extra_evidence=None):
    req = _request(
        "stage1",
        theta_text,
        version,
        example_id,
        question=question,
        schema=render_schema(proxy),
        extra_evidence=_evidence(extra_evidence),
    )
    (selection, events), _ = contracts.invoke(gateway, req, lambda t: parse_stage1(t, proxy))
    return selection, events


def stage_db_info(proxy: ContextProxy, selection: SchemaSelection, extra_evidence: str | None = None) -> str:
    info = render_schema(proxy, selection.tables)
    if extra_evidence and extra_evidence.strip():
        info += f"\nEvidence: {extra_evidence.strip()}"
    return info


def run_stage2(question, stage1, extra_db_info, theta_text, gateway, *, proxy, version=0, example_id=None):
    req = _request(
        "stage2",
        theta_text,
        version,
        example_id,
        question=question,
        stage1=dumps(stage1.to_dict()),
        extra_db_info=extra_db_info,
        values=render_values(proxy, stage1.tables),
    )
    signals, _ = contracts.invoke(gateway, req, lambda t: parse_stage2(t, proxy))
    return signals


def run_plan(question, stage1, stage2, theta_text, gateway, *, proxy, version=0, example_id=None):
    req = _request(
        "plan",
        theta_text,
        version,
        example_id,
        question=question,
        stage1=dumps(stage1.to_dict()),
        stage2=dumps(stage2.to_dict()),
    )
    plan, _ = contracts.invoke(gateway, req, lambda t: parse_plan(t, proxy))
    return plan


def run_sql(plan, extra_db_info, extra_evidence, question, theta_text, gateway, *, version=0, example_id=None):
    req = _request(
        "sql",
        theta_text,
        version,
        example_id,
        semantic_plan=dumps(plan.to_dict()),
        extra_db_info=extra_db_info,
        extra_evidence=_evidence(extra_evidence),
        question=question,
    )
    (candidate, events), _ = contracts.invoke(gateway, req, parse_sql)
    return candidate, events


def _run_one(stage: str, state: PipelineState, proxy: ContextProxy, theta: StagePromptSet, gateway: Gateway):
    text, version = theta.text(stage), theta.version(stage)
    common = dict(version=version, example_id=state.example_id)
    if stage == "stage1":
        state.stage1, events = run_stage1(
            state.question, proxy, text, gateway, extra_evidence=state.extra_evidence, **common
        )
        state.events.extend(events)
    elif stage == "stage2":
        info = stage_db_info(proxy, state.stage1, state.extra_evidence)
        state.stage2 = run_stage2(state.question, state.stage1, info, text, gateway, proxy=proxy, **common)
    elif stage == "plan":
        state.plan = run_plan(state.question, state.stage1, state.stage2, text, gateway, proxy=proxy, **common)
    else:
        info = render_context(proxy, state.stage1)
        state.sql, events = run_sql(state.plan, info, state.extra_evidence, state.question, text, gateway, **common)
        state.events.extend(events)
    state.versions[stage] = version


def compose(
    question: str,
    proxy: ContextProxy,
    theta: StagePromptSet,
    gateway: Gateway,
    *,
    example_id: str | None = None,
    extra_evidence: str | None = None,
) -> PipelineState:
    """Run all four stages in order. Four gateway calls when no repair is needed."""
    state = PipelineState(question=question, example_id=example_id, extra_evidence=extra_evidence)
    return _run_from(state, "stage1", proxy, theta, gateway)


def rerun_from(
    state: PipelineState, stage: str, proxy: ContextProxy, theta: StagePromptSet, gateway: Gateway
) -> PipelineState:
    """Re-execute ``stage`` and everything downstream; earlier outputs are kept as-is."""
    if stage not in STAGE_ORDER:
        raise ValueError(f"unknown stage {stage!r}")
    for earlier in PIPELINE_STAGES[: STAGE_ORDER[stage]]:
        if state.output(earlier) is None:
            raise ValueError(f"cannot restart at {stage}: {earlier} has no output")
    new = state.copy()
    for later in PIPELINE_STAGES[STAGE_ORDER[stage] :]:
        setattr(new, later, None)
    return _run_from(new, stage, proxy, theta, gateway)


def _run_from(state, stage, proxy, theta, gateway) -> PipelineState:
    for s in PIPELINE_STAGES[STAGE_ORDER[stage] :]:
        try:
            _run_one(s, state, proxy, theta, gateway)
        except ContractViolation as exc:
            raise StageError(s, exc, state) from exc
    return state
