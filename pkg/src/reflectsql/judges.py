"""Unsupervised evaluation of SQL candidates.

Three judges contribute to an ``EvalReport``: the interpreter judge parses and
executes the candidate, the coverage check compares the plan's constraints with
the candidate's semantic signature, and the semantic judge (model-backed, or a
deterministic stub driven by coverage alone) decides intent preservation.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field

import sqlglot
from sqlglot import exp

from . import contracts
from .contracts import is_str_list, require_keys
from .errors import ContractViolation, UnparseableSQL
from .gateway import Gateway, ModelRequest
from .pipeline import SemanticPlan, SqlCandidate
from .prompts import load_template, render
from .proxy import ContextProxy, quote_ident, render_schema
from .sqlexec import DEFAULT_TIMEOUT_S, execute, open_readonly

JUDGE_MODES = ("stub", "model")

# operator class -> wording used in reports
OP_WORDS = {
    "gt": "greater",
    "ge": "at least",
    "lt": "less",
    "le": "at most",
    "eq": "equality",
    "ne": "not equal",
    "range": "range",
    "not_range": "not in range",
    "like": "like",
    "not_like": "not like",
    "in": "in",
    "not_in": "not in",
    "is_null": "is null",
    "not_null": "is not null",
}

_NEGATE = {
    "eq": "ne",
    "ne": "eq",
    "gt": "le",
    "ge": "lt",
    "lt": "ge",
    "le": "gt",
    "like": "not_like",
    "not_like": "like",
    "in": "not_in",
    "not_in": "in",
    "range": "not_range",
    "not_range": "range",
    "is_null": "not_null",
    "not_null": "is_null",
}

_FLIP = {"gt": "lt", "lt": "gt", "ge": "le", "le": "ge", "eq": "eq", "ne": "ne"}

_BINARY_OPS = {
    exp.EQ: "eq",
    exp.NEQ: "ne",
    exp.GT: "gt",
    exp.GTE: "ge",
    exp.LT: "lt",
    exp.LTE: "le",
    exp.Like: "like",
}

_AGG_TYPES = {exp.Count: "COUNT", exp.Sum: "SUM", exp.Avg: "AVG", exp.Min: "MIN", exp.Max: "MAX"}
AGG_FUNCS = ("COUNT", "SUM", "AVG", "MIN", "MAX")


# -- verdict types -----------------------------------------------------------


@dataclass
class InterpreterVerdict:
    parse_ok: bool
    exec_ok: bool
    error_message: str | None = None
    row_count: int | None = None
    table_populations: dict[str, int] = field(default_factory=dict)
    elapsed_ms: int = 0

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("elapsed_ms")
        return d


@dataclass
class SemanticVerdict:
    intent_preserved: bool
    missing_constraints: list[str] = field(default_factory=list)
    rationale: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    interpreter: InterpreterVerdict
    semantic: SemanticVerdict
    pass_syn: bool
    pass_sem: bool
    coverage_missing: list[str] = field(default_factory=list)

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "interpreter": self.interpreter.to_dict(timing),
            "semantic": self.semantic.to_dict(),
            "pass_syn": self.pass_syn,
            "pass_sem": self.pass_sem,
            "coverage_missing": list(self.coverage_missing),
        }

    @property
    def passed(self) -> bool:
        return self.pass_syn and self.pass_sem


# -- interpreter judge -------------------------------------------------------


def judge_syntax(
    candidate: SqlCandidate, db_path: str | os.PathLike, timeout_s: float = DEFAULT_TIMEOUT_S
) -> InterpreterVerdict:
    conn = open_readonly(db_path)
    try:
        result = execute(db_path, candidate.text, timeout_s=timeout_s, conn=conn)
        if result.ok:
            verdict = InterpreterVerdict(True, True, None, len(result.rows), elapsed_ms=result.elapsed_ms)
        else:
            verdict = InterpreterVerdict(not result.parse_error, False, result.error, elapsed_ms=result.elapsed_ms)
        if verdict.parse_ok:
            verdict.table_populations = _populations(conn, referenced_tables(candidate.text))
        return verdict
    finally:
        conn.close()


def referenced_tables(sql: str) -> list[str]:
    try:
        tree = sqlglot.parse_one(sql, read="sqlite")
    except sqlglot.errors.SqlglotError:
        names = re.findall(r"\b(?:from|join)\s+([\"`\[]?[\w ]+?[\"`\]]?)(?=\s|,|;|$)", sql, re.IGNORECASE)
        return sorted({n.strip('"`[] ') for n in names})
    ctes = {c.alias_or_name.lower() for c in tree.find_all(exp.CTE)}
    return sorted({t.name for t in tree.find_all(exp.Table) if t.name and t.name.lower() not in ctes})


def _populations(conn, tables: list[str]) -> dict[str, int]:
    existing = {
        r[0].lower(): r[0]
        for r in conn.execute("SELECT name FROM sqlite_master WHERE type IN ('table', 'view')")
    }
    out = {}
    for t in tables:
        canon = existing.get(t.lower())
        if canon is None:
            continue
        try:
            out[canon] = conn.execute(f"SELECT COUNT(*) FROM {quote_ident(canon)}").fetchone()[0]
        except Exception:
            continue
    return dict(sorted(out.items()))


# -- semantic signature ------------------------------------------------------


@dataclass
class Signature:
    tables: set[str] = field(default_factory=set)
    projections: list[str] = field(default_factory=list)
    predicates: set[tuple] = field(default_factory=set)
    aggregates: set[tuple[str, str]] = field(default_factory=set)
    grouping: set[str] = field(default_factory=set)
    ordering: list[tuple[str, str]] = field(default_factory=list)
    limit: int | None = None
    distinct: bool = False
    join_pairs: set[frozenset] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "tables": sorted(self.tables),
            "projections": list(self.projections),
            "predicates": sorted([list(p) for p in self.predicates], key=repr),
            "aggregates": sorted([list(a) for a in self.aggregates]),
            "grouping": sorted(self.grouping),
            "ordering": [list(o) for o in self.ordering],
            "limit": self.limit,
            "distinct": self.distinct,
        }

    def implied_predicates(self) -> set[tuple]:
        """Predicates plus the bound pairs implied by each BETWEEN."""
        out = set(self.predicates)
        for col, op, lit in self.predicates:
            if op == "range":
                out.add((col, "ge", lit[0]))
                out.add((col, "le", lit[1]))
        return out


def norm_literal(value) -> str | tuple:
    """Surface-independent literal form: numbers canonicalized, strings unquoted."""
    if isinstance(value, (tuple, list)):
        return tuple(norm_literal(v) for v in value)
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        return "1" if value else "0"
    text = str(value).strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        text = text[1:-1].replace(text[0] * 2, text[0])
        return text
    try:
        num = float(text)
    except ValueError:
        return text
    if num != num:
        return text
    if num.is_integer() and abs(num) < 1e18:
        return str(int(num))
    return repr(num)


def _literal_value(node) -> tuple[bool, object]:
    """(is_literal, value) for literal-like nodes."""
    if isinstance(node, exp.Paren):
        return _literal_value(node.this)
    if isinstance(node, exp.Literal):
        return True, node.this if node.is_string else node.this
    if isinstance(node, exp.Neg) and isinstance(node.this, exp.Literal) and not node.this.is_string:
        return True, "-" + node.this.this
    if isinstance(node, exp.Boolean):
        return True, bool(node.this)
    if isinstance(node, exp.Null):
        return True, None
    return False, None


def _operand_key(node) -> str | None:
    """Normalized key for the non-literal side of a comparison."""
    if isinstance(node, exp.Paren):
        return _operand_key(node.this)
    if isinstance(node, exp.Column):
        return node.name.lower()
    for cls, fname in _AGG_TYPES.items():
        if isinstance(node, cls):
            return f"{fname}({_agg_target(node)})"
    return None


def _agg_target(node) -> str:
    inner = node.this
    if isinstance(inner, exp.Distinct):
        inner = inner.expressions[0] if inner.expressions else None
    if inner is None or isinstance(inner, exp.Star):
        return "*"
    if isinstance(inner, exp.Column):
        return inner.name.lower()
    return "expr"


def _negated(node) -> bool:
    parent = node.parent
    while isinstance(parent, exp.Paren):
        parent = parent.parent
    return isinstance(parent, exp.Not) or bool(node.args.get("negate"))


def _predicates(tree) -> tuple[set[tuple], set[frozenset]]:
    preds: set[tuple] = set()
    joins: set[frozenset] = set()
    for node in tree.walk():
        op = None
        for cls, name in _BINARY_OPS.items():
            if type(node) is cls:
                op = name
                break
        if op is not None:
            left, right = node.this, node.expression
            lkey, rkey = _operand_key(left), _operand_key(right)
            lit_l, lval = _literal_value(left)
            lit_r, rval = _literal_value(right)
            if lkey and lit_r:
                triple = (lkey, op, norm_literal(rval))
            elif rkey and lit_l and op in _FLIP:
                triple = (rkey, _FLIP[op], norm_literal(lval))
            else:
                if isinstance(left, exp.Column) and isinstance(right, exp.Column) and op == "eq":
                    joins.add(frozenset((left.sql(), right.sql())))
                continue
            if _negated(node):
                triple = (triple[0], _NEGATE[triple[1]], triple[2])
            preds.add(triple)
        elif isinstance(node, exp.In):
            key = _operand_key(node.this)
            vals = [_literal_value(v) for v in node.expressions]
            if key and vals and all(ok for ok, _ in vals):
                triple = (key, "in", tuple(sorted(norm_literal(v) for _, v in vals)))
                if _negated(node):
                    triple = (key, "not_in", triple[2])
                preds.add(triple)
        elif isinstance(node, exp.Between):
            key = _operand_key(node.this)
            lo_ok, lo = _literal_value(node.args.get("low"))
            hi_ok, hi = _literal_value(node.args.get("high"))
            if key and lo_ok and hi_ok:
                op = "not_range" if _negated(node) else "range"
                preds.add((key, op, (norm_literal(lo), norm_literal(hi))))
        elif isinstance(node, exp.Is):
            key = _operand_key(node.this)
            if key and isinstance(node.expression, exp.Null):
                preds.add((key, "not_null" if _negated(node) else "is_null", "NULL"))
    return preds, joins


def extract_signature(candidate: SqlCandidate | str) -> Signature:
    sql = candidate.text if isinstance(candidate, SqlCandidate) else candidate
    try:
        tree = sqlglot.parse_one(sql, read="sqlite")
    except sqlglot.errors.SqlglotError as exc:
        raise UnparseableSQL(str(exc)) from exc
    if tree is None:
        raise UnparseableSQL("empty statement")
    sig = Signature()
    ctes = {c.alias_or_name.lower() for c in tree.find_all(exp.CTE)}
    sig.tables = {t.name.lower() for t in tree.find_all(exp.Table) if t.name and t.name.lower() not in ctes}
    sig.predicates, sig.join_pairs = _predicates(tree)
    for cls, fname in _AGG_TYPES.items():
        for node in tree.find_all(cls):
            sig.aggregates.add((fname, _agg_target(node)))
    for sel in tree.find_all(exp.Select):
        group = sel.args.get("group")
        if group is not None:
            for g in group.expressions:
                key = _operand_key(g)
                sig.grouping.add(key if key else g.sql().lower())
    for order in tree.find_all(exp.Order):
        for o in order.expressions:
            key = _operand_key(o.this) or o.this.sql().lower()
            sig.ordering.append((key, "desc" if o.args.get("desc") else "asc"))
    top = tree
    limit = top.args.get("limit")
    if limit is not None:
        ok, val = _literal_value(limit.expression)
        if ok:
            try:
                sig.limit = int(val)
            except (TypeError, ValueError):
                sig.limit = None
    head = top
    while isinstance(head, exp.SetOperation):
        head = head.this
    if isinstance(head, exp.Select):
        sig.distinct = bool(head.args.get("distinct"))
        for e in head.expressions:
            target = e.this if isinstance(e, exp.Alias) else e
            sig.projections.append(_operand_key(target) or target.sql().lower())
    return sig


# -- coverage check ----------------------------------------------------------

_OP_PHRASES = [
    ("greater than or equal to", "ge"),
    ("less than or equal to", "le"),
    ("not equal to", "ne"),
    ("greater than", "gt"),
    ("more than", "gt"),
    ("less than", "lt"),
    ("fewer than", "lt"),
    ("at least", "ge"),
    ("at most", "le"),
    ("no less than", "ge"),
    ("no more than", "le"),
    ("not equal", "ne"),
    ("equal to", "eq"),
    ("not in", "not_in"),
    ("not like", "not_like"),
    ("is not null", "not_null"),
    ("is null", "is_null"),
    ("greater", "gt"),
    ("after", "gt"),
    ("above", "gt"),
    ("less", "lt"),
    ("before", "lt"),
    ("below", "lt"),
    ("equality", "eq"),
    ("equals", "eq"),
    ("between", "range"),
    ("like", "like"),
    ("in", "in"),
    ("is", "eq"),
    (">=", "ge"),
    ("<=", "le"),
    ("!=", "ne"),
    ("<>", "ne"),
    ("==", "eq"),
    (">", "gt"),
    ("<", "lt"),
    ("=", "eq"),
]

_SYMBOL_OPS = {">=", "<=", "!=", "<>", "==", ">", "<", "="}
_OPERAND = r"(?P<col>(?:[A-Za-z_][\w]*\s*\([^)]*\))|[\"`\[]?[\w.]+[\"`\]]?)"


def normalize_op(word: str) -> str | None:
    word = " ".join(word.lower().split())
    for phrase, op in _OP_PHRASES:
        if word == phrase:
            return op
    return None


def _operand_from_text(text: str) -> str:
    text = text.strip()
    m = re.fullmatch(r"([A-Za-z_]\w*)\s*\(\s*(distinct\s+)?([^)]*)\)", text, re.IGNORECASE)
    if m and m.group(1).upper() in AGG_FUNCS:
        target = m.group(3).strip() or "*"
        target = "*" if target == "*" else target.split(".")[-1].strip('"`[]').lower()
        return f"{m.group(1).upper()}({target})"
    return text.split(".")[-1].strip('"`[]').lower()


def _split_values(text: str) -> list[str]:
    text = text.strip()
    if text.startswith("(") and text.endswith(")"):
        text = text[1:-1]
    return [v.strip() for v in re.split(r",(?=(?:[^']*'[^']*')*[^']*$)", text) if v.strip()]


def parse_filter(item) -> tuple | None:
    """Turn a plan filter (string or object) into a predicate triple, if possible."""
    if isinstance(item, dict):
        col = item.get("column") or item.get("attribute") or item.get("field")
        op_word = item.get("operator") or item.get("op") or item.get("comparison")
        if not isinstance(col, str) or not isinstance(op_word, str):
            return None
        op = normalize_op(op_word)
        if op is None:
            return None
        value = item.get("value")
        if op == "range":
            if isinstance(value, (list, tuple)) and len(value) == 2:
                return (_operand_from_text(col), op, (norm_literal(value[0]), norm_literal(value[1])))
            return None
        if op in ("in", "not_in"):
            vals = value if isinstance(value, list) else _split_values(str(value))
            return (_operand_from_text(col), op, tuple(sorted(norm_literal(v) for v in vals)))
        if op in ("is_null", "not_null"):
            return (_operand_from_text(col), op, "NULL")
        return (_operand_from_text(col), op, norm_literal(value))
    if not isinstance(item, str):
        return None
    text = item.strip().rstrip(";")
    m = re.fullmatch(_OPERAND + r"\s+(?:is\s+)?between\s+(?P<lo>.+?)\s+and\s+(?P<hi>.+)", text, re.IGNORECASE)
    if m:
        return (_operand_from_text(m.group("col")), "range", (norm_literal(m.group("lo")), norm_literal(m.group("hi"))))
    m = re.fullmatch(_OPERAND + r"\s+(?P<op>is not null|is null)", text, re.IGNORECASE)
    if m:
        return (_operand_from_text(m.group("col")), normalize_op(m.group("op")), "NULL")
    for phrase, op in _OP_PHRASES:
        if op in ("range", "is_null", "not_null"):
            continue
        pat = re.escape(phrase) if phrase in _SYMBOL_OPS else r"\s" + re.escape(phrase).replace(r"\ ", r"\s+") + r"\s"
        m = re.fullmatch(_OPERAND + r"\s*(?:" + pat + r")\s*(?P<val>.+)", text, re.IGNORECASE)
        if m:
            value = m.group("val").strip()
            if op in ("in", "not_in"):
                return (_operand_from_text(m.group("col")), op, tuple(sorted(norm_literal(v) for v in _split_values(value))))
            return (_operand_from_text(m.group("col")), op, norm_literal(value))
    return None


def _describe(triple: tuple) -> str:
    col, op, lit = triple
    if isinstance(lit, tuple):
        lit = " and ".join(lit) if op in ("range", "not_range") else "(" + ", ".join(lit) + ")"
    if op in ("is_null", "not_null"):
        return f"{col} {OP_WORDS[op]}"
    return f"{col} {OP_WORDS[op]} {lit}"


def plan_aggregations(aggregations) -> list[tuple[str, str | None]]:
    """(FUNCTION, target-or-None) pairs named by a plan's aggregation block."""
    out: list[tuple[str, str | None]] = []

    def visit(key, value):
        if isinstance(value, dict):
            fn = value.get("function") or value.get("func") or value.get("type") or value.get("agg")
            if isinstance(fn, str) and fn.upper() in AGG_FUNCS:
                target = value.get("target") or value.get("column") or value.get("attribute")
                out.append((fn.upper(), target if isinstance(target, str) else None))
                return
            for k, v in value.items():
                visit(k, v)
            return
        if isinstance(key, str) and key.upper() in AGG_FUNCS:
            targets = value if isinstance(value, list) else [value]
            for t in targets:
                out.append((key.upper(), t if isinstance(t, str) else None))
            return
        if isinstance(value, str):
            m = re.match(r"\s*(COUNT|SUM|AVG|MIN|MAX)\b\s*(?:\(\s*([^)]*)\))?", value, re.IGNORECASE)
            if m:
                out.append((m.group(1).upper(), m.group(2)))
        elif isinstance(value, list):
            for v in value:
                visit(key, v)

    if isinstance(aggregations, dict):
        for k, v in aggregations.items():
            visit(k, v)
    elif aggregations is not None:
        visit(None, aggregations)
    return out


def _column_like(text: str | None) -> str | None:
    if not text:
        return None
    text = text.strip()
    if text == "*" or not re.fullmatch(r"[\"`\[]?[\w.]+[\"`\]]?", text):
        return None
    return text.split(".")[-1].strip('"`[]').lower()


def _order_term(item) -> tuple[str, str] | None:
    if isinstance(item, dict):
        col = item.get("column") or item.get("attribute") or item.get("field")
        direction = str(item.get("direction") or item.get("order") or "asc")
        if not isinstance(col, str):
            return None
        return _operand_from_text(col), "desc" if direction.lower().startswith("desc") else "asc"
    if not isinstance(item, str):
        return None
    m = re.fullmatch(r"\s*(?P<col>.+?)(?:\s+(?P<dir>asc|desc|ascending|descending))?\s*", item, re.IGNORECASE)
    if not m:
        return None
    direction = (m.group("dir") or "asc").lower()
    return _operand_from_text(m.group("col")), "desc" if direction.startswith("desc") else "asc"


def coverage_check(plan: SemanticPlan, signature: Signature) -> list[str]:
    """Plan constraints with no matching element in the SQL signature.

    Matching ignores qualification and surface form; operator classes must agree
    (``greater`` and ``at least`` are different constraints).
    """
    missing: list[str] = []
    have = signature.implied_predicates()
    for item in plan.filters:
        triple = parse_filter(item)
        if triple is None:
            continue
        if triple in have:
            continue
        col, op, lit = triple
        if op == "range" and (col, "ge", lit[0]) in have and (col, "le", lit[1]) in have:
            continue
        missing.append(f"filter: {_describe(triple)}")
    for fn, target in plan_aggregations(plan.aggregations):
        col = _column_like(target)
        if fn == "COUNT" or col is None:
            ok = any(f == fn for f, _ in signature.aggregates)
            label = f"aggregation: {fn}"
        else:
            ok = (fn, col) in signature.aggregates
            label = f"aggregation: {fn}({col})"
        if not ok and label not in missing:
            missing.append(label)
    for g in plan.grouping:
        if not isinstance(g, str):
            continue
        key = _operand_from_text(g)
        if key not in signature.grouping:
            missing.append(f"grouping: {g}")
    for o in plan.order:
        term = _order_term(o)
        if term is None:
            continue
        if term not in signature.ordering:
            missing.append(f"order: {term[0]} {term[1].upper()}")
    if plan.limit is not None and signature.limit != plan.limit:
        missing.append(f"limit: {plan.limit}")
    if plan.distinct and not signature.distinct:
        missing.append("distinct")
    return missing


# -- semantic judge ----------------------------------------------------------


def parse_judge(text: str) -> SemanticVerdict:
    doc = contracts.parse_json_object("judge", text)
    require_keys("judge", doc, ("intent_preserved", "missing_constraints", "rationale"))
    problems = []
    if not isinstance(doc["intent_preserved"], bool):
        problems.append("intent_preserved must be a boolean")
    if not is_str_list(doc["missing_constraints"]):
        problems.append("missing_constraints must be a list of strings")
    if not isinstance(doc["rationale"], str):
        problems.append("rationale must be a string")
    if not problems and doc["intent_preserved"] and doc["missing_constraints"]:
        problems.append("intent_preserved is true but missing_constraints is not empty")
    if problems:
        raise ContractViolation("judge", problems)
    return SemanticVerdict(doc["intent_preserved"], list(doc["missing_constraints"]), doc["rationale"])


def judge_semantics(
    question: str,
    candidate: SqlCandidate,
    plan: SemanticPlan | None,
    proxy: ContextProxy,
    gateway: Gateway | None,
    *,
    coverage_missing: list[str] | None = None,
    mode: str = "stub",
    example_id: str | None = None,
    iteration: int = 0,
) -> SemanticVerdict:
    if coverage_missing is None:
        coverage_missing = coverage_check(plan, extract_signature(candidate)) if plan else []
    if mode == "stub":
        if coverage_missing:
            return SemanticVerdict(False, list(coverage_missing), "plan constraints missing from the SQL")
        return SemanticVerdict(True, [], "all plan constraints covered")
    if mode != "model":
        raise ValueError(f"unknown judge mode {mode!r}")
    system, user = render(
        load_template("judge"),
        question=question,
        schema=render_schema(proxy),
        plan=json.dumps(plan.to_dict() if plan else None, indent=2, ensure_ascii=False),
        sql=candidate.text,
        coverage=json.dumps(coverage_missing, ensure_ascii=False),
    )
    request = ModelRequest("judge", system, user, example_id=example_id, version=iteration)
    verdict, _ = contracts.invoke(gateway, request, parse_judge)
    return verdict


def evaluate(
    candidate: SqlCandidate,
    db_path: str | os.PathLike,
    question: str,
    plan: SemanticPlan | None,
    proxy: ContextProxy,
    gateway: Gateway | None = None,
    *,
    mode: str = "stub",
    semantic: bool = True,
    example_id: str | None = None,
    iteration: int = 0,
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> EvalReport:
    """Combine the judges. The semantic judge only runs on candidates that execute."""
    interp = judge_syntax(candidate, db_path, timeout_s=timeout_s)
    if not interp.exec_ok:
        reason = "syntax failed" if not interp.parse_ok else "execution failed"
        return EvalReport(interp, SemanticVerdict(False, [], reason), False, False, [])
    if not semantic:
        return EvalReport(interp, SemanticVerdict(True, [], "semantic checker disabled"), True, True, [])
    try:
        missing = coverage_check(plan, extract_signature(candidate)) if plan else []
    except UnparseableSQL as exc:
        missing = [f"signature: unparseable ({exc.args[0].splitlines()[0]})"]
    try:
        verdict = judge_semantics(
            question,
            candidate,
            plan,
            proxy,
            gateway,
            coverage_missing=missing,
            mode=mode,
            example_id=example_id,
            iteration=iteration,
        )
    except ContractViolation as exc:
        verdict = SemanticVerdict(False, [], f"judge contract violation: {exc}")
    return EvalReport(interp, verdict, True, verdict.intent_preserved and not missing, missing)
