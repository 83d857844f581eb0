import json
import re
import tempfile
from pathlib import Path

import pytest
from helpers import (
    company,
    literal,
    make_db,
    plan_dict,
    plan_json,
    stage1_json,
    stage2_json,
)
from hypothesis import given, settings
from hypothesis import strategies as st

from reflectsql import contracts
from reflectsql.errors import ContractViolation, StageError
from reflectsql.gateway import Gateway, ModelRequest, ScriptedBackend
from reflectsql.pipeline import (
    compose,
    parse_plan,
    parse_sql,
    parse_stage1,
    parse_stage2,
    rerun_from,
    run_sql,
    run_stage1,
    split_statements,
)
from reflectsql.prompts import (
    REQUIRED_PLACEHOLDERS,
    StagePromptSet,
    load_template,
    placeholders,
    render,
    theta_problems,
)
from reflectsql.proxy import build_proxy

HEAD_SQL = "SELECT name, born_state, age FROM head ORDER BY age ASC;"


@pytest.fixture
def f1_proxy(tmp_path):
    db = make_db(
        tmp_path / "formula_1.sqlite",
        "CREATE TABLE races (race_id INTEGER PRIMARY KEY, year INTEGER, name TEXT);"
        "CREATE TABLE constructors (constructor_id INTEGER PRIMARY KEY, name TEXT);"
        "CREATE TABLE results (result_id INTEGER PRIMARY KEY, race_id INTEGER REFERENCES races(race_id), "
        "constructor_id INTEGER REFERENCES constructors(constructor_id), points REAL);",
    )
    return build_proxy(db)


@pytest.fixture
def head_proxy(tmp_path):
    db = make_db(
        tmp_path / "department_management.sqlite",
        "CREATE TABLE head (head_id INTEGER PRIMARY KEY, name TEXT, born_state TEXT, age REAL);"
        "INSERT INTO head VALUES (1, 'Tiger Woods', 'Alabama', 67), (2, 'K. J. Choi', 'Alabama', 69);",
    )
    return build_proxy(db)


HEAD_PLAN = plan_dict(
    intent="list name, born state and age of heads ordered by age",
    entities=["head"],
    attributes=["name", "born_state", "age"],
    order=["age ASC"],
)


def head_backend(sql=HEAD_SQL):
    return ScriptedBackend(
        {
            ("stage1",): stage1_json(["head"], ["head.name", "head.born_state", "head.age"]),
            ("stage2",): stage2_json(),
            ("plan",): json.dumps(HEAD_PLAN),
            ("sql",): sql,
        }
    )


# -- prompts -------------------------------------------------------------------


def test_default_templates_have_required_placeholders():
    theta = StagePromptSet.defaults("x")
    assert theta_problems(theta) == []
    for stage, needed in REQUIRED_PLACEHOLDERS.items():
        assert set(needed) <= set(placeholders(theta.text(stage)))


def test_render_splits_invocation_and_fills_everything():
    system, user = render(load_template("sql"), semantic_plan="PLAN", extra_db_info="INFO", extra_evidence="None", question="Q?")
    assert "Q?" in user and "PLAN" in user
    assert not re.search(r"\{[a-z_0-9]+\}", system + user)


def test_render_missing_value_raises():
    with pytest.raises(KeyError):
        render(load_template("stage1"), question="q")


def test_render_does_not_rescan_values():
    system, user = render("Task\nTask Invocation\nQuestion: {question}", question="{stage1} {}")
    assert user.strip() == "Question: {stage1} {}"


def test_theta_round_trip(tmp_path):
    theta = StagePromptSet.defaults("db")
    path = theta.save(tmp_path / "t.json")
    assert StagePromptSet.load(path).serialize() == theta.serialize()


# -- contracts -----------------------------------------------------------------


def test_repair_is_single_and_note_not_persisted():
    b = ScriptedBackend({("stage1",): ["not json at all", stage1_json(["races"], [])]})
    g = Gateway(b)
    r = ModelRequest("stage1", "sys", "user")
    value, calls = contracts.invoke(g, r, lambda t: contracts.parse_json_object("stage1", t))
    assert calls == 2 and value["tables"] == ["races"]
    assert contracts.REPAIR_NOTE in g.log[1].user_text
    assert contracts.REPAIR_NOTE not in g.log[0].user_text


def test_repair_failure_raises():
    g = Gateway(ScriptedBackend({("stage1",): "nope"}))
    with pytest.raises(ContractViolation):
        contracts.invoke(g, ModelRequest("stage1", "s", "u"), lambda t: contracts.parse_json_object("stage1", t))
    assert g.total_calls == 2


# -- stage 1 -------------------------------------------------------------------


def test_stage1_constructor_example(f1_proxy):
    text = stage1_json(
        ["results", "races", "constructors"],
        ["results.constructor_id", "results.points", "races.year", "constructors.name"],
    )
    sel, events = parse_stage1(text, f1_proxy)
    assert sel.tables == ["results", "races", "constructors"]
    assert sel.attributes[:4] == ["results.constructor_id", "results.points", "races.year", "constructors.name"]
    # primary keys are added, not rejected
    assert "races.race_id" in sel.attributes
    assert any("primary key" in e for e in events)


def test_stage1_repair_from_prose(f1_proxy):
    g = Gateway(ScriptedBackend({("stage1",): ["Sure! The tables are results.", stage1_json(["results"], [])]}))
    sel, _ = run_stage1("q", f1_proxy, load_template("stage1"), g)
    assert sel.tables == ["results"] and g.total_calls == 2


@pytest.mark.parametrize(
    "doc",
    [
        {"tables": ["drivers"], "attributes": []},
        {"tables": ["results"], "attributes": ["points"]},
        {"tables": ["results"]},
        {"tables": ["results"], "attributes": [], "extra": 1},
        {"tables": [], "attributes": []},
    ],
)
def test_stage1_rejections(f1_proxy, doc):
    with pytest.raises(ContractViolation):
        parse_stage1(json.dumps(doc), f1_proxy)


# -- stage 2 -------------------------------------------------------------------


def test_stage2_comparative_literal(company_proxy):
    text = stage2_json([literal("employee.hire_year", "after 2019", "comparative", "greater", "multiple", 0.8)])
    sig = parse_stage2(text, company_proxy)
    lit = sig.literals[0]
    assert (lit.raw_expression, lit.comparison_type, lit.direction) == ("after 2019", "comparative", "greater")


def test_stage2_empty_is_valid(company_proxy):
    sig = parse_stage2(stage2_json(), company_proxy)
    assert sig.literals == [] and sig.filter_candidates == [] and sig.notes is None


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("notes"),
        lambda d: d.update(extra=True),
        lambda d: d["literals"][0].update(comparison_type="fuzzy"),
        lambda d: d["literals"][0].update(cardinality_hint="many"),
        lambda d: d["literals"][0].update(direction="up"),
        lambda d: d["literals"][0].update(comparison_type="literal", direction="greater"),
        lambda d: d["literals"][0].update(confidence=1.5),
        lambda d: d["literals"][0].update(raw_expression="hire_year > 2019"),
        lambda d: d["literals"][0].pop("confidence"),
        lambda d: d["literals"][0].update(column_candidate="employee.salary"),
    ],
)
def test_stage2_rejections(company_proxy, mutate):
    doc = json.loads(stage2_json([literal("employee.hire_year", "after 2019", "comparative", "greater")]))
    mutate(doc)
    with pytest.raises(ContractViolation):
        parse_stage2(json.dumps(doc), company_proxy)


# -- plan ------------------------------------------------------------------------


def test_plan_head_example(head_proxy):
    plan = parse_plan(json.dumps(HEAD_PLAN), head_proxy)
    assert plan.entities == ["head"] and plan.order == ["age ASC"] and plan.distinct is False


def test_plan_count_intent(company_proxy):
    plan = parse_plan(
        plan_json(entities=["employee"], aggregations={"COUNT": ["*"]}, cardinality="single"), company_proxy
    )
    assert "COUNT" in plan.aggregations and plan.cardinality == "single"


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("distinct"),
        lambda d: d.update(surplus=1),
        lambda d: d.update(cardinality="lots"),
        lambda d: d.update(feasibility_checked=False),
        lambda d: d.update(entities=["nonexistent"]),
        lambda d: d.update(attributes=["salary"]),
        lambda d: d.update(limit=0),
        lambda d: d.update(derived=["SELECT name FROM head"]),
    ],
)
def test_plan_rejections(head_proxy, mutate):
    doc = dict(HEAD_PLAN)
    mutate(doc)
    with pytest.raises(ContractViolation):
        parse_plan(json.dumps(doc), head_proxy)


# -- sql ---------------------------------------------------------------------------


def test_sql_fences_stripped():
    cand, events = parse_sql("```sql\n" + HEAD_SQL + "\n```")
    assert cand.text == HEAD_SQL and "sql: stripped code fences" in events


def test_sql_multi_statement_rejected():
    with pytest.raises(ContractViolation):
        parse_sql("SELECT 1; SELECT 2;")


def test_sql_semicolon_in_string_is_one_statement():
    assert split_statements("SELECT ';' AS x; -- trailing\n") == ["SELECT ';' AS x"]


def test_run_sql_head_example(head_proxy):
    g = Gateway(ScriptedBackend({("sql",): HEAD_SQL}))
    from reflectsql.pipeline import SemanticPlan

    cand, _ = run_sql(SemanticPlan.from_dict(HEAD_PLAN), "info", None, "List...", load_template("sql"), g)
    assert cand.text == HEAD_SQL


# -- compose / restart -------------------------------------------------------------


def test_compose_happy_path(head_proxy):
    g = Gateway(head_backend())
    state = compose("List the heads", head_proxy, StagePromptSet.defaults(), g)
    assert g.total_calls == 4
    assert state.sql.text == HEAD_SQL and state.plan.order == ["age ASC"]


def test_compose_deterministic(head_proxy):
    a = compose("q", head_proxy, StagePromptSet.defaults(), Gateway(head_backend()))
    b = compose("q", head_proxy, StagePromptSet.defaults(), Gateway(head_backend()))
    assert a.serialize() == b.serialize()


def test_stage2_failure_keeps_stage1(head_proxy):
    b = head_backend()
    b.add(("stage2",), ["{}", "{}"])
    with pytest.raises(StageError) as info:
        compose("q", head_proxy, StagePromptSet.defaults(), Gateway(b))
    assert info.value.stage == "stage2"
    assert info.value.state.stage1.tables == ["head"]


@pytest.mark.parametrize("stage,calls", [("stage1", 4), ("stage2", 3), ("plan", 2), ("sql", 1)])
def test_rerun_from_counts_and_preserves_upstream(head_proxy, stage, calls):
    theta = StagePromptSet.defaults()
    state = compose("q", head_proxy, theta, Gateway(head_backend()))
    g = Gateway(head_backend())
    new = rerun_from(state, stage, head_proxy, theta, g)
    assert g.total_calls == calls
    order = ["stage1", "stage2", "plan", "sql"]
    for earlier in order[: order.index(stage)]:
        assert new.output(earlier) is state.output(earlier)


def test_rendered_requests_have_no_placeholders(head_proxy):
    g = Gateway(head_backend())
    compose("q {not_a_placeholder}", head_proxy, StagePromptSet.defaults(), g)
    for r in g.log:
        text = (r.system_text + r.user_text).replace("{not_a_placeholder}", "")
        for name in ("question", "schema", "stage1", "stage2", "semantic_plan", "extra_db_info", "extra_evidence", "values"):
            assert "{" + name + "}" not in text


@settings(max_examples=60, deadline=None)
@given(
    st.dictionaries(
        st.sampled_from(["tables", "attributes", "extra", "Tables"]),
        st.one_of(st.none(), st.integers(), st.text(max_size=5), st.lists(st.text(max_size=8), max_size=3)),
        max_size=4,
    )
)
def test_stage1_never_partially_accepts(doc):
    proxy = _shared_company_proxy()
    try:
        sel, _ = parse_stage1(json.dumps(doc), proxy)
    except ContractViolation:
        return
    assert set(doc) == {"tables", "attributes"}
    assert all(proxy.resolve_table(t) for t in sel.tables)
    assert all(proxy.resolve_column(a) for a in sel.attributes)


_CACHE = {}


def _shared_company_proxy():
    if "p" not in _CACHE:
        _CACHE["p"] = build_proxy(company(Path(tempfile.mkdtemp()) / "c.sqlite"))
    return _CACHE["p"]
