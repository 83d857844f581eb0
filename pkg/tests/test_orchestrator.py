import json

import pytest
from helpers import (
    RATIO_GOLD,
    RATIO_QUESTION,
    RATIO_T2,
    add_happy,
    appending_refiner,
    critic_json,
    judge_json,
    ratio_backend,
)
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from reflectsql.bench import execution_accuracy
from reflectsql.gateway import Gateway, ScriptedBackend
from reflectsql.orchestrator import LoopConfig, Query, solve, solve_set
from reflectsql.prompts import StagePromptSet

GOOD = "SELECT name FROM employee;"
BAD = "SELECT nme FROM employee;"
RESTART_COST = {"stage1": 4, "stage2": 3, "stage3": 2}


def run(backend, db, proxy, **cfg):
    g = Gateway(backend)
    out = solve("q", db, proxy, StagePromptSet.defaults("company"), LoopConfig(**cfg), g, example_id="x")
    return out, g


def test_ratio_refinement_replay(schools_db, schools_proxy):
    g = Gateway(ratio_backend())
    cfg = LoopConfig(budget_t=3, judge_mode="model", critic_mode="model")
    out = solve(RATIO_QUESTION, schools_db, schools_proxy, StagePromptSet.defaults("california_schools"), cfg, g, example_id="65")
    assert out.solved and out.iterations_used == 2
    assert out.final_sql.text == RATIO_T2
    assert execution_accuracy(out.final_sql.text, RATIO_GOLD, schools_db)
    assert [r.restart_stage for r in out.trace] == ["plan", "plan", None]
    assert [r.refined_stage for r in out.trace] == ["sql", "sql", None]
    assert out.theta.version("sql") == 2 and out.commits == 2
    assert g.calls == {"stage1": 1, "stage2": 1, "plan": 3, "sql": 3, "judge": 3, "critic": 2, "refiner": 2}


def test_early_stop_four_calls(company_db, company_proxy):
    out, g = run(add_and_return(GOOD), company_db, company_proxy)
    assert out.solved and out.iterations_used == 0 and len(out.trace) == 1
    assert g.total_calls == 4 and out.trace[0].critique is None


def add_and_return(sql, **kw):
    b = ScriptedBackend()
    add_happy(b, "x", sql, **kw)
    return b


def never_passing(blame="stage3"):
    b = add_and_return(GOOD)
    b.add(("judge",), judge_json(False, ["something is missing"]))
    b.add(("critic",), critic_json(blame, [f"{blame}: wrong"], []))
    b.add(("refiner",), appending_refiner("Try harder."))
    return b


def test_budget_one_never_passing(company_db, company_proxy):
    out, _ = run(never_passing(), company_db, company_proxy, budget_t=1, judge_mode="model", critic_mode="model")
    assert not out.solved and out.iterations_used == 1 and len(out.trace) == 2
    assert out.final_sql == out.trace[-1].candidate


@pytest.mark.parametrize("budget", [0, 1, 3])
@pytest.mark.parametrize("blame", ["stage1", "stage2", "stage3"])
def test_call_accounting(company_db, company_proxy, budget, blame):
    out, g = run(never_passing(blame), company_db, company_proxy, budget_t=budget, judge_mode="model", critic_mode="model")
    # Per cycle: rerun stages, one critic call, one refiner call; one judge per evaluation.
    expected = 4 + budget * (RESTART_COST[blame] + 1 + 1) + (budget + 1)
    assert g.total_calls == expected
    assert out.commits == budget


@pytest.mark.parametrize("budget", [0, 1, 3])
def test_call_accounting_no_critic(company_db, company_proxy, budget):
    out, g = run(add_and_return(BAD), company_db, company_proxy, budget_t=budget, ablations={"no-critic"})
    assert g.total_calls == 4 + budget
    assert g.calls.get("critic", 0) == 0 and g.calls.get("refiner", 0) == 0
    assert out.commits == 0 and len(out.trace) == budget + 1


@pytest.mark.parametrize("budget", [0, 1, 3])
def test_call_accounting_no_semantic_checker(company_db, company_proxy, budget):
    out, g = run(never_passing(), company_db, company_proxy, budget_t=budget, judge_mode="model", ablations={"no-semantic-checker"})
    assert out.solved and g.total_calls == 4


@pytest.mark.parametrize("budget", [0, 1, 3])
def test_call_accounting_single_shot(company_db, company_proxy, budget):
    out, g = run(never_passing(), company_db, company_proxy, budget_t=budget, judge_mode="model", critic_mode="model", ablations={"single-shot"})
    assert not out.solved and out.iterations_used == 0
    assert g.total_calls == 5 and out.commits == 0


def test_unlocalized_failure_reruns_sql_only(company_db, company_proxy):
    b = never_passing()
    b.add(("critic",), critic_json(None, [], ["nothing found"]))
    out, g = run(b, company_db, company_proxy, budget_t=2, judge_mode="model", critic_mode="model")
    assert [r.restart_stage for r in out.trace[:-1]] == ["sql", "sql"]
    assert out.commits == 0 and g.calls["sql"] == 3 and g.calls.get("refiner", 0) == 0


def test_stage_error_yields_unsolved_outcome(company_db, company_proxy):
    b = ScriptedBackend({("stage1",): "not json"})
    out, _ = run(b, company_db, company_proxy)
    assert not out.solved and "StageError" in out.error


def test_trace_jsonl(company_db, company_proxy, tmp_path):
    out, _ = run(never_passing(), company_db, company_proxy, budget_t=1, judge_mode="model", critic_mode="model")
    lines = out.write_trace(tmp_path / "x.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[0])["critique"]["likely_stage"] == "stage3"
    assert json.loads(lines[-1])["outcome"]["iterations_used"] == 1


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(pass_at=st.integers(0, 4), budget=st.integers(0, 4))
def test_budget_bound(company_db, company_proxy, pass_at, budget):
    b = ScriptedBackend()
    add_happy(b, "x", {v: (GOOD if v >= pass_at else BAD) for v in range(6)})
    b.add(("refiner",), appending_refiner("Check column names."))
    out, _ = run(b, company_db, company_proxy, budget_t=budget)
    assert out.solved == (pass_at <= budget)
    assert out.iterations_used == min(pass_at, budget) <= budget
    assert len(out.trace) == out.iterations_used + 1
    if out.solved:
        assert out.trace[-1].report.passed


# -- query sets ------------------------------------------------------------------


def mechanism_backend():
    """A passes at sql v0 and v1; B fails at v0 and passes at v1; C passes from v1."""
    b = ScriptedBackend()
    add_happy(b, "A", {0: GOOD, 1: GOOD})
    add_happy(b, "B", {0: BAD, 1: "SELECT age FROM employee;"})
    add_happy(b, "C", {1: "SELECT hire_year FROM employee;"})
    b.add(("refiner",), appending_refiner("Use only columns listed in the schema."))
    return b


QUERIES = [Query("A", "names"), Query("B", "ages"), Query("C", "years")]


def test_solve_set_mechanism(company_db, company_proxy):
    g = Gateway(mechanism_backend())
    res = solve_set(QUERIES, company_db, company_proxy, StagePromptSet.defaults("company"), LoopConfig(regression_check=True), g)
    assert [o.solved for o in res] == [True, True, True]
    assert res.commits == 1 and res.regressions == []
    assert res.pass_counts == [2]
    assert res.theta.version("sql") == 1


def test_solve_set_reports_regression(company_db, company_proxy):
    b = mechanism_backend()
    b.add(("sql", "A", 1), BAD)
    g = Gateway(b)
    res = solve_set(QUERIES[:2], company_db, company_proxy, StagePromptSet.defaults("company"), LoopConfig(regression_check=True), g)
    assert [r.example_id for r in res.regressions] == ["A"]
    assert res.regressions[0].after_commit_by == "B"


def test_solve_set_single_shot(company_db, company_proxy):
    g = Gateway(mechanism_backend())
    cfg = LoopConfig(ablations={"single-shot"})
    res = solve_set(QUERIES[:2], company_db, company_proxy, StagePromptSet.defaults("company"), cfg, g)
    assert res.commits == 0 and [o.solved for o in res] == [True, False]


@settings(max_examples=10, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.permutations(["p1", "p2", "f1", "f2"]))
def test_interaction_free_order_invariance(company_db, company_proxy, order):
    def solved(ids):
        b = ScriptedBackend()
        for i in ids:
            add_happy(b, i, GOOD if i.startswith("p") else BAD)
        b.add(("refiner",), appending_refiner("Careful."))
        g = Gateway(b)
        res = solve_set([Query(i, i) for i in ids], company_db, company_proxy, StagePromptSet.defaults("company"), LoopConfig(budget_t=1), g)
        return res.solved_count

    assert solved(order) == solved(["p1", "p2", "f1", "f2"]) == 2
