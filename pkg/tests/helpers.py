"""Fixture databases and scripted-model builders shared by the tests."""

from __future__ import annotations

import json
import sqlite3
from pathlib import Path

from reflectsql.gateway import ModelRequest, ScriptedBackend
from reflectsql.pipeline import PLAN_KEYS

RATIO_GOLD = (
    "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 "
    "/ SUM(CASE WHEN FundingType != 'Locally funded' THEN 1 ELSE 0 END) "
    "FROM schools WHERE County = 'Santa Clara' AND Charter = 1;"
)
RATIO_T0 = (
    "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 "
    "/ COUNT(*) FROM schools WHERE County = 'Santa Clara' AND Charter = 1;"
)
RATIO_T1 = RATIO_GOLD
RATIO_T2 = (
    "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 "
    "/ NULLIF(SUM(CASE WHEN FundingType != 'Locally funded' THEN 1 ELSE 0 END), 0) "
    "FROM schools WHERE County = 'Santa Clara' AND Charter = 1;"
)
RATIO_QUESTION = (
    "What is the ratio in percentage of Santa Clara County schools that are locally funded "
    "compared to all other types of charter school funding?"
)


def make_db(path: Path, script: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(path)
    conn.executescript(script)
    conn.commit()
    conn.close()
    return path


def california_schools(path: Path) -> Path:
    rows = [
        ("01", "Santa Clara", 1, "Locally funded", "Alpha Charter"),
        ("02", "Santa Clara", 1, "Locally funded", "Beta Charter"),
        ("03", "Santa Clara", 1, "Directly funded", "Gamma Charter"),
        ("04", "Santa Clara", 1, "Directly funded", "Delta Charter"),
        ("05", "Santa Clara", 1, "Directly funded", "Epsilon Charter"),
        ("06", "Santa Clara", 1, "Not in CS funding model", "Zeta Charter"),
        ("07", "Santa Clara", 0, None, "Eta Elementary"),
        ("08", "Alameda", 1, "Locally funded", "Theta Charter"),
        ("09", "Alameda", 1, "Directly funded", "Iota Charter"),
    ]
    values = ",".join(
        "({})".format(",".join("NULL" if v is None else (str(v) if isinstance(v, int) else "'" + v + "'") for v in r))
        for r in rows
    )
    return make_db(
        path,
        "CREATE TABLE schools (CDSCode TEXT PRIMARY KEY, County TEXT, Charter INTEGER, "
        "FundingType TEXT, School TEXT);"
        f"INSERT INTO schools VALUES {values};",
    )


def company(path: Path, empty: bool = False) -> Path:
    script = (
        "CREATE TABLE department (dept_id INTEGER PRIMARY KEY, name TEXT);"
        "CREATE TABLE employee (emp_id INTEGER PRIMARY KEY, name TEXT, hire_year INTEGER, age INTEGER, "
        "dept_id INTEGER REFERENCES department(dept_id));"
    )
    if not empty:
        script += (
            "INSERT INTO department VALUES (1, 'Sales'), (2, 'Research');"
            "INSERT INTO employee VALUES (1, 'Ann', 2018, 34, 1), (2, 'Bob', 2019, 45, 1), "
            "(3, 'Cid', 2020, 29, 2), (4, 'Dee', 2021, 51, 2), (5, 'Eve', 2019, 38, 2);"
        )
    return make_db(path, script)


# -- stage responses ----------------------------------------------------------


def stage1_json(tables, attributes) -> str:
    return json.dumps({"tables": list(tables), "attributes": list(attributes)})


def literal(column, raw, ctype="literal", direction=None, cardinality="single", confidence=0.9) -> dict:
    return {
        "column_candidate": column,
        "raw_expression": raw,
        "comparison_type": ctype,
        "direction": direction,
        "cardinality_hint": cardinality,
        "confidence": confidence,
    }


def stage2_json(literals=(), filters=(), notes=None) -> str:
    return json.dumps({"literals": list(literals), "filter_candidates": list(filters), "notes": notes})


def plan_dict(**overrides) -> dict:
    plan = {
        "intent": "answer the question",
        "entities": [],
        "attributes": [],
        "filters": [],
        "aggregations": None,
        "joins": [],
        "order": [],
        "limit": None,
        "grouping": [],
        "derived": [],
        "feasibility_checked": True,
        "cardinality": "multiple",
        "distinct": False,
    }
    plan.update(overrides)
    assert set(plan) == set(PLAN_KEYS)
    return plan


def plan_json(**overrides) -> str:
    return json.dumps(plan_dict(**overrides))


def judge_json(ok: bool, missing=(), rationale="checked") -> str:
    return json.dumps({"intent_preserved": ok, "missing_constraints": list(missing), "rationale": rationale})


def critic_json(stage, issues=(), notes=()) -> str:
    return json.dumps({"likely_stage": stage, "issues": list(issues), "notes": list(notes)})


def appending_refiner(addition: str):
    """Refiner stand-in that keeps the original prompt and appends one instruction."""

    def respond(request: ModelRequest) -> str:
        original = request.meta["original_prompt"]
        return json.dumps({"new_prompt": original + "\n" + addition, "explanation": "added guidance"})

    return respond


# -- scenarios ----------------------------------------------------------------

RATIO_PLAN = plan_dict(
    intent="percentage of locally funded charter schools in Santa Clara relative to other funding types",
    entities=["schools"],
    attributes=["schools.County", "schools.Charter", "schools.FundingType"],
    filters=["County = Santa Clara", "Charter = 1", "FundingType not equal Locally funded"],
    aggregations={"ratio": {"function": "SUM", "target": "conditional counts"}},
    derived=["ratio of locally funded count to non-locally funded count, times 100"],
    cardinality="single",
)


def ratio_backend(example_id: str = "65", judge_model: bool = True) -> ScriptedBackend:
    """Scripted replay of the two-step ratio refinement on the schools fixture."""
    b = ScriptedBackend()
    b.add(("stage1", example_id), stage1_json(["schools"], ["schools.County", "schools.Charter", "schools.FundingType"]))
    b.add(
        ("stage2", example_id),
        stage2_json(
            [
                literal("schools.County", "Santa Clara"),
                literal("schools.FundingType", "locally funded"),
                literal("schools.Charter", "charter"),
            ],
            ["County is Santa Clara", "charter schools only"],
        ),
    )
    b.add(("plan", example_id), json.dumps(RATIO_PLAN))
    b.add(("sql", example_id, 0), RATIO_T0)
    b.add(("sql", example_id, 1), RATIO_T1)
    b.add(("sql", example_id, 2), RATIO_T2)
    if judge_model:
        b.add(("judge", example_id, 0), judge_json(False, ["denominator must exclude locally funded schools"]))
        b.add(("judge", example_id, 1), judge_json(False, ["denominator may be zero"]))
        b.add(("judge", example_id, 2), judge_json(True))
    b.add(
        ("critic", example_id, 0),
        critic_json("stage3", ["Incorrect denominator: uses all charter schools"], ["ratio scope"]),
    )
    b.add(("critic", example_id, 1), critic_json("stage3", ["denominator may be zero"], ["guard division"]))
    b.add(("refiner", example_id, 0), appending_refiner("Ratios compare the two groups named in the question."))
    b.add(("refiner", example_id, 1), appending_refiner("Guard every division with NULLIF(denominator, 0)."))
    return b


def happy_backend(example_id: str, sql: str, plan: dict | None = None, tables=("employee",)) -> ScriptedBackend:
    b = ScriptedBackend()
    add_happy(b, example_id, sql, plan, tables)
    return b


def add_happy(b: ScriptedBackend, example_id: str, sql, plan: dict | None = None, tables=("employee",)) -> None:
    """Register stage responses for one example; ``sql`` may be a dict version -> text."""
    b.add(("stage1", example_id), stage1_json(tables, []))
    b.add(("stage2", example_id), stage2_json())
    b.add(("plan", example_id), json.dumps(plan or plan_dict(entities=list(tables))))
    if isinstance(sql, dict):
        for version, text in sql.items():
            b.add(("sql", example_id, version), text)
    else:
        b.add(("sql", example_id), sql)


def random_db(path: Path, seed: int, max_tables: int = 3, max_rows: int = 60):
    """Seeded random database with varied column cardinalities and declared foreign keys.

    Returns (path, declared_fks) where declared_fks is a set of
    ("child.col", "parent.col") pairs.
    """
    import random

    rng = random.Random(seed)
    n_tables = rng.randint(1, max_tables)
    script, fks = [], set()
    for ti in range(n_tables):
        name = f"t{ti}"
        cols = ["id INTEGER PRIMARY KEY"]
        n_cols = rng.randint(1, 4)
        col_specs = []
        for ci in range(n_cols):
            kind = rng.choice(["TEXT", "INTEGER", "REAL"])
            card = rng.choice([1, 2, 5, 19, 20, 21, 35, max_rows])
            col_specs.append((f"c{ci}", kind, card))
            cols.append(f"c{ci} {kind}")
        parent = None
        if ti > 0 and rng.random() < 0.6:
            parent = f"t{rng.randrange(ti)}"
            cols.append(f"{parent}_id INTEGER REFERENCES {parent}(id)")
            fks.add((f"{name}.{parent}_id", f"{parent}.id"))
        script.append(f"CREATE TABLE {name} ({', '.join(cols)});")
        n_rows = rng.randint(0, max_rows)
        for r in range(n_rows):
            vals = [str(r + 1)]
            for _c, kind, card in col_specs:
                if rng.random() < 0.1:
                    vals.append("NULL")
                    continue
                k = rng.randrange(card)
                if kind == "TEXT":
                    vals.append(f"'v{k}'")
                elif kind == "INTEGER":
                    vals.append(str(k))
                else:
                    vals.append(repr(k + 0.5))
            if parent is not None:
                vals.append(str(rng.randint(1, 5)))
            script.append(f"INSERT INTO {name} VALUES ({', '.join(vals)});")
    return make_db(path, "\n".join(["PRAGMA foreign_keys=OFF;"] + script)), fks


def write_dataset(root: Path, flavor: str, records: list[dict], databases: dict) -> Path:
    """Lay out a Spider- or BIRD-style split: dev.json plus one directory per database.

    ``databases`` maps db_id -> builder taking the target sqlite path.
    """
    root = Path(root)
    sub = "database" if flavor == "spider" else "dev_databases"
    for db_id, build in databases.items():
        build(root / sub / db_id / f"{db_id}.sqlite")
    (root / "dev.json").write_text(json.dumps(records, indent=1))
    return root


BENCH_SQL = {
    "0": "SELECT name FROM employee WHERE hire_year > 2019;",
    "1": "SELECT COUNT(*) FROM employee;",
    "2": "SELECT name FROM employee ORDER BY age;",
}


def happy_rows(example_id: str, sql, tables=("employee",)) -> list[dict]:
    """Script-file rows for one example; ``sql`` may be a dict version -> text."""
    rows = [
        {"stage": "stage1", "example_id": example_id, "text": stage1_json(tables, [])},
        {"stage": "stage2", "example_id": example_id, "text": stage2_json()},
        {"stage": "plan", "example_id": example_id, "text": plan_json(entities=list(tables))},
    ]
    versions = sql if isinstance(sql, dict) else {None: sql}
    for version, text in versions.items():
        rows.append({"stage": "sql", "example_id": example_id, "version": version, "text": text})
    return rows


def bench_fixture(root: Path) -> tuple[Path, Path]:
    """Three company questions: two right at t=0, the third fixed after one SQL-prompt revision.

    Returns the dataset root and a scripted-backend script file.
    """
    root = Path(root)
    records = [{"db_id": "company", "question": f"question {i}", "query": sql} for i, sql in BENCH_SQL.items()]
    write_dataset(root, "spider", records, {"company": company})
    rows = happy_rows("0", BENCH_SQL["0"]) + happy_rows("1", BENCH_SQL["1"])
    rows += happy_rows("2", {0: "SELECT nme FROM employee ORDER BY age;", 1: BENCH_SQL["2"]})
    rows.append({"stage": "refiner", "append": "Use only columns listed in the schema."})
    script = root / "script.json"
    script.write_text(json.dumps({"responses": rows}, indent=1))
    return root, script
