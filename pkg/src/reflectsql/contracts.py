"""Strict JSON output contracts and the single-repair invocation policy."""

from __future__ import annotations

import json
import re
from typing import Any, Callable, TypeVar

from .errors import ContractViolation
from .gateway import Gateway, ModelRequest

T = TypeVar("T")

REPAIR_NOTE = "Your previous output violated the JSON contract; emit strict JSON only."

_FENCE = re.compile(r"^\s*```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```\s*$", re.DOTALL)


def strip_fences(text: str) -> tuple[str, bool]:
    m = _FENCE.match(text)
    if m:
        return m.group(1).strip(), True
    return text.strip(), False


def parse_json_object(stage: str, text: str) -> dict:
    body, _ = strip_fences(text)
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ContractViolation(stage, f"not valid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ContractViolation(stage, "expected a JSON object")
    return doc


def require_keys(stage: str, doc: dict, keys: tuple[str, ...] | list[str]) -> None:
    problems = []
    missing = [k for k in keys if k not in doc]
    extra = [k for k in doc if k not in keys]
    if missing:
        problems.append("missing keys: " + ", ".join(missing))
    if extra:
        problems.append("unexpected keys: " + ", ".join(extra))
    if problems:
        raise ContractViolation(stage, problems)


def is_str_list(value: Any) -> bool:
    return isinstance(value, list) and all(isinstance(v, str) for v in value)


def is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def invoke(
    gateway: Gateway,
    request: ModelRequest,
    parse: Callable[[str], T],
    repair_note: str = REPAIR_NOTE,
) -> tuple[T, int]:
    """Call the model and parse; on a contract violation, re-invoke exactly once.

    The corrective note goes into this request only. Returns the parsed value
    and the number of calls made.
    """
    text = gateway.complete(request).text
    try:
        return parse(text), 1
    except ContractViolation as first:
        retry = request.with_user_suffix(f"{repair_note}\nProblems: {'; '.join(first.problems)}")
        text = gateway.complete(retry).text
        return parse(text), 2
