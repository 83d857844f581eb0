"""Staged text-to-SQL with critic-driven prompt refinement."""

from .bench import (
    BenchExample,
    BenchReport,
    execution_accuracy,
    load_dataset,
    run_benchmark,
    ves,
)
from .critic import Critique, Violation, critique, localize
from .gateway import Cassette, Gateway, ModelRequest, ReplayBackend, ScriptedBackend
from .judges import EvalReport, coverage_check, evaluate, extract_signature
from .orchestrator import LoopConfig, Outcome, solve, solve_set
from .pipeline import compose, rerun_from
from .prompts import StagePromptSet
from .proxy import ContextProxy, build_proxy
from .refiner import PromptRevision, commit, reflect, validate_prompt

__version__ = "0.1.0"

__all__ = [
    "BenchExample",
    "BenchReport",
    "build_proxy",
    "Cassette",
    "commit",
    "compose",
    "ContextProxy",
    "coverage_check",
    "Critique",
    "critique",
    "EvalReport",
    "evaluate",
    "execution_accuracy",
    "extract_signature",
    "Gateway",
    "load_dataset",
    "localize",
    "LoopConfig",
    "ModelRequest",
    "Outcome",
    "PromptRevision",
    "reflect",
    "ReplayBackend",
    "rerun_from",
    "run_benchmark",
    "ScriptedBackend",
    "solve",
    "solve_set",
    "StagePromptSet",
    "validate_prompt",
    "ves",
    "Violation",
]
