"""Hierarchical deep-search question answering.

Questions are decomposed into logical-form sub-problems, each answered from
model knowledge when the knowledge-boundary gate allows it and otherwise by
a bounded retrieve, focus and reason loop.
"""

from __future__ import annotations

from .evalkit import EvalReport, QAItem, SftSample, em, export_sft, f1, normalize_answer, run_eval
from .llm import ChatMessage, Completion, GenParams, HttpBackend, ScriptedBackend, script_load
from .logical_form import parse_action, render_action, substitute_refs
from .planning import Plan, parse_decomposition, plan_dag, validate_plan
from .retrieval import Corpus, Document, LexicalRetriever, RetrievalQuery
from .solver import BindingEnv, RunResult, SolveConfig, Thinker

__version__ = "0.1.0"

__all__ = [
    "BindingEnv",
    "ChatMessage",
    "Completion",
    "Corpus",
    "Document",
    "EvalReport",
    "GenParams",
    "HttpBackend",
    "LexicalRetriever",
    "Plan",
    "QAItem",
    "RetrievalQuery",
    "RunResult",
    "ScriptedBackend",
    "SftSample",
    "SolveConfig",
    "Thinker",
    "em",
    "export_sft",
    "f1",
    "normalize_answer",
    "parse_action",
    "parse_decomposition",
    "plan_dag",
    "render_action",
    "run_eval",
    "script_load",
    "substitute_refs",
    "validate_plan",
]
