"""Shared test helpers: fixture access and a rule-based chat backend."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Callable

from thinker.llm import ChatBackend, ChatMessage, Completion, GenParams

FIXTURES = Path(__file__).parent / "fixtures"


def published_actions() -> list[str]:
    lines = (FIXTURES / "actions.txt").read_text(encoding="utf-8").splitlines()
    return [l.strip() for l in lines if l.strip() and not l.startswith("#")]


KIND_MARKERS = {
    "decompose": "Function Name: Retrieval",
    "kbd_answer": "Can you answer the following question",
    "kbd_assess": "Analyze whether the answer",
    "focus": "analyze the relationship between each reference",
    "depth_answer": "The references are sufficient",
    "next_query": "Write the next search query",
    "forced_answer": "The search budget is used up",
    "deduce": "reasoning task on the content below",
    "math": "Write a single arithmetic expression",
}


def prompt_kind(text: str) -> str:
    for kind, marker in KIND_MARKERS.items():
        if marker in text:
            return kind
    raise AssertionError(f"unrecognised prompt: {text[:80]!r}")


_QUESTION_RE = re.compile(r"Question:\s*(.*?)(?:\nAnswer:|$)", re.S)


def prompt_question(text: str) -> str:
    m = _QUESTION_RE.search(text)
    return m.group(1).strip() if m else ""


def boxed_reply(answer: str) -> str:
    return f"<answer>\\boxed{{{answer}}}</answer>"


def boxed_completion(answer: str, prob: float = 0.99) -> Completion:
    head, tail = "<answer>\\boxed{", "}</answer>"
    return Completion(head + answer + tail, ((head, 0.999), (answer, prob), (tail, 0.999)))


REFUSAL = "Based on my internal knowledge, I can't answer this question, I need to retrieve external knowledge."


class RuleBackend(ChatBackend):
    """Answers each prompt through a per-kind callable ``(question, prompt) -> text | Completion``.

    Kinds without a rule get a sensible default: refuse the direct attempt,
    say Yes to focusing, and box a fixed answer elsewhere.
    """

    def __init__(self, rules: dict[str, Callable[[str, str], str | Completion]] | None = None):
        self.rules = rules or {}
        self.log: list[tuple[str, str]] = []

    def _complete(self, messages: tuple[ChatMessage, ...], params: GenParams) -> Completion:
        prompt = messages[-1].content
        kind = prompt_kind(prompt)
        question = prompt_question(prompt)
        self.log.append((kind, question))
        rule = self.rules.get(kind, _DEFAULTS.get(kind))
        if rule is None:
            raise AssertionError(f"no rule for {kind}")
        out = rule(question, prompt)
        if isinstance(out, Completion):
            return out if params.want_token_probs else Completion(out.text)
        return Completion(out)

    def count(self, kind: str) -> int:
        return sum(1 for k, _ in self.log if k == kind)


_DEFAULTS: dict[str, Callable[[str, str], str | Completion]] = {
    "kbd_answer": lambda q, p: REFUSAL,
    "kbd_assess": lambda q, p: boxed_reply("False"),
    "focus": lambda q, p: "<answer>Yes</answer><reason>enough</reason>",
    "depth_answer": lambda q, p: boxed_reply(f"answer to {q}"),
    "next_query": lambda q, p: f"<search>{q} more</search>",
    "forced_answer": lambda q, p: boxed_reply(f"best guess for {q}"),
    "deduce": lambda q, p: boxed_reply("deduced"),
    "math": lambda q, p: boxed_reply("1+1"),
}
