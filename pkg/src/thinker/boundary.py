"""Knowledge boundary determination: generate first, then assess.

A sub-question is answered directly from model knowledge only when the
self-assessment prompt says True *and* the least likely token of the boxed
answer clears the threshold tau. Anything else sends the sub-question to
depth solving.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Protocol

from . import prompts
from .llm import Completion

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.95
REFUSAL_PHRASE = "i can't answer this question"

_ANSWER_RE = re.compile(r"<answer>(.*?)(?:</answer>|$)", re.S)
BOXED = "\\boxed{"


class Asker(Protocol):
    def ask(self, prompt: str, *, want_token_probs: bool = False, **meta: Any) -> Completion: ...


class ConfidenceError(ValueError):
    pass


class VerdictUnparsable(ConfidenceError):
    pass


class NoTokenProbs(ConfidenceError):
    pass


class BoxedSpanNotAligned(ConfidenceError):
    pass


def find_boxed(text: str) -> tuple[str, int, int] | None:
    """Locate the first ``\\boxed{...}`` and return ``(content, start, end)``.

    The search is restricted to the first ``<answer>`` block when there is
    one. Braces are balanced, so ``\\boxed{a{b}c}`` yields ``a{b}c``.
    """
    lo, hi = 0, len(text)
    m = _ANSWER_RE.search(text)
    if m:
        lo, hi = m.span(1)
    i = text.find(BOXED, lo, hi)
    if i < 0:
        return None
    start = i + len(BOXED)
    depth = 1
    for j in range(start, hi):
        ch = text[j]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start:j], start, j
    return None


def extract_boxed(text: str) -> str | None:
    found = find_boxed(text)
    return found[0].strip() if found else None


def is_refusal(text: str) -> bool:
    return REFUSAL_PHRASE in text.replace("’", "'").lower()


def attempt_direct_answer(llm: Asker, question: str) -> tuple[Completion, str | None, bool]:
    """Ask for a direct answer with token probabilities switched on."""
    if not question.strip():
        raise ValueError("question must be nonempty")
    completion = llm.ask(
        prompts.render("kbd_answer", question=question), want_token_probs=True, kind="kbd_answer"
    )
    found = find_boxed(completion.text)
    boxed = found[0] if found else None
    refused = boxed is None and is_refusal(completion.text)
    return completion, boxed, refused


def prompt_confidence(llm: Asker, question: str, answer: str) -> bool:
    if not answer.strip():
        raise ValueError("answer must be nonempty")
    completion = llm.ask(prompts.render("kbd_assess", question=question, answer=answer), kind="kbd_assess")
    verdict = extract_boxed(completion.text)
    token = (verdict or "").strip().rstrip(".").lower()
    if token not in ("true", "false"):
        raise VerdictUnparsable(f"no boxed True/False in {completion.text[:120]!r}")
    return token == "true"


def likelihood_confidence(completion: Completion, boxed_span: str, tau: float) -> tuple[float, bool]:
    """Minimum probability over the tokens covering the boxed answer.

    Tokens are aligned to the answer by character overlap, so any tokenizer
    works. Returns ``(C, C >= tau)``.
    """
    if not completion.token_probs:
        raise NoTokenProbs("completion carries no token probabilities")
    found = find_boxed(completion.text)
    if found and found[0] == boxed_span:
        lo, hi = found[1], found[2]
    else:
        lo = completion.text.find(boxed_span) if boxed_span else -1
        hi = lo + len(boxed_span)
    if lo < 0 or hi <= lo:
        raise BoxedSpanNotAligned(f"cannot locate {boxed_span!r} in the completion")
    probs = [p for s, e, p in completion.token_spans() if s < hi and e > lo and e > s]
    if not probs:
        raise BoxedSpanNotAligned(f"no token overlaps {boxed_span!r}")
    c = min(probs)
    return c, c >= tau


@dataclass
class ConfidenceReport:
    question: str
    direct_answer: str
    boxed: str | None
    refused: bool
    prompt_verdict: bool
    min_token_prob: float | None
    threshold: float
    likelihood_verdict: bool
    final_verdict: bool
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConfidenceReport":
        return cls(**data)


def knowledge_boundary(llm: Asker, question: str, tau: float = DEFAULT_TAU) -> ConfidenceReport:
    """Run the direct attempt and both confidence checks.

    Confidence sub-errors turn the affected verdict False and are recorded in
    ``errors``; gateway errors propagate.
    """
    completion, boxed, refused = attempt_direct_answer(llm, question)
    errors: list[str] = []
    c: float | None = None
    likely = False
    asserted = False
    if boxed is not None and boxed.strip():
        try:
            c, likely = likelihood_confidence(completion, boxed, tau)
        except ConfidenceError as e:
            errors.append(f"{type(e).__name__}: {e}")
        try:
            asserted = prompt_confidence(llm, question, boxed.strip())
        except VerdictUnparsable as e:
            logger.info("confidence verdict unparsable for %r: %s", question, e)
            errors.append(f"{type(e).__name__}: {e}")
    elif boxed is not None:
        errors.append("empty boxed answer")
    return ConfidenceReport(
        question=question,
        direct_answer=completion.text,
        boxed=boxed.strip() if boxed is not None else None,
        refused=refused,
        prompt_verdict=asserted,
        min_token_prob=c,
        threshold=tau,
        likelihood_verdict=likely,
        final_verdict=asserted and likely,
        errors=errors,
    )
