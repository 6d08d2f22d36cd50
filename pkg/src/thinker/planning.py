"""Breadth decomposition: prompt, plan parsing, validation and dependencies.

Variables in a plan are defined and referenced by actions:

* Retrieval slots carrying a type or a name define a fresh variable.
* A bare subject (``s=o1``) always refers back to an earlier variable.
* A bare predicate or object refers back when the alias is already defined
  and otherwise introduces an untyped variable (``p=p1, o=o1``).
* Deduce and Math define their ``->alias``; their alias content items and
  all Output arguments are references.

The answer of a Retrieval step is bound to its fresh object variable, or
the fresh subject, or the fresh predicate, whichever comes first.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from . import prompts
from .logical_form import (
    Deduce,
    LogicalForm,
    LogicalFormError,
    Math,
    Output,
    Retrieval,
    find_refs,
    parse_action,
    render_action,
)

__all__ = [
    "MissingAnswerBlock",
    "Plan",
    "PlanError",
    "PlanViolation",
    "StepActionMismatch",
    "StepParseError",
    "SubProblem",
    "Variables",
    "ViolationKind",
    "build_decomposition_prompt",
    "format_plan",
    "parse_decomposition",
    "plan_dag",
    "resolve_variables",
    "validate_plan",
]


class PlanError(ValueError):
    pass


class MissingAnswerBlock(PlanError):
    pass


class StepActionMismatch(PlanError):
    def __init__(self, n: int, detail: str = ""):
        self.n = n
        super().__init__(f"step/action mismatch at {n}" + (f": {detail}" if detail else ""))


class StepParseError(PlanError):
    def __init__(self, n: int, line: str, cause: LogicalFormError):
        self.n = n
        self.line = line
        self.cause = cause
        super().__init__(f"Action{n}: {cause}\n  {line}")


@dataclass(frozen=True)
class SubProblem:
    index: int
    step: str
    action: LogicalForm


@dataclass(frozen=True)
class Plan:
    question: str
    think: str
    subs: tuple[SubProblem, ...]

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "think": self.think,
            "subs": [
                {"index": s.index, "step": s.step, "action": render_action(s.action)} for s in self.subs
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Plan":
        subs = tuple(
            SubProblem(int(s["index"]), s["step"], parse_action(s["action"])) for s in data["subs"]
        )
        return cls(data.get("question", ""), data.get("think", ""), subs)


class ViolationKind(str, Enum):
    FORWARD_REF = "ForwardRef"
    UNDEFINED_ALIAS = "UndefinedAlias"
    DUPLICATE_ALIAS = "DuplicateAlias"
    NON_CONTIGUOUS_INDEX = "NonContiguousIndex"
    EMPTY_PLAN = "EmptyPlan"
    OUTPUT_NOT_LAST = "OutputNotLast"


@dataclass(frozen=True)
class PlanViolation:
    kind: ViolationKind
    index: int
    detail: str

    def __str__(self) -> str:
        return f"{self.kind.value} at step {self.index}: {self.detail}"


def build_decomposition_prompt(question: str) -> str:
    if not question.strip():
        raise ValueError("question must be nonempty")
    return prompts.render("decompose", question=question.strip())


# ---------------------------------------------------------------------------
# Parsing

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.S)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.S)
_MARK_RE = re.compile(r"\b(Step|Action)\s*(\d+)\s*:")


def parse_decomposition(response: str, question: str = "") -> Plan:
    """Parse ``<think>...</think><answer>Step1: ... Action1: ...</answer>``."""
    m = _ANSWER_RE.search(response)
    if not m:
        raise MissingAnswerBlock("response has no <answer>...</answer> block")
    t = _THINK_RE.search(response)
    think = t.group(1).strip() if t else ""
    body = m.group(1)
    marks = list(_MARK_RE.finditer(body))
    subs: list[SubProblem] = []
    expected = 1
    i = 0
    while i < len(marks):
        mk = marks[i]
        kind, n = mk.group(1), int(mk.group(2))
        if kind != "Step" or n != expected:
            raise StepActionMismatch(expected, f"found {kind}{n}")
        if i + 1 >= len(marks) or marks[i + 1].group(1) != "Action" or int(marks[i + 1].group(2)) != n:
            raise StepActionMismatch(n, "Step without matching Action")
        step = body[mk.end() : marks[i + 1].start()].strip()
        end = marks[i + 2].start() if i + 2 < len(marks) else len(body)
        line = body[marks[i + 1].end() : end].strip()
        try:
            action = parse_action(line)
        except LogicalFormError as e:
            raise StepParseError(n, line, e) from e
        subs.append(SubProblem(n, step, action))
        expected += 1
        i += 2
    if not subs:
        raise StepActionMismatch(1, "answer block holds no steps")
    return Plan(question, think, tuple(subs))


def format_plan(plan: Plan) -> str:
    lines = []
    for sub in plan.subs:
        lines.append(f"Step{sub.index}: {sub.step}")
        lines.append(f"Action{sub.index}: {render_action(sub.action)}")
    think = f"<think>{plan.think}</think>\n\n" if plan.think else ""
    return think + "<answer>" + "\n".join(lines) + "</answer>"


# ---------------------------------------------------------------------------
# Variables and validation


@dataclass(frozen=True)
class Variables:
    """Aliases one sub-problem defines and references."""

    defines: tuple[str, ...]
    refs: tuple[str, ...]
    answer: str | None


def _variables(form: LogicalForm, known: set[str]) -> Variables:
    if isinstance(form, Retrieval):
        defines: list[str] = []
        refs: list[str] = []
        fresh: dict[str, str] = {}
        for slot, ref in form.slots():
            if not ref.is_back_reference:
                defines.append(ref.alias)
                fresh[slot] = ref.alias
            elif slot == "s" or ref.alias in known:
                refs.append(ref.alias)
            elif ref.alias in defines:
                # repeated untyped alias inside one action, e.g. p=x, o=x
                continue
            else:
                defines.append(ref.alias)
                fresh[slot] = ref.alias
        answer = fresh.get("o") or fresh.get("s") or fresh.get("p")
        return Variables(tuple(defines), tuple(refs), answer)
    if isinstance(form, (Deduce, Math)):
        refs = [c.text for c in form.content if c.is_alias]
        return Variables((form.out,), tuple(refs), form.out)
    if isinstance(form, Output):
        return Variables((), form.args, None)
    raise TypeError(f"not a logical form: {form!r}")


def resolve_variables(plan: Plan, prebound: Iterable[str] = ()) -> list[Variables]:
    """Per-step defined/referenced aliases, in plan order."""
    known = set(prebound)
    out = []
    for sub in plan.subs:
        v = _variables(sub.action, known)
        known.update(v.defines)
        out.append(v)
    return out


def validate_plan(plan: Plan, prebound: Iterable[str] = ()) -> list[PlanViolation]:
    """Check dependency structure; an empty list means the plan is sound.

    ``prebound`` names aliases supplied by the caller before execution.
    """
    if not plan.subs:
        return [PlanViolation(ViolationKind.EMPTY_PLAN, 0, "plan has no sub-problems")]
    known = set(prebound)
    owner: dict[str, int] = {a: 0 for a in known}
    later: dict[str, int] = {}
    for sub in plan.subs:
        for a in _variables(sub.action, set()).defines:
            later.setdefault(a, sub.index)
    violations: list[PlanViolation] = []
    last = len(plan.subs)
    for pos, sub in enumerate(plan.subs, 1):
        n = sub.index
        if n != pos:
            violations.append(
                PlanViolation(ViolationKind.NON_CONTIGUOUS_INDEX, n, f"expected index {pos}, got {n}")
            )
        for k in find_refs(sub.step):
            if k >= pos or k < 1:
                violations.append(
                    PlanViolation(ViolationKind.FORWARD_REF, n, f"#{k} is not an earlier step")
                )
        v = _variables(sub.action, known)
        for a in v.refs:
            if a not in known:
                where = f" (defined later at step {later[a]})" if a in later and later[a] > pos else ""
                violations.append(
                    PlanViolation(ViolationKind.UNDEFINED_ALIAS, n, f"{a} is not defined before use{where}")
                )
        for a in v.defines:
            if a in known:
                origin = owner[a]
                src = f"step {origin}" if origin else "the caller"
                violations.append(
                    PlanViolation(ViolationKind.DUPLICATE_ALIAS, n, f"{a} already defined by {src}")
                )
            else:
                known.add(a)
                owner[a] = n
        if isinstance(sub.action, Output) and pos != last:
            violations.append(
                PlanViolation(ViolationKind.OUTPUT_NOT_LAST, n, "Output must be the final step")
            )
    return violations


def plan_dag(plan: Plan, prebound: Iterable[str] = ()) -> list[tuple[int, int]]:
    """Dependency edges ``(i, j)``: step j uses ``#i`` or an alias defined at i."""
    owner: dict[str, int] = {}
    edges: set[tuple[int, int]] = set()
    for sub, v in zip(plan.subs, resolve_variables(plan, prebound)):
        j = sub.index
        for k in find_refs(sub.step):
            if 1 <= k < j:
                edges.add((k, j))
        for a in v.refs:
            if a in owner and owner[a] != j:
                edges.add((owner[a], j))
        for a in v.defines:
            owner.setdefault(a, j)
    return sorted(edges)
