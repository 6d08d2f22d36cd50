"""Plan execution: the Retrieval depth loop and the Deduce, Math and Output executors.

A question run is strictly sequential. The planner is asked once for a
plan, the plan is validated, then each sub-problem runs in index order and
its answer is bound to ``#n`` and to its answer alias before the next one
starts. Every model call goes through one growing :class:`Session`, so the
finished trace doubles as a multi-turn training sample.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Iterable, Mapping

from . import prompts
from .arith import DivisionByZero, ExpressionError, eval_expression, format_number
from .boundary import ConfidenceReport, extract_boxed, knowledge_boundary
from .llm import ChatBackend, GenParams, LLMError
from .logical_form import (
    Deduce,
    LogicalFormError,
    Math,
    Output,
    Retrieval,
    UnboundReference,
    parse_action,
    render_action,
    substitute_refs,
)
from .planning import (
    Plan,
    PlanError,
    PlanViolation,
    SubProblem,
    _variables,
    build_decomposition_prompt,
    parse_decomposition,
    validate_plan,
)
from .retrieval import Document, RetrievalError, RetrievalQuery, Retriever, Spo, SpoTerm
from .trace import RunTrace, Session

logger = logging.getLogger(__name__)

DEFAULT_MAX_DEPTH = 5


class PipelineError(RuntimeError):
    """A question run stopped; ``trace`` holds everything done so far."""

    def __init__(self, message: str, trace: RunTrace | None = None, index: int | None = None):
        self.trace = trace
        self.index = index
        where = f"step {index}: " if index is not None else ""
        super().__init__(where + message)


class PlanInvalid(PipelineError):
    def __init__(self, violations: list[PlanViolation], trace: RunTrace | None = None):
        self.violations = violations
        super().__init__("invalid plan: " + "; ".join(str(v) for v in violations), trace)


class UndefinedAlias(KeyError):
    def __init__(self, alias: str):
        self.alias = alias
        super().__init__(alias)

    def __str__(self) -> str:
        return f"alias {self.alias!r} is not bound"


class RebindError(ValueError):
    pass


class ExpressionInvalid(ExpressionError):
    pass


# ---------------------------------------------------------------------------
# Data


@dataclass
class BindingEnv:
    """Write-once answers for ``#n`` references and aliases."""

    by_index: dict[int, str] = field(default_factory=dict)
    by_alias: dict[str, str] = field(default_factory=dict)

    def bind_index(self, n: int, value: str) -> None:
        if n in self.by_index:
            raise RebindError(f"#{n} is already bound")
        self.by_index[n] = value

    def bind_alias(self, alias: str, value: str) -> None:
        if alias in self.by_alias:
            raise RebindError(f"{alias} is already bound")
        self.by_alias[alias] = value

    def lookup(self, alias: str) -> str:
        try:
            return self.by_alias[alias]
        except KeyError:
            raise UndefinedAlias(alias) from None

    def copy(self) -> "BindingEnv":
        return BindingEnv(dict(self.by_index), dict(self.by_alias))

    @classmethod
    def from_aliases(cls, values: Mapping[str, str]) -> "BindingEnv":
        return cls({}, dict(values))


@dataclass(frozen=True)
class SolveConfig:
    max_depth: int = DEFAULT_MAX_DEPTH
    top_k: int = 3
    tau: float = 0.95
    kbd_enabled: bool = True

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")


@dataclass
class DepthTurn:
    turn_index: int
    search_query: str
    retrieved: list[Document]
    focus_verdict: bool
    focus_reason: str
    emitted_answer: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "turn_index": self.turn_index,
            "search_query": self.search_query,
            "retrieved": [d.to_dict() for d in self.retrieved],
            "focus_verdict": self.focus_verdict,
            "focus_reason": self.focus_reason,
            "emitted_answer": self.emitted_answer,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DepthTurn":
        return cls(
            int(data["turn_index"]),
            data["search_query"],
            [Document.from_dict(d) for d in data.get("retrieved", [])],
            bool(data["focus_verdict"]),
            data.get("focus_reason", ""),
            data.get("emitted_answer"),
        )


VIAS = ("direct", "depth", "deduce", "math", "output")


@dataclass
class SubAnswer:
    index: int
    answer: str
    via: str
    turns: list[DepthTurn] = field(default_factory=list)
    step: str = ""
    action: str = ""
    kbd: ConfidenceReport | None = None
    forced: bool = False
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.via not in VIAS:
            raise ValueError(f"unknown via {self.via!r}")
        if self.via == "direct" and self.turns:
            raise ValueError("a direct answer has no depth turns")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "step": self.step,
            "action": self.action,
            "answer": self.answer,
            "via": self.via,
            "turns": [t.to_dict() for t in self.turns],
            "kbd": self.kbd.to_dict() if self.kbd else None,
            "forced": self.forced,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SubAnswer":
        return cls(
            index=int(data["index"]),
            answer=data["answer"],
            via=data["via"],
            turns=[DepthTurn.from_dict(t) for t in data.get("turns", [])],
            step=data.get("step", ""),
            action=data.get("action", ""),
            kbd=ConfidenceReport.from_dict(data["kbd"]) if data.get("kbd") else None,
            forced=bool(data.get("forced", False)),
            notes=list(data.get("notes", [])),
        )


# ---------------------------------------------------------------------------
# Helpers


def resolve_spo(form: Retrieval, env: BindingEnv) -> Spo:
    """The action's triple with back-references replaced by bound text."""

    def term(ref) -> SpoTerm:
        if ref.is_back_reference and ref.alias in env.by_alias:
            return SpoTerm(None, env.by_alias[ref.alias] or None)
        return SpoTerm(ref.type_name, ref.display_name)

    if form.p.is_back_reference:
        p = env.by_alias.get(form.p.alias) or None
    else:
        p = form.p.display_name or form.p.type_name
    constraints = tuple((c.target, c.prop_name, c.value) for c in form.constraints)
    return Spo(term(form.s), p, term(form.o), constraints)


def format_references(docs: Iterable[Document]) -> str:
    lines = [f'{i}. "{d.title}" {d.body}' for i, d in enumerate(docs, 1)]
    return "\n".join(lines) if lines else "(none)"


_FOCUS_ANSWER_RE = re.compile(r"<answer>\s*(yes|no)\b[^<]*</answer>", re.I)
_REASON_RE = re.compile(r"<reason>(.*?)(?:</reason>|$)", re.S)
_SEARCH_RE = re.compile(r"<search>(.*?)</search>", re.S)
_STEP_ACTION_RE = re.compile(r"Step\s*\d*\s*:(.*?)Action\s*\d*\s*:(.*)", re.S)
_TAG_RE = re.compile(r"</?(?:think|answer|reason|search)>")


class FocusUnparsable(ValueError):
    pass


def parse_focus(text: str) -> tuple[bool, str]:
    """Read ``<answer>Yes/No</answer>`` and an optional ``<reason>``."""
    m = _FOCUS_ANSWER_RE.search(text)
    if not m:
        raise FocusUnparsable(f"no <answer>Yes/No</answer> in {text[:120]!r}")
    r = _REASON_RE.search(text)
    return m.group(1).lower() == "yes", r.group(1).strip() if r else ""


def focusing_and_reasoning(llm: Any, question: str, refs: list[Document], **meta: Any) -> tuple[bool, str]:
    """Ask whether ``refs`` suffice to answer ``question``.

    An unparsable reply counts as No with an empty reason.
    """
    prompt = prompts.render("focus", references=format_references(refs), question=question)
    reply = llm.ask(prompt, kind="focus", **meta)
    try:
        return parse_focus(reply.text)
    except FocusUnparsable as e:
        logger.info("focus reply unparsable, continuing search: %s", e)
        return False, ""


def answer_text(reply: str) -> tuple[str, bool]:
    """Boxed content if present, else the reply with tags removed.

    The flag tells whether a boxed span was found.
    """
    boxed = extract_boxed(reply)
    if boxed is not None:
        return boxed, True
    return _TAG_RE.sub("", reply).strip(), False


# Numbers in running text: thousands separators, decimals, signs; a trailing
# percent sign is dropped (the caller scales).
_NUMBER_RE = re.compile(r"(?<![\w.])-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?![\d])")

# Target keyword patterns for the deterministic Math path, tried in order.
MATH_PATTERNS: tuple[tuple[str, re.Pattern[str]], ...] = (
    ("difference", re.compile(r"\b(difference|how (?:much|many) (?:more|less|fewer|longer|older|younger)|minus|subtract)\b", re.I)),
    ("max", re.compile(r"\b(maximum|max|largest|highest|greatest|biggest)\b", re.I)),
    ("min", re.compile(r"\b(minimum|min|smallest|lowest|least)\b", re.I)),
    ("count", re.compile(r"\b(how many|count|number of)\b", re.I)),
    ("sum", re.compile(r"\b(sum|total|add|combined|altogether|in all)\b", re.I)),
)


def math_operands(texts: Iterable[str]) -> list[Decimal]:
    out = []
    for text in texts:
        for m in _NUMBER_RE.finditer(text):
            out.append(Decimal(m.group(0).replace(",", "")))
    return out


def _lit(d: Decimal) -> str:
    s = f"{d:f}"
    return f"({s})" if s.startswith("-") else s


def deterministic_expression(target: str, operands: list[Decimal]) -> tuple[str, str] | None:
    """``(pattern, expression)`` when the target matches a known pattern.

    Difference needs exactly two operands (first minus second); identity
    applies when a single operand meets no keyword.
    """
    if not operands:
        return None
    for name, pattern in MATH_PATTERNS:
        if not pattern.search(target):
            continue
        if name == "difference":
            if len(operands) != 2:
                return None
            return name, f"{_lit(operands[0])}-{_lit(operands[1])}"
        if name == "max":
            return name, _lit(max(operands))
        if name == "min":
            return name, _lit(min(operands))
        if name == "count":
            return name, str(len(operands))
        return name, "+".join(_lit(d) for d in operands)
    if len(operands) == 1:
        return "identity", _lit(operands[0])
    return None


def _resolve_content(form: Deduce | Math, env: BindingEnv) -> list[str]:
    return [env.lookup(c.text) if c.is_alias else c.text for c in form.content]


# ---------------------------------------------------------------------------
# Executors


def _bind(sub: SubProblem, answer: str, env: BindingEnv) -> None:
    form = sub.action
    known = set(env.by_alias)
    v = _variables(form, known)
    env.bind_index(sub.index, answer)
    if isinstance(form, Retrieval):
        for slot, ref in form.slots():
            if ref.alias not in v.defines or ref.alias in env.by_alias:
                continue
            if ref.alias == v.answer:
                env.bind_alias(ref.alias, answer)
            else:
                env.bind_alias(ref.alias, ref.display_name or ref.type_name or "")
    elif v.answer is not None:
        env.bind_alias(v.answer, answer)


def solve_retrieval(
    sub: SubProblem,
    env: BindingEnv,
    cfg: SolveConfig,
    llm: Any,
    retriever: Retriever,
) -> SubAnswer:
    form = sub.action
    if not isinstance(form, Retrieval):
        raise TypeError("solve_retrieval needs a Retrieval action")
    question = substitute_refs(sub.step, env)
    spo = resolve_spo(form, env)
    base = dict(index=sub.index, step=question, action=render_action(form))
    report = None
    if cfg.kbd_enabled:
        report = knowledge_boundary(llm, question, cfg.tau)
        if report.final_verdict and report.boxed:
            return SubAnswer(answer=report.boxed, via="direct", kbd=report, **base)

    notes: list[str] = []
    turns: list[DepthTurn] = []
    seen: dict[str, Document] = {}
    query = RetrievalQuery(question, spo)
    for t in range(1, cfg.max_depth + 1):
        docs = retriever.retrieve(query, cfg.top_k)
        for d in docs:
            seen.setdefault(d.id, d)
        verdict, reason = focusing_and_reasoning(llm, question, docs, turn=t)
        turn = DepthTurn(t, query.step_text, docs, verdict, reason)
        turns.append(turn)
        refs = format_references(seen.values())
        if verdict:
            prompt = prompts.render("depth_answer", references=refs, reason=reason, question=question)
            reply = llm.ask(prompt, kind="depth_answer", turn=t)
        elif t == cfg.max_depth:
            prompt = prompts.render("forced_answer", references=refs, question=question)
            reply = llm.ask(prompt, kind="forced_answer", turn=t)
        else:
            prompt = prompts.render("next_query", reason=reason or "(none)", question=question)
            reply = llm.ask(prompt, kind="next_query", turn=t)
            query = _next_query(reply.text, question, env, t, notes)
            continue
        answer, boxed = answer_text(reply.text)
        if not boxed:
            notes.append(f"turn {t}: unboxed answer adopted whole")
            logger.info("step %d turn %d: unboxed answer adopted whole", sub.index, t)
        turn.emitted_answer = answer
        return SubAnswer(
            answer=answer, via="depth", turns=turns, kbd=report, forced=not verdict, notes=notes, **base
        )
    raise AssertionError("depth loop exited without an answer")  # pragma: no cover


def _next_query(reply: str, fallback: str, env: BindingEnv, t: int, notes: list[str]) -> RetrievalQuery:
    m = _SEARCH_RE.search(reply)
    content = m.group(1).strip() if m else ""
    if not content:
        notes.append(f"turn {t}: no usable <search> query, reusing the step text")
        logger.info("turn %d: malformed <search>, falling back to step text", t)
        return RetrievalQuery(fallback)
    sa = _STEP_ACTION_RE.search(content)
    if not sa:
        return RetrievalQuery(content)
    step = sa.group(1).strip() or fallback
    try:
        form = parse_action(sa.group(2).strip())
    except LogicalFormError:
        return RetrievalQuery(step)
    spo = resolve_spo(form, env) if isinstance(form, Retrieval) else None
    return RetrievalQuery(step, spo)


def solve_deduce(sub: SubProblem, env: BindingEnv, llm: Any) -> SubAnswer:
    form = sub.action
    if not isinstance(form, Deduce):
        raise TypeError("solve_deduce needs a Deduce action")
    content = "\n".join(f"- {c}" for c in _resolve_content(form, env))
    prompt = prompts.render("deduce", op=form.op.value, content=content, target=form.target)
    reply = llm.ask(prompt, kind="deduce")
    answer, boxed = answer_text(reply.text)
    notes = [] if boxed else ["unboxed answer adopted whole"]
    if not boxed:
        logger.info("step %d: unboxed deduce reply adopted whole", sub.index)
    return SubAnswer(
        sub.index, answer, "deduce", step=substitute_refs(sub.step, env), action=render_action(form), notes=notes
    )


def solve_math(sub: SubProblem, env: BindingEnv, llm: Any | None = None) -> SubAnswer:
    form = sub.action
    if not isinstance(form, Math):
        raise TypeError("solve_math needs a Math action")
    content = _resolve_content(form, env)
    base = dict(index=sub.index, via="math", step=substitute_refs(sub.step, env), action=render_action(form))
    found = deterministic_expression(form.target, math_operands(content))
    if found is not None:
        name, expr = found
        value = eval_expression(expr)
        return SubAnswer(answer=format_number(value), notes=[f"{name}: {expr}"], **base)
    if llm is None:
        raise ExpressionInvalid(f"no arithmetic pattern matches target {form.target!r}")
    prompt = prompts.render("math", content="\n".join(f"- {c}" for c in content), target=form.target)
    reply = llm.ask(prompt, kind="math")
    expr, _ = answer_text(reply.text)
    try:
        value = eval_expression(expr)
    except DivisionByZero:
        raise
    except ExpressionError as e:
        raise ExpressionInvalid(f"model expression {expr!r} is not valid: {e}") from None
    return SubAnswer(answer=format_number(value), notes=[f"model: {expr}"], **base)


def solve_output(sub: SubProblem, env: BindingEnv) -> SubAnswer:
    form = sub.action
    if not isinstance(form, Output):
        raise TypeError("solve_output needs an Output action")
    answer = "; ".join(env.lookup(a) for a in form.args)
    return SubAnswer(sub.index, answer, "output", step=substitute_refs(sub.step, env), action=render_action(form))


# ---------------------------------------------------------------------------
# Orchestration


@dataclass
class RunResult:
    final_answer: str
    plan: Plan
    sub_answers: list[SubAnswer]
    trace: RunTrace
    env: BindingEnv


_RUN_ERRORS = (
    LLMError,
    RetrievalError,
    ExpressionError,
    UnboundReference,
    UndefinedAlias,
    RebindError,
)


class Thinker:
    """Runs questions end to end against a chat backend and a retriever."""

    def __init__(
        self,
        llm: ChatBackend,
        retriever: Retriever,
        config: SolveConfig | None = None,
        params: GenParams | None = None,
        system_prompt: str | None = None,
    ):
        self.llm = llm
        self.retriever = retriever
        self.config = config or SolveConfig()
        self.params = params
        self.system_prompt = system_prompt

    def session(self, question: str) -> Session:
        return Session(self.llm, RunTrace(question), self.params, self.system_prompt)

    def run_question(self, question: str, env: BindingEnv | None = None) -> RunResult:
        """Decompose, validate and execute one question.

        Raises :class:`PipelineError` (or :class:`PlanInvalid`) with the
        partial trace attached.
        """
        if not question.strip():
            raise ValueError("question must be nonempty")
        env = env.copy() if env is not None else BindingEnv()
        session = self.session(question)
        trace = session.trace
        try:
            reply = session.ask(build_decomposition_prompt(question), kind="decompose")
            plan = parse_decomposition(reply.text, question)
        except (LLMError, PlanError) as e:
            trace.error = f"{type(e).__name__}: {e}"
            raise PipelineError(f"decomposition failed: {e}", trace) from e
        trace.plan = plan
        violations = validate_plan(plan, prebound=env.by_alias)
        if violations:
            trace.error = "invalid plan"
            raise PlanInvalid(violations, trace)
        return self.execute(plan, env, session)

    def execute(self, plan: Plan, env: BindingEnv, session: Session) -> RunResult:
        trace = session.trace
        trace.plan = plan
        for sub in plan.subs:
            session.index = sub.index
            try:
                answer = self.solve(sub, env, session)
                _bind(sub, answer.answer, env)
            except _RUN_ERRORS as e:
                trace.error = f"step {sub.index}: {type(e).__name__}: {e}"
                raise PipelineError(f"{type(e).__name__}: {e}", trace, sub.index) from e
            trace.subs.append(answer)
        session.index = None
        trace.final_answer = trace.subs[-1].answer if trace.subs else ""
        trace.complete = True
        return RunResult(trace.final_answer, plan, list(trace.subs), trace, env)

    def solve(self, sub: SubProblem, env: BindingEnv, session: Session) -> SubAnswer:
        form = sub.action
        if isinstance(form, Retrieval):
            return solve_retrieval(sub, env, self.config, session, self.retriever)
        if isinstance(form, Deduce):
            return solve_deduce(sub, env, session)
        if isinstance(form, Math):
            return solve_math(sub, env, session)
        return solve_output(sub, env)
