"""Datasets, EM/F1 scoring, run reports and SFT-sample export."""

from __future__ import annotations

import json
import logging
import os
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .llm import ChatMessage
from .trace import RunTrace

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class TraceIncomplete(ValueError):
    pass


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    golden_answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.golden_answers:
            raise ValueError(f"item {self.id!r} has no golden answers")


def load_dataset(path: str | os.PathLike[str]) -> list[QAItem]:
    """One ``{id, question, golden_answers}`` object per line."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                golds = row["golden_answers"]
                if isinstance(golds, str):
                    golds = [golds]
                items.append(QAItem(str(row["id"]), row["question"], tuple(str(g) for g in golds)))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
    return items


# ---------------------------------------------------------------------------
# Metrics

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())


def em(pred: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("golds must be nonempty")
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1_one(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(pred: str, golds: Sequence[str]) -> float:
    """Token-multiset F1 after normalization, best over the gold answers."""
    if not golds:
        raise ValueError("golds must be nonempty")
    p = normalize_answer(pred).split()
    return max(_f1_one(p, normalize_answer(g).split()) for g in golds)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ItemResult:
    id: str
    prediction: str | None
    em: int
    f1: float
    retrievals: int
    kbd_skips: int
    retrieval_subs: int
    error: str | None = None


@dataclass
class EvalReport:
    n: int
    avg_em: float | None
    avg_f1: float | None
    avg_retrievals_per_sample: float | None
    kbd_skip_rate: float | None
    per_item: list[ItemResult] = field(default_factory=list)

    @classmethod
    def from_items(cls, items: Sequence[ItemResult]) -> "EvalReport":
        n = len(items)
        if n == 0:
            return cls(0, None, None, None, None, [])
        subs = sum(i.retrieval_subs for i in items)
        return cls(
            n=n,
            avg_em=sum(i.em for i in items) / n,
            avg_f1=sum(i.f1 for i in items) / n,
            avg_retrievals_per_sample=sum(i.retrievals for i in items) / n,
            # pooled over all Retrieval sub-problems, not averaged per item
            kbd_skip_rate=sum(i.kbd_skips for i in items) / subs if subs else None,
            per_item=list(items),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def summary(self) -> str:
        def fmt(x: float | None) -> str:
            return "n/a" if x is None else f"{x:.4f}"

        return (
            f"n={self.n} em={fmt(self.avg_em)} f1={fmt(self.avg_f1)} "
            f"retrievals/sample={fmt(self.avg_retrievals_per_sample)} kbd_skip_rate={fmt(self.kbd_skip_rate)}"
        )


def score_item(item: QAItem, trace: RunTrace | None, error: str | None = None) -> ItemResult:
    counters = trace.counters if trace is not None else {}
    pred = trace.final_answer if trace is not None and error is None else None
    return ItemResult(
        id=item.id,
        prediction=pred,
        em=em(pred, item.golden_answers) if pred is not None else 0,
        f1=f1(pred, item.golden_answers) if pred is not None else 0.0,
        retrievals=counters.get("retrievals", 0),
        kbd_skips=counters.get("kbd_skips", 0),
        retrieval_subs=counters.get("retrieval_subs", 0),
        error=error,
    )


def run_eval(
    dataset: Sequence[QAItem],
    thinker: Any,
    *,
    workers: int = 1,
    trace_dir: str | os.PathLike[str] | None = None,
    on_trace: Callable[[QAItem, RunTrace], None] | None = None,
) -> EvalReport:
    """Run every item and score it; failures score zero and the run goes on.

    ``thinker`` is a :class:`~thinker.solver.Thinker` or a zero-argument
    factory returning one (called once per item, for per-run backends).
    """
    from .solver import PipelineError

    if workers < 1:
        raise ValueError("workers must be at least 1")

    def one(item: QAItem) -> tuple[ItemResult, RunTrace | None]:
        runner = thinker() if callable(thinker) and not hasattr(thinker, "run_question") else thinker
        trace: RunTrace | None = None
        error = None
        try:
            trace = runner.run_question(item.question).trace
        except PipelineError as e:
            trace, error = e.trace, str(e)
        except Exception as e:  # noqa: BLE001 - one bad item must not sink the run
            error = f"{type(e).__name__}: {e}"
        if error:
            logger.warning("item %s failed: %s", item.id, error)
        if trace is not None and trace_dir is not None:
            trace.save(Path(trace_dir) / f"{_safe(item.id)}.json")
        return score_item(item, trace, error), trace

    if workers == 1:
        outcomes = [one(it) for it in dataset]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, dataset))
    if on_trace is not None:
        for item, (_, trace) in zip(dataset, outcomes):
            if trace is not None:
                on_trace(item, trace)
    return EvalReport.from_items([r for r, _ in outcomes])


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) or "item"


# ---------------------------------------------------------------------------
# SFT export


@dataclass(frozen=True)
class SftTurn:
    role: str
    content: str
    loss: bool


@dataclass(frozen=True)
class SftSample:
    turns: tuple[SftTurn, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"turns": [asdict(t) for t in self.turns]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SftSample":
        return cls(tuple(SftTurn(t["role"], t["content"], bool(t["loss"])) for t in data["turns"]))

    def messages(self) -> list[ChatMessage]:
        return [ChatMessage(t.role, t.content) for t in self.turns]


def export_sft(trace: RunTrace) -> SftSample:
    """The run's conversation as issued, with loss on assistant turns only."""
    if not trace.complete:
        raise TraceIncomplete(f"run did not finish: {trace.error or 'incomplete trace'}")
    msgs = trace.messages
    if not msgs or msgs[0].role != "system":
        raise TraceIncomplete("trace does not start with a system turn")
    if not any(m.role == "assistant" for m in msgs):
        raise TraceIncomplete("trace has no assistant turns")
    return SftSample(tuple(SftTurn(m.role, m.content, m.role == "assistant") for m in msgs))


def write_sft(samples: Iterable[SftSample], path: str | os.PathLike[str]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_sft(path: str | os.PathLike[str]) -> list[SftSample]:
    with open(path, encoding="utf-8") as fh:
        return [SftSample.from_dict(json.loads(line)) for line in fh if line.strip()]
