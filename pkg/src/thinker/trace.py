"""Per-question conversation state and the persisted run trace."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from . import prompts
from .llm import ChatBackend, ChatMessage, Completion, GenParams, ProtocolError
from .planning import Plan

if TYPE_CHECKING:
    from .solver import SubAnswer


@dataclass
class RunTrace:
    """Everything one question run said, retrieved and decided.

    ``messages`` is the conversation exactly as sent: a system turn, then
    alternating user/assistant turns. ``exchanges`` has one metadata record
    per assistant turn (``kind``, sub-problem ``index``, depth ``turn``).
    """

    question: str
    messages: list[ChatMessage] = field(default_factory=list)
    exchanges: list[dict[str, Any]] = field(default_factory=list)
    plan: Plan | None = None
    subs: list["SubAnswer"] = field(default_factory=list)
    final_answer: str | None = None
    error: str | None = None
    complete: bool = False

    @property
    def counters(self) -> dict[str, int]:
        retrieval_subs = [s for s in self.subs if s.via in ("direct", "depth")]
        return {
            "llm_calls": len(self.exchanges),
            "retrievals": sum(len(s.turns) for s in self.subs),
            "kbd_skips": sum(1 for s in self.subs if s.via == "direct"),
            "retrieval_subs": len(retrieval_subs),
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "plan": self.plan.to_dict() if self.plan else None,
            "subs": [s.to_dict() for s in self.subs],
            "final_answer": self.final_answer,
            "counters": self.counters,
            "complete": self.complete,
            "error": self.error,
            "messages": [m.to_dict() for m in self.messages],
            "exchanges": self.exchanges,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunTrace":
        from .solver import SubAnswer

        return cls(
            question=data["question"],
            messages=[ChatMessage(m["role"], m["content"]) for m in data.get("messages", [])],
            exchanges=list(data.get("exchanges", [])),
            plan=Plan.from_dict(data["plan"]) if data.get("plan") else None,
            subs=[SubAnswer.from_dict(s) for s in data.get("subs", [])],
            final_answer=data.get("final_answer"),
            error=data.get("error"),
            complete=bool(data.get("complete", False)),
        )

    def save(self, path: str | os.PathLike[str]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "RunTrace":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class Session:
    """A single growing conversation with the model.

    Each :meth:`ask` sends the whole history plus one new user turn and
    records the reply in the trace.
    """

    def __init__(
        self,
        llm: ChatBackend,
        trace: RunTrace,
        params: GenParams | None = None,
        system_prompt: str | None = None,
    ):
        self.llm = llm
        self.trace = trace
        self.params = params or GenParams()
        self.index: int | None = None
        if not trace.messages:
            system = system_prompt if system_prompt is not None else prompts.load("system")
            trace.messages.append(ChatMessage("system", system))

    def ask(
        self,
        prompt: str,
        *,
        want_token_probs: bool = False,
        kind: str = "",
        turn: int | None = None,
    ) -> Completion:
        user = ChatMessage("user", prompt)
        params = GenParams(
            max_tokens=self.params.max_tokens,
            temperature=self.params.temperature,
            stop=self.params.stop,
            want_token_probs=want_token_probs,
        )
        completion = self.llm.complete([*self.trace.messages, user], params)
        if not completion.text:
            raise ProtocolError(f"empty reply to {kind or 'prompt'}")
        self.trace.messages += [user, ChatMessage("assistant", completion.text)]
        self.trace.exchanges.append({"kind": kind, "index": self.index, "turn": turn})
        return completion
