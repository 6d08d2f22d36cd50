"""Chat-completion gateway with scripted and HTTP backends.

Every backend exposes ``complete(messages, params) -> Completion``. Token
probabilities, when requested and available, are linear probabilities in
[0, 1]; adapters convert log-probabilities on the way in.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import httpx

from . import prompts

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
TOKEN_ENV = "THINKER_LLM_TOKEN"


class LLMError(RuntimeError):
    pass


class BackendUnavailable(LLMError):
    pass


class ProtocolError(LLMError):
    pass


class Timeout(LLMError):
    pass


class ScriptParseError(LLMError):
    def __init__(self, message: str, lineno: int):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class ScriptExhausted(LLMError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content and self.role != "system":
            raise ValueError(f"{self.role} message may not be empty")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class Completion:
    """Generated text plus optional ``(token_text, probability)`` pairs.

    The token texts concatenate to a contiguous substring of ``text``.
    """

    text: str
    token_probs: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.token_probs is None:
            return
        for tok, p in self.token_probs:
            if not 0.0 <= p <= 1.0 or math.isnan(p):
                raise ValueError(f"token probability out of range: {tok!r} -> {p}")
        if "".join(t for t, _ in self.token_probs) not in self.text:
            raise ValueError("token texts do not concatenate to a substring of the completion")

    def token_spans(self) -> list[tuple[int, int, float]]:
        """Character ``(start, end, prob)`` for each token."""
        if self.token_probs is None:
            return []
        joined = "".join(t for t, _ in self.token_probs)
        pos = self.text.find(joined) if joined else 0
        spans = []
        for tok, p in self.token_probs:
            spans.append((pos, pos + len(tok), p))
            pos += len(tok)
        return spans


@dataclass(frozen=True)
class GenParams:
    max_tokens: int = 1024
    temperature: float = 0.0
    stop: tuple[str, ...] = ()
    want_token_probs: bool = False

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


class ChatBackend:
    """Base class: argument checks live here, transport in ``_complete``."""

    system_prompt: str | None = None
    default_params = GenParams()

    def complete(self, messages: Sequence[ChatMessage], params: GenParams | None = None) -> Completion:
        if not messages:
            raise ValueError("messages must be nonempty")
        if messages[0].role not in ("system", "user"):
            raise ValueError("first message must be system or user")
        return self._complete(tuple(messages), params or self.default_params)

    def _complete(self, messages: tuple[ChatMessage, ...], params: GenParams) -> Completion:
        raise NotImplementedError

    def ask(self, prompt: str, *, want_token_probs: bool = False, **_: Any) -> Completion:
        """One-shot call: optional system prompt plus a single user turn."""
        system = self.system_prompt if self.system_prompt is not None else prompts.load("system")
        msgs = [ChatMessage("system", system), ChatMessage("user", prompt)]
        params = GenParams(
            max_tokens=self.default_params.max_tokens,
            temperature=self.default_params.temperature,
            stop=self.default_params.stop,
            want_token_probs=want_token_probs,
        )
        return self.complete(msgs, params)


# ---------------------------------------------------------------------------
# Scripted backend


@dataclass(frozen=True)
class ScriptEntry:
    reply: str
    match: tuple[str, ...] | None = None
    token_probs: tuple[tuple[str, float], ...] | None = None
    line: int = 0

    def matches(self, user_text: str) -> bool:
        return self.match is not None and all(m in user_text for m in self.match)


_WORD_RE = re.compile(r"\s*\S+")


def _segment(reply: str, probs: Sequence[float]) -> tuple[tuple[str, float], ...]:
    words = _WORD_RE.findall(reply)
    if len(words) != len(probs):
        raise ValueError(
            f"{len(probs)} probabilities given but the reply has {len(words)} whitespace-separated tokens"
        )
    return tuple((w, float(p)) for w, p in zip(words, probs))


def make_entry(
    reply: str,
    match: str | Iterable[str] | None = None,
    token_probs: Sequence[Any] | None = None,
    line: int = 0,
) -> ScriptEntry:
    """Build a script entry from loose JSON-ish values.

    ``token_probs`` is either a list of numbers, one per whitespace-separated
    word of ``reply``, or explicit ``[text, prob]`` pairs / ``{"text", "prob"}``
    objects.
    """
    if not isinstance(reply, str):
        raise ValueError("reply must be a string")
    if match is not None:
        match = (match,) if isinstance(match, str) else tuple(match)
        if not match or not all(isinstance(m, str) and m for m in match):
            raise ValueError("match must be a nonempty string or list of strings")
    pairs = None
    if token_probs is not None:
        items = list(token_probs)
        if all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in items):
            pairs = _segment(reply, items)
        else:
            out = []
            for x in items:
                if isinstance(x, dict):
                    out.append((str(x["text"]), float(x["prob"])))
                elif isinstance(x, (list, tuple)) and len(x) == 2:
                    out.append((str(x[0]), float(x[1])))
                else:
                    raise ValueError(f"bad token_probs item {x!r}")
            pairs = tuple(out)
        Completion(reply, pairs)  # range and alignment checks
    return ScriptEntry(reply, match, pairs, line)


def _last_user(messages: Sequence[ChatMessage]) -> str:
    for m in reversed(messages):
        if m.role == "user":
            return m.content
    return ""


class ScriptedBackend(ChatBackend):
    """Replays canned replies.

    On each call the first unconsumed entry whose ``match`` substrings all
    occur in the last user message is used; failing that, the first
    unconsumed entry without a ``match``. Calls are serialized, so a shared
    instance is safe but order-dependent; use :meth:`clone` for independent
    runs.
    """

    def __init__(self, entries: Iterable[ScriptEntry] = (), system_prompt: str | None = None):
        self.entries: tuple[ScriptEntry, ...] = tuple(entries)
        self.system_prompt = system_prompt
        self._used = [False] * len(self.entries)
        self._lock = threading.Lock()
        self.calls: list[tuple[tuple[ChatMessage, ...], Completion]] = []

    @classmethod
    def from_replies(cls, *replies: str) -> "ScriptedBackend":
        return cls(make_entry(r) for r in replies)

    def clone(self) -> "ScriptedBackend":
        return ScriptedBackend(self.entries, self.system_prompt)

    @property
    def remaining(self) -> int:
        return self._used.count(False)

    def _pick(self, user_text: str) -> int:
        fallback = None
        for i, entry in enumerate(self.entries):
            if self._used[i]:
                continue
            if entry.match is None:
                if fallback is None:
                    fallback = i
            elif entry.matches(user_text):
                return i
        if fallback is None:
            raise ScriptExhausted(f"no script entry left for: {user_text[:80]!r}")
        return fallback

    def _complete(self, messages: tuple[ChatMessage, ...], params: GenParams) -> Completion:
        with self._lock:
            i = self._pick(_last_user(messages))
            self._used[i] = True
            entry = self.entries[i]
            probs = entry.token_probs if params.want_token_probs else None
            result = Completion(entry.reply, probs)
            self.calls.append((messages, result))
            return result


def _iter_array(text: str) -> Iterable[tuple[Any, int]]:
    """Yield ``(element, line)`` for each element of a top-level JSON array."""
    decoder = json.JSONDecoder()
    n = len(text)

    def skip(i: int) -> int:
        while i < n and text[i].isspace():
            i += 1
        return i

    def line_of(i: int) -> int:
        return text.count("\n", 0, i) + 1

    i = skip(0)
    if i >= n or text[i] != "[":
        raise ScriptParseError("script must be a JSON array", line_of(i))
    i = skip(i + 1)
    while True:
        if i >= n:
            raise ScriptParseError("unterminated array", line_of(i))
        if text[i] == "]":
            break
        try:
            obj, end = decoder.raw_decode(text, i)
        except json.JSONDecodeError as e:
            raise ScriptParseError(e.msg, e.lineno) from None
        yield obj, line_of(i)
        i = skip(end)
        if i < n and text[i] == ",":
            i = skip(i + 1)
        elif i < n and text[i] == "]":
            break
        else:
            raise ScriptParseError("expected ',' or ']'", line_of(i))
    if skip(i + 1) != n:
        raise ScriptParseError("trailing data after array", line_of(i + 1))


def script_load(path: str | os.PathLike[str]) -> ScriptedBackend:
    """Load a scripted backend from a JSON array of entries."""
    text = Path(path).read_text(encoding="utf-8")
    entries = []
    for obj, line in _iter_array(text):
        if not isinstance(obj, dict) or "reply" not in obj:
            raise ScriptParseError("entry must be an object with a 'reply'", line)
        unknown = set(obj) - {"reply", "match", "token_probs", "tokens"}
        if unknown:
            raise ScriptParseError(f"unknown keys {sorted(unknown)}", line)
        try:
            entries.append(
                make_entry(obj["reply"], obj.get("match"), obj.get("token_probs", obj.get("tokens")), line)
            )
        except (ValueError, KeyError, TypeError) as e:
            raise ScriptParseError(str(e), line) from None
    return ScriptedBackend(entries)


# ---------------------------------------------------------------------------
# HTTP backend


def _prob(tok: dict[str, Any]) -> float:
    if "prob" in tok:
        return float(tok["prob"])
    return math.exp(float(tok["logprob"]))


class HttpBackend(ChatBackend):
    """POSTs the neutral chat schema to a single endpoint.

    Request: ``{model, messages, max_tokens, temperature, stop, logprobs}``.
    Reply: ``{text, tokens: [{text, prob}]}`` (``logprob`` is also accepted).
    Transport failures and timeouts are retried up to ``retries`` times.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "",
        *,
        token: str | None = None,
        timeout: float = 60.0,
        retries: int = 2,
        temperature: float = 0.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url
        self.model = model
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.retries = retries
        self.default_params = GenParams(temperature=temperature)
        self._client = client or httpx.Client(timeout=timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def _payload(self, messages: tuple[ChatMessage, ...], params: GenParams) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [m.to_dict() for m in messages],
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "stop": list(params.stop),
            "logprobs": params.want_token_probs,
        }

    def _parse(self, data: Any, params: GenParams) -> Completion:
        if not isinstance(data, dict) or not isinstance(data.get("text"), str):
            raise ProtocolError("reply lacks a 'text' string")
        text = data["text"]
        tokens = data.get("tokens")
        if not params.want_token_probs or not tokens:
            return Completion(text)
        try:
            pairs = tuple((str(t["text"]), _prob(t)) for t in tokens)
            return Completion(text, pairs)
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed tokens: {e}") from None

    def _post(self, payload: dict[str, Any]) -> httpx.Response:
        last: LLMError | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.base_url, json=payload, headers=self._headers())
            except httpx.TimeoutException as e:
                last = Timeout(f"{self.base_url}: {e}")
            except httpx.TransportError as e:
                last = BackendUnavailable(f"{self.base_url}: {e}")
            else:
                if resp.status_code >= 500:
                    last = BackendUnavailable(f"{self.base_url}: HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise ProtocolError(f"{self.base_url}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return resp
            logger.warning("llm request failed (attempt %d): %s", attempt + 1, last)
        assert last is not None
        raise last

    def _complete(self, messages: tuple[ChatMessage, ...], params: GenParams) -> Completion:
        resp = self._post(self._payload(messages, params))
        try:
            data = resp.json()
        except ValueError:
            raise ProtocolError("reply is not JSON") from None
        return self._parse(data, params)


class OpenAIChatBackend(HttpBackend):
    """Adapter for OpenAI-style ``/chat/completions`` endpoints."""

    def _payload(self, messages: tuple[ChatMessage, ...], params: GenParams) -> dict[str, Any]:
        payload = super()._payload(messages, params)
        if not payload["stop"]:
            del payload["stop"]
        return payload

    def _parse(self, data: Any, params: GenParams) -> Completion:
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise ProtocolError("reply lacks choices[0].message.content") from None
        content = ((choice.get("logprobs") or {}).get("content")) or []
        if not params.want_token_probs or not content:
            return Completion(text)
        try:
            pairs = tuple((str(t["token"]), math.exp(float(t["logprob"]))) for t in content)
            return Completion(text, pairs)
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed logprobs: {e}") from None
