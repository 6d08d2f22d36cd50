"""Document retrieval: an in-memory lexical retriever and an HTTP client.

Lexical scoring, over lowercase alphanumeric terms::

    score(q, d) = sum over unique terms t of q:  tf(t, d) * ln(1 + N / df(t))

where ``tf`` counts occurrences in the body plus twice the occurrences in
the title, ``N`` is the corpus size and ``df`` the number of documents
containing ``t``. Terms absent from the corpus contribute nothing.
Results are ordered by score descending, then id ascending.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Protocol

import httpx

DEFAULT_TOP_K = 3

_TERM_RE = re.compile(r"[a-z0-9]+")


class RetrievalError(RuntimeError):
    pass


class EndpointError(RetrievalError):
    pass


class CorpusError(RetrievalError):
    pass


def terms(text: str) -> list[str]:
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    body: str
    score: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "title": self.title, "text": self.body, "score": self.score}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Document":
        return cls(
            str(data["id"]),
            str(data.get("title", "")),
            str(data.get("text", data.get("body", ""))),
            float(data.get("score", 0.0)),
        )


@dataclass(frozen=True)
class SpoTerm:
    type_name: str | None = None
    name: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"type": self.type_name, "name": self.name}


@dataclass(frozen=True)
class Spo:
    """Structured triple of a Retrieval action with aliases resolved."""

    s: SpoTerm
    p: str | None
    o: SpoTerm
    constraints: tuple[tuple[str, str, str], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "s": self.s.to_dict(),
            "p": self.p,
            "o": self.o.to_dict(),
            "constraints": [{"target": t, "prop": k, "value": v} for t, k, v in self.constraints],
        }

    def words(self) -> list[str]:
        parts = [self.s.type_name, self.s.name, self.p, self.o.type_name, self.o.name]
        parts += [f"{k} {v}" for _, k, v in self.constraints]
        return [x for x in parts if x]


@dataclass(frozen=True)
class RetrievalQuery:
    step_text: str
    spo: Spo | None = None

    def __post_init__(self) -> None:
        if not self.step_text.strip():
            raise ValueError("step_text must be nonempty")

    def lexical_text(self) -> str:
        """Step text with the resolved SPO names and types appended."""
        if self.spo is None:
            return self.step_text
        return " ".join([self.step_text, *self.spo.words()])


class Retriever(Protocol):
    def retrieve(self, query: RetrievalQuery, k: int = DEFAULT_TOP_K) -> list[Document]: ...


def rank(docs: Iterable[Document], k: int) -> list[Document]:
    return heapq.nsmallest(k, docs, key=lambda d: (-d.score, d.id))


@dataclass
class Corpus:
    documents: list[Document]
    path: str | None = None
    _ids: set[str] = field(default_factory=set, init=False, repr=False)

    def __post_init__(self) -> None:
        for doc in self.documents:
            if not doc.id:
                raise CorpusError("document id must be nonempty")
            if doc.id in self._ids:
                raise CorpusError(f"duplicate document id {doc.id!r}")
            self._ids.add(doc.id)

    def __len__(self) -> int:
        return len(self.documents)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "Corpus":
        """Read one JSON object ``{id, title, text}`` per line."""
        docs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    docs.append(Document.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as e:
                    raise CorpusError(f"{path}:{lineno}: {e}") from None
        return cls(docs, str(path))


class LexicalRetriever:
    """Inverted-index retriever over an immutable in-memory corpus."""

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self._tf: list[Counter[str]] = []
        self._postings: dict[str, list[int]] = {}
        for i, doc in enumerate(corpus.documents):
            tf = Counter(terms(doc.body))
            for t in terms(doc.title):
                tf[t] += 2
            self._tf.append(tf)
            for t in tf:
                self._postings.setdefault(t, []).append(i)
        n = len(corpus)
        self._idf = {t: math.log(1 + n / len(ids)) for t, ids in self._postings.items()}

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> "LexicalRetriever":
        return cls(Corpus.load(path))

    def idf(self, term: str) -> float:
        return self._idf.get(term, 0.0)

    def score(self, query_text: str, doc: Document) -> float:
        """Score one document directly from its text."""
        tf = Counter(terms(doc.body))
        for t in terms(doc.title):
            tf[t] += 2
        total = 0.0
        for t in sorted(set(terms(query_text))):
            if tf[t]:
                total += tf[t] * self.idf(t)
        return total

    def retrieve(self, query: RetrievalQuery, k: int = DEFAULT_TOP_K) -> list[Document]:
        if k < 1:
            raise ValueError("k must be positive")
        docs = self.corpus.documents
        if not docs:
            return []
        scores = [0.0] * len(docs)
        for t in sorted(set(terms(query.lexical_text()))):
            idf = self._idf.get(t)
            if idf is None:
                continue
            for i in self._postings[t]:
                scores[i] += self._tf[i][t] * idf
        return rank((replace(d, score=s) for d, s in zip(docs, scores)), k)


class HttpRetriever:
    """Client for ``POST {endpoint}/retrieve``."""

    def __init__(self, endpoint: str, *, timeout: float = 30.0, client: httpx.Client | None = None):
        self.url = endpoint.rstrip("/") + "/retrieve"
        self._client = client or httpx.Client(timeout=timeout)

    def retrieve(self, query: RetrievalQuery, k: int = DEFAULT_TOP_K) -> list[Document]:
        if k < 1:
            raise ValueError("k must be positive")
        payload = {
            "query": query.step_text,
            "spo": query.spo.to_dict() if query.spo else None,
            "top_k": k,
        }
        try:
            resp = self._client.post(self.url, json=payload)
            resp.raise_for_status()
            data = resp.json()
            docs = [Document.from_dict(d) for d in data["documents"]]
        except httpx.HTTPError as e:
            raise EndpointError(f"{self.url}: {e}") from None
        except (ValueError, KeyError, TypeError) as e:
            raise EndpointError(f"{self.url}: malformed reply: {e}") from None
        return rank(docs, k)

