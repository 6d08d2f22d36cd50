"""Parser, AST and canonical printer for the logical-form action language.

An action is one of four function calls::

    Retrieval(s=s1:film[`Hit Parade Of 1947'], p=p1:director, o=o1:director)
    Deduce(op=choice, content=[`o2',`o4'], target=`which film ...')->o5
    Math(content=[o1, o2], target=`total amount')->math3
    Output(o3)

The grammar is documented in ``docs/grammar.md``. Parsing is a hand-written
recursive descent over characters, so every failure carries a position.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Union

__all__ = [
    "ActionSyntaxError",
    "ContentItem",
    "Deduce",
    "DeduceOp",
    "EntityRef",
    "LogicalForm",
    "LogicalFormError",
    "Math",
    "Output",
    "PropertyConstraint",
    "Retrieval",
    "UnboundReference",
    "UnknownDeduceOp",
    "UnknownFunction",
    "find_refs",
    "is_alias",
    "parse_action",
    "render_action",
    "substitute_refs",
]

ALIAS_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
REF_RE = re.compile(r"#(\d+)")

BACKTICK = "`'"
APOSTROPHE = "'"
BARE = ""

FUNCTIONS = ("Retrieval", "Deduce", "Math", "Output")
SLOTS = ("s", "p", "o")


def is_alias(text: str) -> bool:
    return ALIAS_RE.fullmatch(text) is not None


class LogicalFormError(ValueError):
    """Base class for positioned parse failures."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (column {position + 1})")


class ActionSyntaxError(LogicalFormError):
    def __init__(self, position: int, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f"expected {expected}, found {found}", position)


class UnknownFunction(LogicalFormError):
    def __init__(self, name: str, position: int):
        self.name = name
        super().__init__(f"unknown function {name!r}", position)


class UnknownDeduceOp(LogicalFormError):
    def __init__(self, op: str, position: int):
        self.op = op
        super().__init__(f"unknown deduce op {op!r}", position)


class UnboundReference(KeyError):
    def __init__(self, k: int):
        self.k = k
        super().__init__(f"#{k} has no binding")

    def __str__(self) -> str:
        return self.args[0]


class DeduceOp(str, Enum):
    EXTRACT = "extract"
    JUDGEMENT = "judgement"
    ENTAILMENT = "entailment"
    CHOICE = "choice"
    MULTI_CHOICE = "multiChoice"


_OPS = {op.value: op for op in DeduceOp}


# ---------------------------------------------------------------------------
# AST


def _check_text(value: str | None, what: str, forbidden: str = "") -> None:
    if value is None:
        return
    if not value or value != value.strip():
        raise ValueError(f"{what} must be nonempty and trimmed: {value!r}")
    bad = [c for c in forbidden if c in value]
    if bad:
        raise ValueError(f"{what} may not contain {''.join(bad)!r}: {value!r}")


@dataclass(frozen=True)
class EntityRef:
    """One s/p/o slot: ``alias[:type][[name]]``.

    A bare alias (no type, no name) points back at an earlier variable.
    ``name_quote`` remembers how the name was quoted in the source and
    takes no part in equality.
    """

    alias: str
    type_name: str | None = None
    display_name: str | None = None
    name_quote: str = field(default=BACKTICK, compare=False)

    def __post_init__(self) -> None:
        if not is_alias(self.alias):
            raise ValueError(f"invalid alias {self.alias!r}")
        _check_text(self.type_name, "type", "[](),=`'")
        if self.display_name is not None and not self.display_name.strip():
            raise ValueError("display name must be nonempty")

    @property
    def is_back_reference(self) -> bool:
        return self.type_name is None and self.display_name is None


@dataclass(frozen=True)
class PropertyConstraint:
    target: str
    prop_name: str
    value: str

    def __post_init__(self) -> None:
        if self.target not in SLOTS:
            raise ValueError(f"constraint target must be s, p or o: {self.target!r}")
        _check_text(self.prop_name, "property name", "=(),[]`'")
        if not self.value.strip():
            raise ValueError("constraint value must be nonempty")


@dataclass(frozen=True)
class ContentItem:
    """Literal text or an alias reference inside a ``content=[...]`` list.

    Identifier-shaped items are alias references whether quoted or not.
    ``quote`` is the source quoting (``"`'"``, ``"'"`` or ``""``) and is
    part of equality so that literals round-trip verbatim.
    """

    text: str
    quote: str = BARE

    def __post_init__(self) -> None:
        if self.quote not in (BACKTICK, APOSTROPHE, BARE):
            raise ValueError(f"bad quote style {self.quote!r}")
        if not self.text.strip():
            raise ValueError("content item must be nonempty")
        if self.quote == BARE and not _bare_ok(self.text, stops=",]"):
            raise ValueError(f"unquoted content item cannot be printed bare: {self.text!r}")

    @property
    def is_alias(self) -> bool:
        return is_alias(self.text)


@dataclass(frozen=True)
class Retrieval:
    s: EntityRef
    p: EntityRef
    o: EntityRef
    constraints: tuple[PropertyConstraint, ...] = ()

    def slots(self) -> tuple[tuple[str, EntityRef], ...]:
        return (("s", self.s), ("p", self.p), ("o", self.o))

    def aliases(self) -> set[str]:
        return {self.s.alias, self.p.alias, self.o.alias}


@dataclass(frozen=True)
class Deduce:
    op: DeduceOp
    content: tuple[ContentItem, ...]
    target: str
    out: str
    # further ops of a usage template such as ``op=extract|judgement``
    alt_ops: tuple[DeduceOp, ...] = ()

    def __post_init__(self) -> None:
        if not self.target.strip():
            raise ValueError("target must be nonempty")
        if not is_alias(self.out):
            raise ValueError(f"invalid output alias {self.out!r}")

    def aliases(self) -> set[str]:
        return {c.text for c in self.content if c.is_alias} | {self.out}


@dataclass(frozen=True)
class Math:
    content: tuple[ContentItem, ...]
    target: str
    out: str

    def __post_init__(self) -> None:
        if not self.target.strip():
            raise ValueError("target must be nonempty")
        if not is_alias(self.out):
            raise ValueError(f"invalid output alias {self.out!r}")

    def aliases(self) -> set[str]:
        return {c.text for c in self.content if c.is_alias} | {self.out}


@dataclass(frozen=True)
class Output:
    args: tuple[str, ...]
    # trailing ``...`` as written in usage templates
    variadic: bool = False

    def __post_init__(self) -> None:
        if not self.args:
            raise ValueError("Output needs at least one argument")
        for a in self.args:
            if not is_alias(a):
                raise ValueError(f"invalid alias {a!r}")

    def aliases(self) -> set[str]:
        return set(self.args)


LogicalForm = Union[Retrieval, Deduce, Math, Output]


# ---------------------------------------------------------------------------
# Parsing

_OPEN = "([{"
_CLOSE = ")]}"


def _bare_ok(text: str, stops: str) -> bool:
    """True when ``text`` reads back unchanged as an unquoted value."""
    if not text or text != text.strip() or text[0] in "`'":
        return False
    depth = 0
    for ch in text:
        if ch in _OPEN:
            depth += 1
        elif ch in _CLOSE:
            depth -= 1
            if depth < 0:
                return False
        elif depth == 0 and ch in stops:
            return False
    return depth == 0


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    # -- low level -------------------------------------------------------

    def ws(self) -> None:
        n = len(self.text)
        while self.pos < n and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def found(self) -> str:
        ch = self.peek()
        return repr(ch) if ch else "end of input"

    def fail(self, expected: str) -> ActionSyntaxError:
        return ActionSyntaxError(self.pos, expected, self.found())

    def expect(self, token: str) -> None:
        self.ws()
        if not self.text.startswith(token, self.pos):
            raise self.fail(repr(token))
        self.pos += len(token)

    def accept(self, token: str) -> bool:
        self.ws()
        if self.text.startswith(token, self.pos):
            self.pos += len(token)
            return True
        return False

    def ident(self, what: str = "identifier") -> str:
        self.ws()
        m = ALIAS_RE.match(self.text, self.pos)
        if not m:
            raise self.fail(what)
        self.pos = m.end()
        return m.group()

    def quoted(self, stops: str) -> tuple[str, str]:
        """Read a quoted string starting at the current position.

        The closing apostrophe is the first one followed (after optional
        whitespace) by one of ``stops`` or the end of input, so text such as
        ``What's`` needs no escaping. ``\\'`` and ``\\\\`` are escapes.
        """
        style = BACKTICK if self.text[self.pos] == "`" else APOSTROPHE
        start = self.pos
        self.pos += 1
        out: list[str] = []
        n = len(self.text)
        while self.pos < n:
            ch = self.text[self.pos]
            if ch == "\\" and self.pos + 1 < n and self.text[self.pos + 1] in "\\'":
                out.append(self.text[self.pos + 1])
                self.pos += 2
                continue
            if ch == "'":
                j = self.pos + 1
                while j < n and self.text[j].isspace():
                    j += 1
                if j == n or self.text[j] in stops:
                    self.pos += 1
                    return "".join(out), style
            out.append(ch)
            self.pos += 1
        raise ActionSyntaxError(start, "closing apostrophe", "end of input")

    def bare(self, stops: str, what: str) -> str:
        """Read unquoted text up to a top-level stop character."""
        self.ws()
        start = self.pos
        depth = 0
        n = len(self.text)
        while self.pos < n:
            ch = self.text[self.pos]
            if depth == 0 and ch in stops:
                break
            if ch in _OPEN:
                depth += 1
            elif ch in _CLOSE:
                if depth == 0:
                    break
                depth -= 1
            self.pos += 1
        value = self.text[start : self.pos].strip()
        if not value:
            self.pos = start
            raise self.fail(what)
        return value

    def value(self, stops: str, what: str) -> tuple[str, str]:
        ch = self.peek()
        if ch in ("`", "'"):
            text, style = self.quoted(stops)
            if not text.strip():
                raise ActionSyntaxError(self.pos - 1, what, "empty quotes")
            return text, style
        return self.bare(stops, what), BARE

    # -- grammar ---------------------------------------------------------

    def action(self) -> LogicalForm:
        self.ws()
        start = self.pos
        name = self.ident("function name")
        if name not in FUNCTIONS:
            raise UnknownFunction(name, start)
        self.expect("(")
        form = getattr(self, "_" + name.lower())()
        self.ws()
        if self.pos != len(self.text):
            raise self.fail("end of input")
        return form

    def arrow(self) -> str:
        self.ws()
        if not (self.accept("->") or self.accept("→")):
            raise self.fail("'->'")
        return self.ident("output alias")

    def _retrieval(self) -> Retrieval:
        slots: dict[str, EntityRef] = {}
        constraints: list[PropertyConstraint] = []
        while True:
            self.ws()
            key_pos = self.pos
            key = self.ident("'s', 'p' or 'o'")
            if key not in SLOTS:
                raise ActionSyntaxError(key_pos, "'s', 'p' or 'o'", repr(key))
            if self.accept("."):
                prop = self.bare("=,)", "property name")
                if any(c in prop for c in "[]()`'"):
                    raise ActionSyntaxError(self.pos, "property name", repr(prop))
                self.expect("=")
                val, _ = self.value(",)", "constraint value")
                constraints.append(PropertyConstraint(key, prop, val))
            else:
                if key in slots:
                    raise ActionSyntaxError(key_pos, f"a single {key}= argument", f"repeated {key}=")
                self.expect("=")
                slots[key] = self.entity()
            if self.accept(","):
                continue
            self.expect(")")
            break
        for key in SLOTS:
            if key not in slots:
                raise ActionSyntaxError(self.pos, f"{key}= argument", "')'")
        return Retrieval(slots["s"], slots["p"], slots["o"], tuple(constraints))

    def entity(self) -> EntityRef:
        alias = self.ident("alias")
        type_name = None
        name = None
        quote = BACKTICK
        if self.accept(":"):
            self.ws()
            if self.peek() != "[":
                type_name = self.bare("[,)", "type")
                if any(c in type_name for c in "=`'()]"):
                    raise ActionSyntaxError(self.pos, "type", repr(type_name))
        if self.accept("["):
            self.ws()
            if self.peek() in ("`", "'"):
                name, quote = self.quoted("]")
                if not name.strip():
                    raise ActionSyntaxError(self.pos - 1, "name", "empty quotes")
            else:
                name = self.bare(",]", "name")
                quote = BARE
            self.expect("]")
        return EntityRef(alias, type_name, name, quote)

    def _kwargs(self, allowed: tuple[str, ...]) -> dict[str, object]:
        got: dict[str, object] = {}
        while True:
            self.ws()
            key_pos = self.pos
            key = self.ident(" or ".join(allowed))
            if key not in allowed:
                raise ActionSyntaxError(key_pos, " or ".join(allowed), repr(key))
            if key in got:
                raise ActionSyntaxError(key_pos, f"a single {key}= argument", f"repeated {key}=")
            self.expect("=")
            if key == "op":
                got[key] = self.ops()
            elif key == "content":
                got[key] = self.content()
            else:
                got[key] = self.value(",)", "target")[0]
            if self.accept(","):
                continue
            self.expect(")")
            break
        for key in allowed:
            if key not in got:
                raise ActionSyntaxError(self.pos, f"{key}= argument", "')'")
        return got

    def ops(self) -> tuple[DeduceOp, ...]:
        ops = []
        while True:
            self.ws()
            start = self.pos
            word = self.ident("deduce op")
            if word not in _OPS:
                raise UnknownDeduceOp(word, start)
            ops.append(_OPS[word])
            if not self.accept("|"):
                return tuple(ops)

    def content(self) -> tuple[ContentItem, ...]:
        self.expect("[")
        items: list[ContentItem] = []
        if self.accept("]"):
            return ()
        while True:
            text, quote = self.value(",]", "content item")
            items.append(ContentItem(text, quote))
            if self.accept(","):
                continue
            self.expect("]")
            return tuple(items)

    def _deduce(self) -> Deduce:
        kw = self._kwargs(("op", "content", "target"))
        ops = kw["op"]
        out = self.arrow()
        return Deduce(ops[0], kw["content"], kw["target"], out, ops[1:])  # type: ignore[index]

    def _math(self) -> Math:
        kw = self._kwargs(("content", "target"))
        out = self.arrow()
        return Math(kw["content"], kw["target"], out)  # type: ignore[arg-type]

    def _output(self) -> Output:
        args: list[str] = []
        variadic = False
        while True:
            if args and self.accept("..."):
                variadic = True
                self.expect(")")
                break
            args.append(self.ident("alias"))
            if self.accept(","):
                continue
            self.expect(")")
            break
        return Output(tuple(args), variadic)


def parse_action(text: str) -> LogicalForm:
    """Parse one action expression (without its ``ActionN:`` label)."""
    return _Parser(text).action()


# ---------------------------------------------------------------------------
# Rendering


def _needs_escape(text: str, i: int, stops: str) -> bool:
    j = i + 1
    while j < len(text) and text[j].isspace():
        j += 1
    return j == len(text) or text[j] in stops


def _quote(text: str, stops: str, style: str = BACKTICK) -> str:
    out = []
    for i, ch in enumerate(text):
        if ch == "\\":
            out.append("\\\\")
        elif ch == "'" and _needs_escape(text, i, stops):
            out.append("\\'")
        else:
            out.append(ch)
    opener = "`" if style == BACKTICK else "'"
    return opener + "".join(out) + "'"


def _render_entity(ref: EntityRef) -> str:
    out = ref.alias
    if ref.type_name is not None:
        out += ":" + ref.type_name
    if ref.display_name is not None:
        out += "[" + _quote(ref.display_name, "]") + "]"
    return out


def _render_item(item: ContentItem) -> str:
    if item.quote == BARE:
        return item.text
    return _quote(item.text, ",]", item.quote)


def render_action(form: LogicalForm) -> str:
    """Canonical text: backtick-apostrophe quoting and ``->`` arrows."""
    if isinstance(form, Retrieval):
        parts = [f"{k}={_render_entity(ref)}" for k, ref in form.slots()]
        parts += [f"{c.target}.{c.prop_name}={_quote(c.value, ',)')}" for c in form.constraints]
        return "Retrieval(" + ", ".join(parts) + ")"
    if isinstance(form, (Deduce, Math)):
        content = "[" + ", ".join(_render_item(c) for c in form.content) + "]"
        target = _quote(form.target, ",)")
        if isinstance(form, Deduce):
            op = "|".join(o.value for o in (form.op, *form.alt_ops))
            return f"Deduce(op={op}, content={content}, target={target})->{form.out}"
        return f"Math(content={content}, target={target})->{form.out}"
    if isinstance(form, Output):
        args = ", ".join(form.args) + (", ..." if form.variadic else "")
        return f"Output({args})"
    raise TypeError(f"not a logical form: {form!r}")


# ---------------------------------------------------------------------------
# Step text references


def find_refs(step_text: str) -> list[int]:
    """Indices named by ``#k`` tokens, in order of appearance."""
    return [int(m.group(1)) for m in REF_RE.finditer(step_text)]


def substitute_refs(step_text: str, env: object) -> str:
    """Replace every ``#k`` with the answer bound to step k.

    ``env`` is a :class:`~thinker.solver.BindingEnv` or a plain mapping
    from step index to answer text.
    """
    table: Mapping[int, str] = getattr(env, "by_index", env)  # type: ignore[assignment]

    def repl(m: re.Match[str]) -> str:
        k = int(m.group(1))
        if k not in table:
            raise UnboundReference(k)
        return table[k]

    return REF_RE.sub(repl, step_text)
