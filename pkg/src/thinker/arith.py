"""Safe decimal evaluator for ``+ - * /`` expressions with parentheses."""

from __future__ import annotations

import decimal
import re
from decimal import Decimal

CONTEXT = decimal.Context(prec=28, rounding=decimal.ROUND_HALF_EVEN)

_TOKEN_RE = re.compile(r"\s*(?:(\d+(?:\.\d*)?|\.\d+)|(.))")


class ExpressionError(ValueError):
    pass


class ExpressionParseError(ExpressionError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at offset {position}")


class DivisionByZero(ExpressionError, ZeroDivisionError):
    pass


def _tokenize(expr: str) -> list[tuple[str, str, int]]:
    expr = expr.replace("×", "*").replace("÷", "/")
    out = []
    pos = 0
    while pos < len(expr):
        m = _TOKEN_RE.match(expr, pos)
        if m is None:  # only trailing whitespace left
            break
        if m.group(1) is not None:
            out.append(("num", m.group(1), m.start(1)))
        elif m.group(2) is not None:
            ch = m.group(2)
            if ch not in "+-*/()":
                raise ExpressionParseError(f"unexpected {ch!r}", m.start(2))
            out.append(("op", ch, m.start(2)))
        pos = m.end()
    return out


class _Evaluator:
    def __init__(self, expr: str):
        self.tokens = _tokenize(expr)
        self.i = 0
        self.end = len(expr)

    def peek(self) -> tuple[str, str, int] | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self, value: str) -> bool:
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] == value:
            self.i += 1
            return True
        return False

    def expr(self) -> Decimal:
        acc = self.term()
        while True:
            if self.take("+"):
                acc = CONTEXT.add(acc, self.term())
            elif self.take("-"):
                acc = CONTEXT.subtract(acc, self.term())
            else:
                return acc

    def term(self) -> Decimal:
        acc = self.factor()
        while True:
            if self.take("*"):
                acc = CONTEXT.multiply(acc, self.factor())
            elif self.take("/"):
                tok = self.peek()
                divisor = self.factor()
                if divisor.is_zero():
                    raise DivisionByZero(f"division by zero at offset {tok[2] if tok else self.end}")
                acc = CONTEXT.divide(acc, divisor)
            else:
                return acc

    def factor(self) -> Decimal:
        if self.take("-"):
            return CONTEXT.minus(self.factor())
        if self.take("+"):
            return self.factor()
        tok = self.peek()
        if tok is None:
            raise ExpressionParseError("unexpected end of expression", self.end)
        if tok[0] == "num":
            self.i += 1
            return Decimal(tok[1])
        if self.take("("):
            value = self.expr()
            if not self.take(")"):
                t = self.peek()
                raise ExpressionParseError("expected ')'", t[2] if t else self.end)
            return value
        raise ExpressionParseError(f"unexpected {tok[1]!r}", tok[2])


def eval_expression(expr: str) -> Decimal:
    """Evaluate with standard precedence in 28-digit decimal arithmetic."""
    ev = _Evaluator(expr)
    if not ev.tokens:
        raise ExpressionParseError("empty expression", 0)
    value = ev.expr()
    tok = ev.peek()
    if tok is not None:
        raise ExpressionParseError(f"unexpected {tok[1]!r}", tok[2])
    return value


def format_number(value: Decimal) -> str:
    """Fixed point with two decimals; whole numbers print without any."""
    wide = decimal.Context(prec=max(CONTEXT.prec, value.adjusted() + 4))
    q = value.quantize(Decimal("0.01"), rounding=decimal.ROUND_HALF_UP, context=wide)
    if q == q.to_integral_value():
        q = q.quantize(Decimal(1), context=wide)
    if q.is_zero():
        q = abs(q)
    return f"{q:f}"
