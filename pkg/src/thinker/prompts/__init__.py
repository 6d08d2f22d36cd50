"""Prompt templates shipped as text assets.

Templates use ``string.Template`` placeholders (``$question``) so the
literal braces of ``\\boxed{...}`` need no escaping.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

TEMPLATE_VERSION = "1"


@lru_cache(maxsize=None)
def load(name: str) -> str:
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def render(name: str, **values: str) -> str:
    return Template(load(name)).substitute(values)
