"""Run configuration: a JSON file plus command-line overrides.

Example::

    {
      "llm": {"kind": "http", "base_url": "http://localhost:8000", "model": "thinker-7b"},
      "retriever": {"kind": "lexical", "corpus": "corpus.jsonl"},
      "solve": {"max_depth": 5, "top_k": 3},
      "kbd": {"tau": 0.95, "enabled": true},
      "paths": {"trace_dir": "traces", "report_path": "report.json"},
      "eval": {"workers": 1}
    }

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .solver import SolveConfig

LLM_KINDS = ("scripted", "http", "openai")
RETRIEVER_KINDS = ("lexical", "http")

DEFAULTS = SolveConfig()
DEFAULT_WORKERS = 1
DEFAULT_TEMPERATURE = 0.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LLMConfig:
    kind: str = "scripted"
    script: str | None = None
    base_url: str | None = None
    model: str = "thinker"
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = 1024
    timeout: float = 60.0


@dataclass(frozen=True)
class RetrieverConfig:
    kind: str = "lexical"
    corpus: str | None = None
    endpoint: str | None = None


@dataclass(frozen=True)
class Config:
    llm: LLMConfig = field(default_factory=LLMConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    solve: SolveConfig = field(default_factory=SolveConfig)
    trace_dir: str | None = None
    report_path: str | None = None
    workers: int = DEFAULT_WORKERS

    def check_llm(self) -> None:
        llm = self.llm
        if llm.kind not in LLM_KINDS:
            raise ConfigError(f"llm.kind must be one of {', '.join(LLM_KINDS)}")
        if llm.kind == "scripted":
            if not llm.script:
                raise ConfigError("a scripted llm needs llm.script")
            if not Path(llm.script).is_file():
                raise ConfigError(f"script file not found: {llm.script}")
        elif not llm.base_url:
            raise ConfigError(f"an {llm.kind} llm needs llm.base_url")
        if llm.temperature < 0:
            raise ConfigError("llm.temperature must be non-negative")

    def check_retriever(self) -> None:
        r = self.retriever
        if r.kind not in RETRIEVER_KINDS:
            raise ConfigError(f"retriever.kind must be one of {', '.join(RETRIEVER_KINDS)}")
        if r.kind == "lexical":
            if not r.corpus:
                raise ConfigError("a lexical retriever needs retriever.corpus")
            if not Path(r.corpus).is_file():
                raise ConfigError(f"corpus file not found: {r.corpus}")
        elif not r.endpoint:
            raise ConfigError("an http retriever needs retriever.endpoint")

    def check(self) -> None:
        self.check_llm()
        self.check_retriever()
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


def _section(data: dict[str, Any], key: str) -> dict[str, Any]:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be an object")
    return value


def _path(value: Any, base: Path | None) -> str | None:
    if value is None:
        return None
    p = Path(str(value)).expanduser()
    if base is not None and not p.is_absolute():
        p = base / p
    return str(p)


def _build(cls: type, values: dict[str, Any], where: str) -> Any:
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(data: dict[str, Any], base: Path | None = None) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - {"llm", "retriever", "solve", "kbd", "paths", "eval"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    llm = dict(_section(data, "llm"))
    llm["script"] = _path(llm.get("script"), base)
    ret = dict(_section(data, "retriever"))
    ret["corpus"] = _path(ret.get("corpus"), base)
    solve = dict(_section(data, "solve"))
    kbd = _section(data, "kbd")
    # the kbd section wins over the same settings under solve
    if "tau" in kbd:
        solve["tau"] = kbd["tau"]
    if "enabled" in kbd:
        solve["kbd_enabled"] = kbd["enabled"]
    paths = _section(data, "paths")
    ev = _section(data, "eval")
    return Config(
        llm=_build(LLMConfig, llm, "llm"),
        retriever=_build(RetrieverConfig, ret, "retriever"),
        solve=_build(SolveConfig, solve, "solve"),
        trace_dir=_path(paths.get("trace_dir"), base),
        report_path=_path(paths.get("report_path"), base),
        workers=int(ev.get("workers", DEFAULT_WORKERS)),
    )


def load(path: str | os.PathLike[str]) -> Config:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(data, path.parent)


def with_overrides(cfg: Config, **flags: Any) -> Config:
    """Apply non-None flag values on top of ``cfg``."""
    f = {k: v for k, v in flags.items() if v is not None}
    llm = cfg.llm
    if "script" in f:
        llm = replace(llm, kind="scripted", script=f["script"])
    if "llm_url" in f:
        llm = replace(llm, kind=f.get("llm_kind", "http"), base_url=f["llm_url"])
    if "model" in f:
        llm = replace(llm, model=f["model"])
    if "temperature" in f:
        llm = replace(llm, temperature=f["temperature"])
    ret = cfg.retriever
    if "corpus" in f:
        ret = replace(ret, kind="lexical", corpus=f["corpus"])
    if "retriever_url" in f:
        ret = replace(ret, kind="http", endpoint=f["retriever_url"])
    solve_kw = {}
    for flag, key in (("max_depth", "max_depth"), ("top_k", "top_k"), ("tau", "tau"), ("kbd", "kbd_enabled")):
        if flag in f:
            solve_kw[key] = f[flag]
    try:
        solve = replace(cfg.solve, **solve_kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return replace(
        cfg,
        llm=llm,
        retriever=ret,
        solve=solve,
        trace_dir=f.get("trace_dir", cfg.trace_dir),
        report_path=f.get("report", cfg.report_path),
        workers=f.get("workers", cfg.workers),
    )
