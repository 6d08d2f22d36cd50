"""The ``thinker`` command.

Exit codes: 0 success, 1 domain failure (parse, plan or run), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import config as config_mod
from .config import Config, ConfigError
from .evalkit import DatasetError, TraceIncomplete, export_sft, load_dataset, run_eval, write_sft
from .llm import GenParams, HttpBackend, LLMError, OpenAIChatBackend, ScriptParseError, script_load
from .logical_form import LogicalFormError, parse_action, render_action
from .planning import PlanError, build_decomposition_prompt, format_plan, parse_decomposition, validate_plan
from .retrieval import CorpusError, HttpRetriever, LexicalRetriever
from .solver import PipelineError, PlanInvalid, Thinker
from .trace import RunTrace, Session

logger = logging.getLogger("thinker")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

D = config_mod.DEFAULTS


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Wiring


def build_llm(cfg: Config):
    cfg.check_llm()
    c = cfg.llm
    if c.kind == "scripted":
        try:
            return script_load(c.script)
        except ScriptParseError as e:
            raise ConfigError(str(e)) from None
    cls = OpenAIChatBackend if c.kind == "openai" else HttpBackend
    return cls(c.base_url, c.model, timeout=c.timeout, temperature=c.temperature)


def build_retriever(cfg: Config):
    cfg.check_retriever()
    r = cfg.retriever
    if r.kind == "lexical":
        try:
            return LexicalRetriever.from_file(r.corpus)
        except CorpusError as e:
            raise ConfigError(str(e)) from None
    return HttpRetriever(r.endpoint)


def build_thinker(cfg: Config) -> Thinker:
    params = GenParams(max_tokens=cfg.llm.max_tokens, temperature=cfg.llm.temperature)
    return Thinker(build_llm(cfg), build_retriever(cfg), cfg.solve, params)


def resolve_config(args: argparse.Namespace) -> Config:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else Config()
    return config_mod.with_overrides(
        cfg,
        script=getattr(args, "script", None),
        llm_url=getattr(args, "llm_url", None),
        llm_kind=getattr(args, "llm_kind", None),
        model=getattr(args, "model", None),
        temperature=getattr(args, "temperature", None),
        corpus=getattr(args, "corpus", None),
        retriever_url=getattr(args, "retriever_url", None),
        max_depth=getattr(args, "max_depth", None),
        top_k=getattr(args, "top_k", None),
        tau=getattr(args, "tau", None),
        kbd=getattr(args, "kbd", None),
        trace_dir=getattr(args, "trace_dir", None),
        report=getattr(args, "report", None),
        workers=getattr(args, "workers", None),
    )


def _question(args: argparse.Namespace) -> str:
    q = (args.question or "").strip()
    if not q:
        raise UsageError("question must be nonempty")
    return q


def _on_off(text: str) -> bool:
    value = text.lower()
    if value in ("on", "true", "1", "yes"):
        return True
    if value in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")


# ---------------------------------------------------------------------------
# Commands


def cmd_parse(args: argparse.Namespace) -> int:
    try:
        form = parse_action(args.action)
    except LogicalFormError as e:
        print(f"error: {e}", file=sys.stderr)
        print(f"  {args.action}", file=sys.stderr)
        print("  " + " " * e.position + "^", file=sys.stderr)
        return EXIT_FAIL
    print(render_action(form))
    if args.ast:
        print(json.dumps(_ast(form), indent=2, ensure_ascii=False))
    return EXIT_OK


def _ast(form) -> dict:
    data = asdict(form)
    for value in data.values():
        if isinstance(value, dict):
            value.pop("name_quote", None)
    return {"function": type(form).__name__, **data}


def cmd_plan(args: argparse.Namespace) -> int:
    question = _question(args)
    cfg = resolve_config(args)
    llm = build_llm(cfg)
    session = Session(llm, RunTrace(question), GenParams(temperature=cfg.llm.temperature))
    try:
        reply = session.ask(build_decomposition_prompt(question), kind="decompose")
        plan = parse_decomposition(reply.text, question)
    except (LLMError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(format_plan(plan))
    violations = validate_plan(plan)
    for v in violations:
        print(f"violation: {v}")
    return EXIT_FAIL if violations else EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    question = _question(args)
    cfg = resolve_config(args)
    thinker = build_thinker(cfg)
    trace: RunTrace | None = None
    status = EXIT_OK
    try:
        result = thinker.run_question(question)
        trace = result.trace
        print(result.final_answer)
    except PipelineError as e:
        trace = e.trace
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, PlanInvalid):
            for v in e.violations:
                print(f"violation: {v}", file=sys.stderr)
        status = EXIT_FAIL
    if trace is not None:
        print(json.dumps(trace.counters), file=sys.stderr)
        if cfg.trace_dir:
            path = trace.save(Path(cfg.trace_dir) / "trace.json")
            logger.info("trace written to %s", path)
    return status


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not args.dataset:
        raise UsageError("--dataset is required")
    if not Path(args.dataset).is_file():
        raise ConfigError(f"dataset file not found: {args.dataset}")
    try:
        dataset = load_dataset(args.dataset)
    except DatasetError as e:
        raise ConfigError(str(e)) from None
    thinker = build_thinker(cfg)
    samples = []

    def collect(item, trace):
        try:
            samples.append(export_sft(trace))
        except TraceIncomplete as e:
            logger.info("no SFT sample for %s: %s", item.id, e)

    report = run_eval(
        dataset,
        thinker,
        workers=cfg.workers,
        trace_dir=cfg.trace_dir,
        on_trace=collect if args.export_sft else None,
    )
    if cfg.report_path:
        out = Path(cfg.report_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
    if args.export_sft:
        n = write_sft(samples, args.export_sft)
        logger.info("%d SFT samples written to %s", n, args.export_sft)
    print(report.summary())
    return EXIT_OK


def cmd_export_sft(args: argparse.Namespace) -> int:
    samples = []
    for p in args.traces:
        try:
            trace = RunTrace.load(p)
        except FileNotFoundError:
            raise ConfigError(f"trace file not found: {p}") from None
        except (ValueError, KeyError) as e:
            print(f"error: {p}: {e}", file=sys.stderr)
            return EXIT_FAIL
        try:
            samples.append(export_sft(trace))
        except TraceIncomplete as e:
            print(f"error: {p}: {e}", file=sys.stderr)
            return EXIT_FAIL
    n = write_sft(samples, args.out)
    print(f"{n} samples written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backends")
    g.add_argument("--config", help="JSON config file; flags override it")
    g.add_argument("--script", help="scripted LLM file (JSON array of entries)")
    g.add_argument("--llm-url", help="HTTP LLM endpoint")
    g.add_argument("--llm-kind", choices=("http", "openai"), help="wire dialect for --llm-url (default: http)")
    g.add_argument("--model", help="model name sent to the HTTP LLM (default: thinker)")
    g.add_argument(
        "--temperature", type=float, help=f"sampling temperature (default: {config_mod.DEFAULT_TEMPERATURE})"
    )


def _solve_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solving")
    g.add_argument("--corpus", help="JSONL corpus for the lexical retriever")
    g.add_argument("--retriever-url", help="HTTP retriever endpoint")
    g.add_argument("--max-depth", type=int, help=f"maximum retrieval turns per sub-problem (default: {D.max_depth})")
    g.add_argument("--top-k", type=int, help=f"documents per retrieval (default: {D.top_k})")
    g.add_argument("--tau", type=float, help=f"likelihood confidence threshold (default: {D.tau})")
    g.add_argument(
        "--kbd",
        type=_on_off,
        metavar="{on,off}",
        help=f"knowledge boundary gate (default: {'on' if D.kbd_enabled else 'off'})",
    )
    g.add_argument("--trace-dir", help="directory for per-question trace files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thinker", description="Hierarchical deep-search question answering.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse one logical-form action and print it canonically")
    p.add_argument("action")
    p.add_argument("--ast", action="store_true", help="also dump the syntax tree as JSON")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("plan", help="decompose a question and validate the plan")
    p.add_argument("question")
    _backend_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="answer one question")
    p.add_argument("question")
    _backend_flags(p)
    _solve_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="run and score a dataset")
    p.add_argument("--dataset", help="JSONL file of {id, question, golden_answers}")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--export-sft", help="also write SFT samples (JSONL) here")
    p.add_argument("--workers", type=int, help=f"parallel question runs (default: {config_mod.DEFAULT_WORKERS})")
    _backend_flags(p)
    _solve_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-sft", help="convert saved traces to SFT samples")
    p.add_argument("traces", nargs="+", help="trace JSON files")
    p.add_argument("--out", required=True, help="output JSONL file")
    p.set_defaults(func=cmd_export_sft)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"thinker: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
