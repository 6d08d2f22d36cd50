from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thinker.evalkit import (
    DatasetError,
    EvalReport,
    ItemResult,
    QAItem,
    TraceIncomplete,
    em,
    export_sft,
    f1,
    load_dataset,
    normalize_answer,
    read_sft,
    run_eval,
    write_sft,
)
from thinker.llm import ChatMessage, script_load
from thinker.retrieval import LexicalRetriever
from thinker.solver import SolveConfig, Thinker
from thinker.trace import RunTrace


@pytest.mark.parametrize(
    "text,norm",
    [("The Pequod", "pequod"), ("Herman  Melville.", "herman melville"), ("", ""), ("An apple a day", "apple day")],
)
def test_normalize(text, norm):
    assert normalize_answer(text) == norm


def test_em_cases():
    assert em("Herman Melville", ["herman melville"]) == 1
    assert em("Melville", ["Herman Melville"]) == 0
    assert em("the Pequod", ["Pequod"]) == 1
    with pytest.raises(ValueError):
        em("x", [])


def test_f1_cases():
    assert f1("the director John Smith", ["John Smith"]) == pytest.approx(0.8)
    assert f1("same words", ["same words"]) == 1.0
    assert f1("alpha", ["beta"]) == 0.0
    assert f1("", [""]) == 1.0
    assert f1("", ["x"]) == 0.0 and f1("x", ["the"]) == 0.0
    assert f1("x y", ["zzz", "y w"]) == pytest.approx(0.5)


text = st.text(alphabet="ab the,.A ", max_size=15)


@settings(max_examples=300, deadline=None)
@given(text, text)
def test_metric_properties(a, b):
    assert normalize_answer(normalize_answer(a)) == normalize_answer(a)
    score = f1(a, [b])
    assert 0.0 <= score <= 1.0
    assert em(a, [b]) in (0, 1)
    if em(a, [b]):
        assert score == 1.0
    assert score == pytest.approx(f1(b, [a]), abs=1e-12)


def test_load_dataset(fixtures, tmp_path):
    items = load_dataset(fixtures / "dataset.jsonl")
    assert [i.id for i in items] == ["film", "moby", "ship"]
    assert items[2].golden_answers == ("The Pequod", "Pequod")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x", "question": "q", "golden_answers": []}\n')
    with pytest.raises(DatasetError):
        load_dataset(bad)
    with pytest.raises(ValueError):
        QAItem("x", "q", ())


def _thinker(fixtures, kbd=True):
    return Thinker(
        script_load(fixtures / "eval_script.json"),
        LexicalRetriever.from_file(fixtures / "films.jsonl"),
        SolveConfig(kbd_enabled=kbd),
    )


def test_run_eval_fixture(fixtures, tmp_path):
    items = load_dataset(fixtures / "dataset.jsonl")
    report = run_eval(items, _thinker(fixtures), trace_dir=tmp_path)
    assert report.n == 3
    assert report.avg_em == pytest.approx(2 / 3)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["film.json", "moby.json", "ship.json"]
    per = report.per_item
    assert report.avg_f1 == pytest.approx(sum(i.f1 for i in per) / 3, abs=1e-12)
    assert report.avg_retrievals_per_sample == pytest.approx(sum(i.retrievals for i in per) / 3, abs=1e-12)


def test_kbd_on_vs_off(fixtures):
    items = load_dataset(fixtures / "dataset.jsonl")
    on = run_eval(items, _thinker(fixtures, True))
    off = run_eval(items, _thinker(fixtures, False))
    assert on.kbd_skip_rate > 0 and off.kbd_skip_rate == 0
    assert on.avg_retrievals_per_sample < off.avg_retrievals_per_sample
    assert on.avg_em == off.avg_em


def test_run_eval_with_factory_and_workers(fixtures):
    items = load_dataset(fixtures / "dataset.jsonl")
    report = run_eval(items, lambda: _thinker(fixtures), workers=3)
    assert [i.id for i in report.per_item] == ["film", "moby", "ship"]
    assert report.avg_em == pytest.approx(2 / 3)


def test_failures_score_zero(fixtures):
    items = [QAItem("x", "Unscripted question?", ("a",))]
    report = run_eval(items, _thinker(fixtures))
    assert report.per_item[0].em == 0 and report.per_item[0].error


def test_empty_dataset_report():
    r = run_eval([], None)
    assert r.n == 0 and r.avg_em is None and r.avg_f1 is None and r.kbd_skip_rate is None


def test_pooled_skip_rate():
    items = [ItemResult("a", "x", 1, 1.0, 0, 1, 1), ItemResult("b", "y", 0, 0.0, 6, 1, 3)]
    assert EvalReport.from_items(items).kbd_skip_rate == pytest.approx(2 / 4)


def test_export_sft(film_question, film_llm, film_retriever, tmp_path):
    trace = Thinker(film_llm, film_retriever).run_question(film_question["question"]).trace
    sample = export_sft(trace)
    assert sample.turns[0].role == "system" and not sample.turns[0].loss
    for t in sample.turns:
        assert t.loss == (t.role == "assistant")
    assert [t.role for t in sample.turns[1:]] == ["user", "assistant"] * 16
    # references live in user turns
    assert any("Frank McDonald" in t.content and "References" in t.content for t in sample.turns if t.role == "user")
    path = tmp_path / "sft.jsonl"
    assert write_sft([sample], path) == 1
    assert read_sft(path) == [sample]
    row = json.loads(path.read_text())
    assert set(row["turns"][0]) == {"role", "content", "loss"}


def test_export_sft_incomplete():
    trace = RunTrace("q", [ChatMessage("system", "s")], complete=True)
    with pytest.raises(TraceIncomplete):
        export_sft(trace)
    with pytest.raises(TraceIncomplete):
        export_sft(RunTrace("q"))
