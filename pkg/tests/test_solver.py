from __future__ import annotations

from decimal import Decimal

import pytest

from tests.helpers import REFUSAL, RuleBackend, boxed_completion, boxed_reply
from thinker.arith import DivisionByZero
from thinker.llm import ScriptedBackend, make_entry
from thinker.logical_form import parse_action
from thinker.planning import SubProblem, plan_dag
from thinker.retrieval import Corpus, Document, LexicalRetriever
from thinker.solver import (
    BindingEnv,
    ExpressionInvalid,
    PipelineError,
    PlanInvalid,
    RebindError,
    SolveConfig,
    SubAnswer,
    Thinker,
    UndefinedAlias,
    deterministic_expression,
    focusing_and_reasoning,
    math_operands,
    parse_focus,
    resolve_spo,
    solve_deduce,
    solve_math,
    solve_output,
    solve_retrieval,
)
from thinker.trace import RunTrace

CORPUS = LexicalRetriever(
    Corpus([Document(f"d{i}", f"title {i}", f"body text number {i}") for i in range(6)])
)


def sub(n: int, step: str, action: str) -> SubProblem:
    return SubProblem(n, step, parse_action(action))


def test_binding_env_write_once():
    env = BindingEnv()
    env.bind_index(1, "x")
    env.bind_alias("o1", "x")
    with pytest.raises(RebindError):
        env.bind_index(1, "y")
    with pytest.raises(RebindError):
        env.bind_alias("o1", "y")
    with pytest.raises(UndefinedAlias):
        env.lookup("o9")


def test_solve_config_defaults():
    cfg = SolveConfig()
    assert (cfg.max_depth, cfg.top_k, cfg.tau, cfg.kbd_enabled) == (5, 3, 0.95, True)
    with pytest.raises(ValueError):
        SolveConfig(max_depth=0)


def test_sub_answer_invariants():
    with pytest.raises(ValueError):
        SubAnswer(1, "a", "guess")


def test_resolve_spo():
    env = BindingEnv({1: "Frank McDonald"}, {"o1": "Frank McDonald"})
    spo = resolve_spo(parse_action("Retrieval(s=o1, p=p2:deathtime, o=o2:deathtime)"), env)
    assert spo.s.name == "Frank McDonald" and spo.p == "deathtime" and spo.o.type_name == "deathtime"


def test_parse_focus():
    assert parse_focus("<answer>Yes</answer><reason>Joey Lawrence hosts it.</reason>") == (True, "Joey Lawrence hosts it.")
    assert parse_focus("<answer>No</answer>") == (False, "")


def test_focusing_splash_example():
    refs = [
        Document("1", "Splash (American TV series)", "Splash is an American reality competition series hosted by Joey Lawrence and Charissa Thompson."),
        Document("2", "Joey Lawrence", "Joseph Lawrence is an American actor."),
    ]
    llm = ScriptedBackend([make_entry("<answer>Yes</answer>\n<reason>Reference 1 says the show is hosted by Joey Lawrence.</reason>", "Who is the host of Splash!")])
    verdict, reason = focusing_and_reasoning(llm, "Who is the host of Splash!", refs)
    assert verdict and "Joey Lawrence" in reason
    prompt = llm.calls[0][0][-1].content
    assert '1. "Splash (American TV series)"' in prompt and '2. "Joey Lawrence"' in prompt


def test_focusing_empty_refs_and_unparsable():
    llm = ScriptedBackend.from_replies("<answer>No</answer><reason>nothing retrieved</reason>", "garbage")
    assert focusing_and_reasoning(llm, "q", []) == (False, "nothing retrieved")
    assert focusing_and_reasoning(llm, "q", []) == (False, "")


def _run_retrieval(llm, cfg, action="Retrieval(s=s1:film[`X'], p=p1:director, o=o1:person)"):
    return solve_retrieval(sub(1, "Who directed X?", action), BindingEnv(), cfg, llm, CORPUS)


def test_focus_yes_at_turn_two():
    answers = iter(["<answer>No</answer><reason>missing</reason>", "<answer>Yes</answer><reason>found</reason>"])
    llm = RuleBackend({"focus": lambda q, p: next(answers)})
    a = _run_retrieval(llm, SolveConfig())
    assert a.via == "depth" and len(a.turns) == 2 and not a.forced
    assert a.turns[0].search_query == "Who directed X?"
    assert a.turns[1].search_query == "Who directed X? more"
    assert a.turns[1].emitted_answer == a.answer == "answer to Who directed X?"
    assert llm.count("focus") == 2 and llm.count("next_query") == 1


def test_all_no_forces_answer_at_max_depth():
    llm = RuleBackend({"focus": lambda q, p: "<answer>No</answer><reason>nope</reason>"})
    a = _run_retrieval(llm, SolveConfig(max_depth=3))
    assert len(a.turns) == 3 and a.forced
    assert a.answer == "best guess for Who directed X?"
    assert llm.count("next_query") == 2 and llm.count("forced_answer") == 1


def test_forced_answer_sees_all_turns():
    seen = {}

    def forced(q, p):
        seen["prompt"] = p
        return boxed_reply("g")

    llm = RuleBackend(
        {
            "focus": lambda q, p: "<answer>No</answer>",
            "next_query": lambda q, p: "<search>title 4</search>",
            "forced_answer": forced,
        }
    )
    a = _run_retrieval(llm, SolveConfig(max_depth=2, top_k=1))
    ids = {d.id for t in a.turns for d in t.retrieved}
    assert len(ids) == 2
    for d in ids:
        assert f"title {d[1:]}" in seen["prompt"]


def test_malformed_search_falls_back_to_step():
    answers = iter(["<answer>No</answer>", "<answer>Yes</answer>"])
    llm = RuleBackend({"focus": lambda q, p: next(answers), "next_query": lambda q, p: "no tags here"})
    a = _run_retrieval(llm, SolveConfig())
    assert a.turns[1].search_query == "Who directed X?"
    assert any("reusing the step text" in n for n in a.notes)


def test_search_with_step_and_action():
    answers = iter(["<answer>No</answer>", "<answer>Yes</answer>"])
    llm = RuleBackend(
        {
            "focus": lambda q, p: next(answers),
            "next_query": lambda q, p: "<search>Step: Children share. Action: Retrieval(s=s2, p=p4:BelongTo, o=o4:Crowd[`Children'])</search>",
        }
    )
    a = _run_retrieval(llm, SolveConfig())
    assert a.turns[1].search_query == "Children share."


def test_kbd_double_true_skips_retrieval():
    llm = RuleBackend(
        {"kbd_answer": lambda q, p: boxed_completion("Frank McDonald", 0.99), "kbd_assess": lambda q, p: boxed_reply("True")}
    )
    a = _run_retrieval(llm, SolveConfig())
    assert a.via == "direct" and a.turns == [] and a.answer == "Frank McDonald"
    assert a.kbd.final_verdict


def test_kbd_low_likelihood_goes_deep():
    llm = RuleBackend(
        {"kbd_answer": lambda q, p: boxed_completion("Frank McDonald", 0.5), "kbd_assess": lambda q, p: boxed_reply("True")}
    )
    a = _run_retrieval(llm, SolveConfig())
    assert a.via == "depth" and not a.kbd.final_verdict and a.kbd.prompt_verdict


def test_kbd_disabled_never_asks():
    llm = RuleBackend()
    _run_retrieval(llm, SolveConfig(kbd_enabled=False))
    assert llm.count("kbd_answer") == 0


def test_deduce_extract_example():
    env = BindingEnv({}, {"o1": "The elements of the offense of credit card fraud include the following points."})
    s = sub(2, "Which amounts count?", "Deduce(op=extract, content=[o1, Zhang found a wallet on the street…], target=Which amounts are considered part of the credit card fraud amount?)->o2")
    llm = ScriptedBackend([make_entry("<answer>\\boxed{210.4 yuan, 569.2 yuan, 1035.2 yuan, 2044.5 yuan, 1035 yuan}</answer>", "Perform the extract reasoning")])
    a = solve_deduce(s, env, llm)
    assert a.via == "deduce" and "2044.5" in a.answer
    prompt = llm.calls[0][0][-1].content
    assert "following points" in prompt and "Zhang found a wallet" in prompt


def test_deduce_unboxed_reply_adopted():
    llm = ScriptedBackend.from_replies("True")
    a = solve_deduce(sub(1, "is it", "Deduce(op=judgement, content=[`2<3'], target=is it true)->d1"), BindingEnv(), llm)
    assert a.answer == "True" and a.notes


def test_deduce_unbound_alias():
    with pytest.raises(UndefinedAlias):
        solve_deduce(sub(1, "x", "Deduce(op=judgement, content=[o7], target=t)->d1"), BindingEnv(), ScriptedBackend.from_replies("x"))


def test_math_credit_card_sum():
    env = BindingEnv({}, {"o2": "210.4 yuan, 569.2 yuan, 1,035.2 yuan, 2044.5 yuan, and 1035 yuan"})
    s = sub(3, "total?", "Math(content=[o2], target=What's the total amount involved in Zhang’s credit card fraud.)->o3")
    a = solve_math(s, env)
    assert a.answer == "4894.30"


def test_math_identity_and_patterns():
    env = BindingEnv()
    assert solve_math(sub(1, "x", "Math(content=[`592 ml'], target=output it)->m"), env).answer == "592"
    assert deterministic_expression("difference in years", [Decimal(2017), Decimal(1980)]) == ("difference", "2017-1980")
    assert deterministic_expression("the largest", [Decimal(1), Decimal(5)]) == ("max", "5")
    assert deterministic_expression("smallest value", [Decimal(-1), Decimal(5)]) == ("min", "(-1)")
    assert deterministic_expression("how many items", [Decimal(1), Decimal(5)]) == ("count", "2")
    assert deterministic_expression("something else", [Decimal(1), Decimal(5)]) is None


def test_math_operands():
    assert math_operands(["1,035.2 yuan and 37% of 16kg", "x-3"]) == [Decimal("1035.2"), Decimal(37), Decimal(16), Decimal(3)]


def test_math_model_expression_path():
    llm = ScriptedBackend.from_replies("<answer>\\boxed{16*37*1/100}</answer>")
    a = solve_math(sub(1, "fluid", "Math(content=[`weight=16kg', `37 percent'], target=colloid fluid volume)->math6"), BindingEnv(), llm)
    assert a.answer == "5.92"


def test_math_errors():
    with pytest.raises(ExpressionInvalid):
        solve_math(sub(1, "x", "Math(content=[`a b'], target=t)->m"), BindingEnv(), ScriptedBackend.from_replies("\\boxed{not math}"))
    with pytest.raises(DivisionByZero):
        solve_math(sub(1, "x", "Math(content=[`a b'], target=t)->m"), BindingEnv(), ScriptedBackend.from_replies("\\boxed{1/0}"))


def test_output_join():
    env = BindingEnv({3: "4894.30"}, {"o3": "4894.30", "a": "va", "b": "vb", "e": ""})
    assert solve_output(sub(4, "Output #3", "Output(o3)"), env).answer == "4894.30"
    assert solve_output(sub(1, "x", "Output(a, b)"), env).answer == "va; vb"
    assert solve_output(sub(1, "x", "Output(e)"), env).answer == ""


def test_run_question_film(film_question, film_llm, film_retriever):
    result = Thinker(film_llm, film_retriever).run_question(film_question["question"])
    assert result.final_answer == film_question["answer"]
    assert [s.via for s in result.sub_answers] == ["depth", "depth", "direct", "depth", "deduce"]
    assert set(plan_dag(result.plan)) == {(1, 2), (3, 4), (2, 5), (4, 5)}
    env = result.env
    for s in result.plan.subs:
        alias = {1: "o1", 2: "o2", 3: "o3", 4: "o4", 5: "o5"}[s.index]
        assert env.by_index[s.index] == env.by_alias[alias]
    assert env.by_alias["s1"] == "Hit Parade Of 1947" and env.by_alias["p1"] == "director"
    assert result.sub_answers[1].step == "When did Frank McDonald die?"
    assert result.trace.counters == {"llm_calls": 16, "retrievals": 4, "kbd_skips": 1, "retrieval_subs": 4}
    assert film_llm.remaining == 0


def test_output_passthrough_with_prebound_env():
    llm = ScriptedBackend.from_replies("<answer>Step1: Say it.\nAction1: Output(o1)</answer>")
    result = Thinker(llm, CORPUS).run_question("q", BindingEnv.from_aliases({"o1": "Herman Melville"}))
    assert result.final_answer == "Herman Melville"


def test_invalid_plan_stops_before_execution():
    llm = ScriptedBackend.from_replies(
        "<answer>Step1: a\nAction1: Retrieval(s=s1:x[a], p=p1:r, o=o1:y)\nStep2: uses #3\nAction2: Output(o1)</answer>",
        "should never be used",
    )
    with pytest.raises(PlanInvalid) as info:
        Thinker(llm, CORPUS).run_question("q")
    assert info.value.violations[0].kind.value == "ForwardRef"
    assert llm.remaining == 1
    assert info.value.trace.plan is not None


def test_sub_error_keeps_partial_trace():
    llm = ScriptedBackend.from_replies(
        "<answer>Step1: a\nAction1: Retrieval(s=s1:x[a], p=p1:r, o=o1:y)\nStep2: b\nAction2: Math(content=[o1], target=t)->m2</answer>",
        REFUSAL,
        "<answer>Yes</answer>",
        "<answer>\\boxed{no numbers}</answer>",
        "<answer>\\boxed{what}</answer>",
    )
    with pytest.raises(PipelineError) as info:
        Thinker(llm, CORPUS).run_question("q")
    trace = info.value.trace
    assert info.value.index == 2 and len(trace.subs) == 1 and not trace.complete
    assert "ExpressionInvalid" in trace.error


def test_decomposition_failure():
    with pytest.raises(PipelineError):
        Thinker(ScriptedBackend.from_replies("no plan"), CORPUS).run_question("q")


def test_llm_call_bound_per_sub():
    for m in (1, 2, 4):
        llm = RuleBackend({"focus": lambda q, p: "<answer>No</answer>", "kbd_answer": lambda q, p: boxed_completion("x", 0.1), "kbd_assess": lambda q, p: boxed_reply("True")})
        a = _run_retrieval(llm, SolveConfig(max_depth=m))
        assert len(llm.log) <= 2 + 3 * m
        assert len(a.turns) == m


def test_trace_round_trip(tmp_path, film_question, film_llm, film_retriever):
    result = Thinker(film_llm, film_retriever).run_question(film_question["question"])
    path = result.trace.save(tmp_path / "t.json")
    again = RunTrace.load(path)
    assert again.to_dict() == result.trace.to_dict()
    assert again.counters["retrievals"] == 4


def test_session_conversation_shape(film_question, film_llm, film_retriever):
    result = Thinker(film_llm, film_retriever).run_question(film_question["question"])
    roles = [m.role for m in result.trace.messages]
    assert roles[0] == "system"
    assert roles[1:] == ["user", "assistant"] * ((len(roles) - 1) // 2)
    # every call saw the whole history
    sent, _ = film_llm.calls[-1]
    assert len(sent) == len(roles) - 1
