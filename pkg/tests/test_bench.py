import json
from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest

import mpcc.bench as B
from mpcc.bench import (EASY, HARD, ChoiceItem, ChoiceQuestion, JudgmentRecord, ScoreTable, answer_choice,
                        build_questions, distractor_pools, judge_items, oracle_choice, random_baseline_table,
                        read_questions_jsonl, reshuffle, score_choices, score_external, score_judgments,
                        write_choice_answers, write_choice_report, write_questions_jsonl)
from mpcc.errors import GenerationError, InputError
from mpcc.policy import init_policy
from mpcc.world import MaskedQuery, generate_queries, oracle_posterior, serialize_prompt

from conftest import hand_world

OBJECTS = ("gt", "a", "b", "c", "d", "x", "y")


def fixture_query(world, qid="fx"):
    attrs = ("left", "small")
    post = oracle_posterior(world, ("c0",), attrs)
    return MaskedQuery(qid, serialize_prompt(("c0",), attrs), "gt", "moderate", post)


@pytest.fixture(scope="module")
def fixture_world():
    return hand_world([([(0,)], [1.0], [{"gt": 0.5, "a": 0.3, "b": 0.1, "c": 0.05, "d": 0.05}])],
                      objects=OBJECTS)


@pytest.fixture(scope="module")
def queries(world):
    return generate_queries(world, 300, np.random.default_rng(21))


@pytest.fixture(scope="module")
def questions(world, queries):
    return build_questions(world, queries, seed=4)


# construction

def test_confusing_set_from_posterior(fixture_world):
    q = fixture_query(fixture_world)
    confusing, irrelevant = distractor_pools(fixture_world, q)
    names = [OBJECTS[o] for o in confusing]
    assert names[:4] == ["a", "b", "c", "d"]
    assert sorted(OBJECTS[o] for o in irrelevant) == ["x", "y"]
    qs = build_questions(fixture_world, [q], seed=0)
    hard = next(x for x in qs if x.format == HARD)
    assert {o.text for o in hard.options if o.kind == "Confusing"} == {"a", "b", "c", "d"}


def test_formats_and_kind_multisets(questions):
    assert len(questions) == 600
    for q in questions:
        kinds = Counter(o.kind for o in q.options)
        if q.format == EASY:
            assert len(q.options) == 4 and kinds == Counter(GT=1, Confusing=2, Irrelevant=1)
        else:
            assert len(q.options) == 7 and kinds == Counter(GT=1, Confusing=4, Irrelevant=2)
        assert q.options[q.correct_index].kind == "GT"
        assert len({o.text for o in q.options}) == len(q.options)


def test_distractor_kinds_respect_posterior(world, queries, questions):
    by_id = {q.query_id: q for q in queries}
    for qu in questions:
        post = by_id[qu.query_ref].posterior
        for o in qu.options:
            p = post[world.object_index[o.text]]
            if o.kind == "Irrelevant":
                assert p == 0.0


def test_question_files_are_deterministic(tmp_path, world, queries):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_questions_jsonl(a, build_questions(world, queries, seed=4))
    write_questions_jsonl(b, build_questions(world, queries, seed=4))
    assert a.read_bytes() == b.read_bytes()
    assert read_questions_jsonl(a) == build_questions(world, queries, seed=4)


def test_insufficient_candidates_names_query():
    small = hand_world([([(0,)], [1.0], [{"a": 0.6, "b": 0.4}])], objects=("a", "b", "c", "d"))
    attrs = ("left", "small")
    q = MaskedQuery("tiny", serialize_prompt(("c0",), attrs), "a", "moderate",
                    oracle_posterior(small, ("c0",), attrs))
    with pytest.raises(GenerationError, match="tiny"):
        build_questions(small, [q], seed=0)


# answering

def fake_greedy(monkeypatch, tokens):
    monkeypatch.setattr(B, "sample_response", lambda *a, **k: SimpleNamespace(response_tokens=tuple(tokens)))


def test_generate_match_exact_option(monkeypatch, questions, queries):
    qu = questions[0]
    target = qu.options[2].text
    fake_greedy(monkeypatch, ["<think>", "x", "</think>", "<answer>", target, "</answer>"])
    assert answer_choice(None, qu, queries[0], mode="generate-match") == 2


def test_generate_match_ties_pick_lowest(monkeypatch):
    qu = ChoiceQuestion("t", "q", EASY, (ChoiceItem("cat", "Confusing"), ChoiceItem("cut", "GT"),
                                         ChoiceItem("cot", "Confusing"), ChoiceItem("zzz", "Irrelevant")), 1, "easy")
    fake_greedy(monkeypatch, ["cit"])
    assert answer_choice(None, qu, None, mode="generate-match") == 0


def test_unknown_mode(questions, queries, small_policy):
    with pytest.raises(InputError):
        answer_choice(small_policy, questions[0], queries[0], mode="vibes")


def test_uniform_policy_likelihood_accuracy(world, queries):
    p = init_policy(world.vocab)
    by_id = {q.query_id: q for q in queries}
    answers = []
    for seed in range(34):
        for qu in build_questions(world, queries, seed=100 + seed):
            if qu.format == EASY:
                answers.append(int(answer_choice(p, qu, by_id[qu.query_ref]) == qu.correct_index))
    assert len(answers) >= 10_000
    assert abs(100 * np.mean(answers) - 25.0) <= 1.5


def test_scoring_is_shuffle_invariant(world, queries, questions, small_policy):
    by_id = {q.query_id: q for q in queries}
    subset = questions[:120]
    base = score_choices((qu, answer_choice(small_policy, qu, by_id[qu.query_ref])) for qu in subset)
    rng = np.random.default_rng(8)
    shuffled = []
    for qu in subset:
        lps = B.option_logprobs(small_policy, by_id[qu.query_ref], qu.options)
        assert len(set(lps.round(12))) == len(lps)        # tie-free
        new, _ = reshuffle(qu, rng)
        shuffled.append((new, answer_choice(small_policy, new, by_id[qu.query_ref])))
    assert score_choices(shuffled).cells == base.cells


def test_oracle_choice_picks_gt(world, queries, questions):
    by_id = {q.query_id: q for q in queries}
    for qu in questions[:100]:
        q = by_id[qu.query_ref]
        post = [q.posterior[world.object_index[o.text]] for o in qu.options]
        assert oracle_choice(world, qu, q) == int(np.argmax(post))


# scoring

def test_random_answers_match_analytic_row():
    rng = np.random.default_rng(0)
    answers = []
    for subset in ("hard", "moderate", "easy"):
        for fmt, n in ((EASY, 4), (HARD, 7)):
            for i in range(10_000):
                opts = tuple(ChoiceItem(str(j), "GT" if j == 0 else "Confusing") for j in range(n))
                q = ChoiceQuestion(f"{subset}{fmt}{i}", "q", fmt, opts, int(rng.integers(n)), subset)
                answers.append((q, int(rng.integers(n))))
    t = score_choices(answers)
    for s in ("hard", "moderate", "easy"):
        assert abs(t.cell(s, EASY) - 25.0) <= 1.0 and abs(t.cell(s, HARD) - 100 / 7) <= 1.0
    assert abs(t.sum - 117.87) <= 3.0
    r = random_baseline_table()
    assert r.sum == pytest.approx(75 + 300 / 7, abs=1e-12)


def test_human_row_sum_is_exact():
    t = ScoreTable.from_cells([97.82, 96.27, 98.53, 98.24, 99.56, 98.67])
    assert round(t.sum, 2) == 589.09
    assert t.sum == 97.82 + 96.27 + 98.53 + 98.24 + 99.56 + 98.67


def test_all_correct_and_absent_cells(questions):
    t = score_choices((q, q.correct_index) for q in questions)
    assert all(v == 100.0 for v in t.cells.values())
    easy_only = score_choices((q, q.correct_index) for q in questions if q.subset == "easy")
    if len(easy_only.cells) < 6:
        assert easy_only.sum is None and easy_only.ave_e is None


def test_duplicate_answers_rejected(questions):
    with pytest.raises(InputError):
        score_choices([(questions[0], 0), (questions[0], 1)])


def judgment_fixture(says):
    items = [ChoiceItem("g", "GT")] + [ChoiceItem(f"c{i}", "Confusing") for i in range(4)] + \
            [ChoiceItem(f"i{i}", "Irrelevant") for i in range(2)]
    return [JudgmentRecord("q", it, says(it)) for it in items]


def test_judgment_examples():
    yes = score_judgments(judgment_fixture(lambda it: True))
    assert (yes.gt, yes.confusing, yes.irrelevant) == (100.0, 0.0, 0.0)
    assert yes.all == pytest.approx(100 / 7, abs=1e-9)
    no = score_judgments(judgment_fixture(lambda it: False))
    assert (no.gt, no.confusing, no.irrelevant) == (0.0, 100.0, 100.0)
    assert no.all == pytest.approx(600 / 7, abs=1e-9)
    perfect = score_judgments(judgment_fixture(lambda it: it.kind == "GT"))
    assert (perfect.gt, perfect.confusing, perfect.irrelevant, perfect.all) == (100.0,) * 4
    with pytest.raises(InputError):
        score_judgments([])


def test_judge_rule():
    assert judge_items(np.log([0.5, 0.25, 0.2, 0.05])) == [True, True, False, False]


# external answers

def test_external_round_trip(tmp_path, world, queries, questions, small_policy):
    by_id = {q.query_id: q for q in queries}
    internal = [(qu, answer_choice(small_policy, qu, by_id[qu.query_ref])) for qu in questions[:60]]
    qf, af = tmp_path / "q.jsonl", tmp_path / "a.jsonl"
    write_questions_jsonl(qf, questions)
    write_choice_answers(af, internal)
    assert score_external(qf, af) == score_choices(internal)


def test_external_echo_correct_and_errors(tmp_path, questions):
    qf, af = tmp_path / "q.jsonl", tmp_path / "a.jsonl"
    write_questions_jsonl(qf, questions)
    af.write_text("".join(json.dumps({"question_id": q.question_id, "selected_index": q.correct_index}) + "\n"
                          for q in questions))
    assert all(v == 100.0 for v in score_external(qf, af).cells.values())
    af.write_text("")
    with pytest.raises(InputError):
        score_external(qf, af)
    af.write_text(json.dumps({"question_id": "nope", "selected_index": 0}) + "\n")
    with pytest.raises(InputError, match="nope"):
        score_external(qf, af)


def test_external_judgments(tmp_path, questions):
    qf, af = tmp_path / "q.jsonl", tmp_path / "a.jsonl"
    write_questions_jsonl(qf, questions)
    rows = [{"question_id": q.question_id, "item_id": i, "yes": o.kind == "GT"}
            for q in questions[:10] for i, o in enumerate(q.options)]
    af.write_text("".join(json.dumps(r) + "\n" for r in rows))
    js = score_external(qf, af)
    assert (js.gt, js.confusing, js.irrelevant, js.all) == (100.0,) * 4


def test_choice_report_marks_absent(tmp_path):
    t = ScoreTable({("easy", EASY): 50.0})
    path = tmp_path / "r.csv"
    write_choice_report(path, [("m", t)])
    row = path.read_text().splitlines()[1].split(",")
    assert row[0] == "m" and row[5] == "50.00" and row[-1] == "NA" and row[1] == "NA"
