"""Single-choice benchmark construction and scoring.

Each accepted query yields an EasyChoice question (GT + 2 confusing + 1
irrelevant) and a HardChoice question (GT + 4 confusing + 2 irrelevant).
Confusing items are the most probable wrong objects under the oracle posterior
(ties broken by plausibility within the consistent scene families, then by
index); irrelevant items are drawn from objects impossible in every scene
family consistent with the cues.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tokens as T
from .errors import GenerationError, InputError
from .policy import PolicyParams, TokenBatch, sample_response, segment_boundary
from .reward import levenshtein_ratio, parse_response
from .world import MaskedQuery, WorldModel, family_posterior

EASY, HARD = "EasyChoice", "HardChoice"
FORMAT_COUNTS = {EASY: {"GT": 1, "Confusing": 2, "Irrelevant": 1},
                 HARD: {"GT": 1, "Confusing": 4, "Irrelevant": 2}}
SUBSETS = ("hard", "moderate", "easy")
KINDS = ("GT", "Confusing", "Irrelevant")
ABSENT = "NA"


@dataclass(frozen=True)
class ChoiceItem:
    text: str
    kind: str


@dataclass(frozen=True)
class ChoiceQuestion:
    question_id: str
    query_ref: str
    format: str
    options: tuple[ChoiceItem, ...]
    correct_index: int
    subset: str

    def to_record(self) -> dict:
        return {"question_id": self.question_id, "query_id": self.query_ref, "format": self.format,
                "subset": self.subset, "correct_index": self.correct_index,
                "options": [{"text": o.text, "kind": o.kind} for o in self.options]}

    @classmethod
    def from_record(cls, rec: dict) -> "ChoiceQuestion":
        return cls(rec["question_id"], rec["query_id"], rec["format"],
                   tuple(ChoiceItem(o["text"], o["kind"]) for o in rec["options"]),
                   int(rec["correct_index"]), rec["subset"])


@dataclass(frozen=True)
class JudgmentRecord:
    query_ref: str
    item: ChoiceItem
    model_says_yes: bool


@dataclass
class ScoreTable:
    """Accuracy percentages keyed by (subset, format); missing cells are absent."""

    cells: dict[tuple[str, str], float]
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def cell(self, subset: str, fmt: str) -> float | None:
        return self.cells.get((subset, fmt))

    def _ave(self, fmt: str) -> float | None:
        vals = [self.cell(s, fmt) for s in SUBSETS]
        return None if any(v is None for v in vals) else sum(vals) / 3.0

    @property
    def ave_e(self) -> float | None:
        return self._ave(EASY)

    @property
    def ave_h(self) -> float | None:
        return self._ave(HARD)

    @property
    def sum(self) -> float | None:
        vals = [self.cell(s, f) for s in SUBSETS for f in (EASY, HARD)]
        if any(v is None for v in vals):
            return None
        total = 0.0
        for v in vals:
            total += v
        return total

    @classmethod
    def from_cells(cls, values: Sequence[float]) -> "ScoreTable":
        """Six values in table order: hard E/H, moderate E/H, easy E/H."""
        keys = [(s, f) for s in SUBSETS for f in (EASY, HARD)]
        return cls(dict(zip(keys, map(float, values))))

    def row(self) -> list[float | None]:
        out: list[float | None] = []
        for s in SUBSETS:
            out += [self.cell(s, EASY), self.cell(s, HARD)]
        return out + [self.ave_e, self.ave_h, self.sum]


@dataclass(frozen=True)
class JudgmentScores:
    gt: float
    confusing: float
    irrelevant: float
    all: float


# --------------------------------------------------------------------------- #
# building

def distractor_pools(world: WorldModel, query: MaskedQuery) -> tuple[list[int], list[int]]:
    """Ranked confusing candidates and irrelevant candidates for a query."""
    cues, attrs = query.context()
    fam_w = family_posterior(world, cues, attrs)
    K = world.n_objects
    marginal = np.zeros(K)
    possible = np.zeros(K)
    for f, wf in enumerate(fam_w):
        if wf <= 0:
            continue
        fam = world.families[f]
        marginal += wf * (fam.combo_probs @ fam.target_probs)
        mask = np.ones(K)
        mask[list(fam.irrelevant_set)] = 0.0
        possible += wf * mask
    gold = world.object_index[query.gold]
    post = query.posterior
    order = np.lexsort((np.arange(K), -possible, -marginal, -post))
    confusing = [int(o) for o in order if o != gold and (post[o] > 0 or possible[o] > 0)]
    irrelevant = [o for o in range(K) if o != gold and possible[o] == 0 and post[o] == 0]
    return confusing, irrelevant


def build_questions(world: WorldModel, queries: Sequence[MaskedQuery], seed: int) -> list[ChoiceQuestion]:
    """Both formats for every query; deterministic in (queries, seed)."""
    rng = np.random.default_rng(seed)
    out = []
    for q in queries:
        confusing, irrelevant = distractor_pools(world, q)
        if len(confusing) < 4 or len(irrelevant) < 2:
            raise GenerationError(f"query {q.query_id}: need 4 confusing and 2 irrelevant candidates, "
                                  f"have {len(confusing)} and {len(irrelevant)}")
        conf = confusing[:4]
        irr = [irrelevant[i] for i in rng.choice(len(irrelevant), size=2, replace=False)]
        name = world.object_vocab
        for fmt, n_conf, n_irr in ((EASY, 2, 1), (HARD, 4, 2)):
            items = [ChoiceItem(q.gold, "GT")]
            items += [ChoiceItem(name[o], "Confusing") for o in conf[:n_conf]]
            items += [ChoiceItem(name[o], "Irrelevant") for o in irr[:n_irr]]
            perm = rng.permutation(len(items))
            options = tuple(items[i] for i in perm)
            correct = int(np.flatnonzero(perm == 0)[0])
            out.append(ChoiceQuestion(f"{q.query_id}-{fmt[0]}", q.query_id, fmt, options, correct,
                                      q.difficulty))
    return out


def reshuffle(question: ChoiceQuestion, rng: np.random.Generator) -> tuple[ChoiceQuestion, np.ndarray]:
    """Same question with permuted options; returns it and the permutation (new -> old)."""
    perm = rng.permutation(len(question.options))
    options = tuple(question.options[i] for i in perm)
    correct = int(np.flatnonzero(perm == question.correct_index)[0])
    return ChoiceQuestion(question.question_id, question.query_ref, question.format, options,
                          correct, question.subset), perm


def write_questions_jsonl(path: str | Path, questions: Iterable[ChoiceQuestion]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(q.to_record(), sort_keys=True, separators=(",", ":")) + "\n")


def read_questions_jsonl(path: str | Path) -> list[ChoiceQuestion]:
    with open(path, encoding="utf-8") as fh:
        return [ChoiceQuestion.from_record(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------- #
# answering with the policy

def _forced_responses(params: PolicyParams, query: MaskedQuery,
                      options: Sequence[ChoiceItem]) -> tuple[list[tuple[str, ...]], int]:
    """Greedy response with its answer segment replaced by each option in turn."""
    greedy = sample_response(params, query, greedy=True).response_tokens
    b = segment_boundary(greedy)
    think = greedy[:b]
    tail = greedy[b:]
    tagged = T.ANSWER_OPEN in tail
    out = []
    for opt in options:
        if tagged:
            answer = (T.ANSWER_OPEN, opt.text, T.ANSWER_CLOSE, T.EOS)
        else:
            answer = (opt.text, T.EOS)
        out.append(tuple(think) + answer)
    return out, b


def option_logprobs(params: PolicyParams, query: MaskedQuery,
                    options: Sequence[ChoiceItem]) -> np.ndarray:
    """logprob of the answer segment with each option forced in (same think prefix)."""
    seqs, b = _forced_responses(params, query, options)
    pr = params.encode(query.prompt_tokens)
    batch = TokenBatch(params, [pr] * len(seqs), [params.encode(s) for s in seqs])
    lp = batch.token_logprobs(params)
    pos = np.concatenate([np.arange(len(s)) for s in seqs])
    return batch.segment_sums(np.where(pos >= b, lp, 0.0))


def answer_choice(params: PolicyParams, question: ChoiceQuestion, query: MaskedQuery,
                  mode: str = "likelihood") -> int:
    if mode == "likelihood":
        return int(np.argmax(option_logprobs(params, query, question.options)))
    if mode == "generate-match":
        resp = sample_response(params, query, greedy=True).response_tokens
        answer = parse_response(resp).answer_text
        sims = [levenshtein_ratio(answer, o.text) for o in question.options]
        return int(np.argmax(sims))
    raise InputError(f"unknown answer mode {mode!r}; expected 'likelihood' or 'generate-match'")


def oracle_choice(world: WorldModel, question: ChoiceQuestion, query: MaskedQuery) -> int:
    post = [query.posterior[world.object_index[o.text]] for o in question.options]
    return int(np.argmax(post))


def judge_items(scores: Sequence[float]) -> list[bool]:
    """Yes for every item whose probability is at least half the best item's."""
    s = np.asarray(scores, dtype=float)
    return list(s >= s.max() + math.log(0.5))


def policy_judgments(params: PolicyParams, question: ChoiceQuestion,
                     query: MaskedQuery) -> list[JudgmentRecord]:
    lps = option_logprobs(params, query, question.options)
    return [JudgmentRecord(question.query_ref, item, yes)
            for item, yes in zip(question.options, judge_items(lps))]


def oracle_judgments(world: WorldModel, question: ChoiceQuestion,
                     query: MaskedQuery) -> list[JudgmentRecord]:
    with np.errstate(divide="ignore"):
        lps = np.log([query.posterior[world.object_index[o.text]] for o in question.options])
    return [JudgmentRecord(question.query_ref, item, yes)
            for item, yes in zip(question.options, judge_items(lps))]


# --------------------------------------------------------------------------- #
# scoring

def score_choices(answers: Iterable[tuple[ChoiceQuestion, int]]) -> ScoreTable:
    correct: dict[tuple[str, str], int] = {}
    total: dict[tuple[str, str], int] = {}
    seen: set[str] = set()
    for q, sel in answers:
        if q.question_id in seen:
            raise InputError(f"question {q.question_id} answered more than once")
        seen.add(q.question_id)
        key = (q.subset, q.format)
        total[key] = total.get(key, 0) + 1
        correct[key] = correct.get(key, 0) + (int(sel) == q.correct_index)
    cells = {k: 100.0 * correct[k] / n for k, n in total.items()}
    return ScoreTable(cells, dict(total))


def score_judgments(records: Sequence[JudgmentRecord]) -> JudgmentScores:
    if not records:
        raise InputError("no judgment records to score")
    hits = {k: 0 for k in KINDS}
    n = {k: 0 for k in KINDS}
    for r in records:
        n[r.item.kind] += 1
        hits[r.item.kind] += r.model_says_yes if r.item.kind == "GT" else not r.model_says_yes
    pct = {k: (100.0 * hits[k] / n[k] if n[k] else float("nan")) for k in KINDS}
    return JudgmentScores(pct["GT"], pct["Confusing"], pct["Irrelevant"],
                          100.0 * sum(hits.values()) / len(records))


def random_baseline_table() -> ScoreTable:
    """Expected accuracy of uniform guessing: 1/4 and 1/7 per subset."""
    return ScoreTable.from_cells([100.0 / 4, 100.0 / 7] * 3)


# --------------------------------------------------------------------------- #
# external answer files

def _read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def score_external(questions_file: str | Path, answers_file: str | Path):
    """Score a JSON-lines answers file against a question file.

    Rows ``{question_id, selected_index}`` give a :class:`ScoreTable`; rows
    ``{question_id, item_id, yes}`` (item_id indexes the question's options)
    give :class:`JudgmentScores`.
    """
    questions = {q.question_id: q for q in read_questions_jsonl(questions_file)}
    rows = _read_jsonl(answers_file)
    if not rows:
        raise InputError(f"{answers_file}: no answers")
    unknown = sorted({str(r.get("question_id")) for r in rows} - questions.keys())
    if unknown:
        raise InputError(f"{answers_file}: unmatched question ids: {', '.join(unknown)}")
    if all("selected_index" in r for r in rows):
        return score_choices((questions[r["question_id"]], int(r["selected_index"])) for r in rows)
    if all({"item_id", "yes"} <= r.keys() for r in rows):
        recs = []
        for r in rows:
            q = questions[r["question_id"]]
            recs.append(JudgmentRecord(q.query_ref, q.options[int(r["item_id"])], bool(r["yes"])))
        return score_judgments(recs)
    raise InputError(f"{answers_file}: rows must all carry selected_index, or all carry item_id and yes")


def write_choice_answers(path: str | Path, answers: Iterable[tuple[ChoiceQuestion, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q, sel in answers:
            fh.write(json.dumps({"question_id": q.question_id, "selected_index": int(sel)},
                                sort_keys=True, separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------- #
# reports

CHOICE_HEADER = ["model", "hard_cho_e", "hard_cho_h", "moderate_cho_e", "moderate_cho_h",
                 "easy_cho_e", "easy_cho_h", "ave_e", "ave_h", "sum"]
JUDGMENT_HEADER = ["model"] + [f"{s}_{k}" for s in SUBSETS for k in ("gt", "conf", "irre", "all")]


def fmt_cell(v: float | None) -> str:
    return ABSENT if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"


def write_choice_report(path: str | Path, rows: Sequence[tuple[str, ScoreTable]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHOICE_HEADER)
        for name, table in rows:
            w.writerow([name] + [fmt_cell(v) for v in table.row()])


def write_judgment_report(path: str | Path,
                          rows: Sequence[tuple[str, dict[str, JudgmentScores | None]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(JUDGMENT_HEADER)
        for name, per_subset in rows:
            cells = []
            for s in SUBSETS:
                js = per_subset.get(s)
                cells += [ABSENT] * 4 if js is None else \
                    [fmt_cell(js.gt), fmt_cell(js.confusing), fmt_cell(js.irrelevant), fmt_cell(js.all)]
            w.writerow([name] + cells)
