import json
import math

import pytest

from factjust.corpus import Chunk, Corpus, VeracityLabel
from factjust.evaluator import (
    EmptyReference,
    EvaluationError,
    ExternalScorer,
    LengthMismatch,
    LexicalOverlapScorer,
    MissingPredictions,
    evaluate_run,
    lead4,
    macro_f1,
    mean_std,
    read_predictions,
    rouge_l,
    rouge_l_precision,
    rouge_n,
    sentence_split,
    summacc,
    summacc_components,
    write_predictions,
)
from factjust.retriever import bm25_retrieve
from factjust.tokenizer import EmptyText

from conftest import make_instance
from oracle_values import VALUES


def test_rouge_oracles():
    assert rouge_n("the cat sat", "the cat", 1) == pytest.approx(VALUES["rouge1"], abs=1e-6)
    assert rouge_l("a b c", "a x c") == pytest.approx(VALUES["rougeL"], abs=1e-6)


def test_rouge_trivial_cases():
    text = "the mayor said taxes rose"
    for score in (rouge_n(text, text, 1), rouge_n(text, text, 2), rouge_l(text, text)):
        assert score == 1.0
    assert rouge_n("alpha beta", "gamma delta", 1) == 0.0
    assert rouge_l("alpha beta", "gamma delta") == 0.0
    assert rouge_l_precision("taxes rose", "the mayor said taxes rose") == 1.0
    assert rouge_n("", "ref text", 1) == 0.0


def test_rouge_clipped_counts():
    # "the" appears once in the reference, so repeats in the candidate are clipped
    assert rouge_n("the the the", "the cat", 1) == pytest.approx(2 * (1 / 3) * (1 / 2) / (1 / 3 + 1 / 2))


def test_rouge_errors():
    with pytest.raises(EmptyReference):
        rouge_n("x", "   ", 1)
    with pytest.raises(EmptyReference):
        rouge_l("x", "")
    with pytest.raises(ValueError):
        rouge_n("x", "y", 3)


def test_sentence_split_cases():
    assert sentence_split("A. B? C!") == ["A.", "B?", "C!"]
    assert sentence_split("") == []
    assert sentence_split("Dr. Smith spoke.") == ["Dr. Smith spoke."]
    assert sentence_split("It rose 3.5 percent. Then fell") == ["It rose 3.5 percent.", "Then fell"]


def test_summacc_constant_scorers():
    one = ExternalScorer(lambda p, h: 1.0)
    zero = ExternalScorer(lambda p, h: 0.0)
    cand, ref = "Taxes rose. Tolls fell.", "Taxes rose sharply."
    assert summacc(cand, ref, one) == 1.0
    assert summacc(cand, ref, zero) == 0.0
    assert summacc(cand, ref, one, aggregation="sum") == 2.0


def test_summacc_fixed_scorer_oracle():
    table = {("cand one.", "Ref a."): 1.0, ("cand one.", "Ref b."): 0.5, ("Ref a. Ref b.", "cand one."): 0.8}
    scorer = ExternalScorer(lambda p, h: table[(p, h)])
    coverage, consistency = summacc_components("cand one.", "Ref a. Ref b.", scorer)
    assert (coverage, consistency) == (0.75, 0.8)
    assert summacc("cand one.", "Ref a. Ref b.", scorer) == pytest.approx(VALUES["summacc"], abs=1e-6)


def test_summacc_errors():
    with pytest.raises(EmptyText):
        summacc("", "Ref.", LexicalOverlapScorer())
    with pytest.raises(EvaluationError):
        summacc("a.", "b.", ExternalScorer(lambda p, h: 1.5))
    with pytest.raises(ValueError):
        summacc("a.", "b.", aggregation="max")


def test_lexical_proxy_bounds():
    s = LexicalOverlapScorer()
    assert s("taxes rose in ohio", "taxes rose") == 1.0
    assert s("taxes rose", "tolls fell") == 0.0
    assert 0 <= summacc("Taxes rose. Tolls fell.", "Taxes rose sharply.") <= 1


def corpus_of(texts):
    return Corpus.from_chunks(Chunk(f"d{i}#0", f"d{i}", 0, t) for i, t in enumerate(texts))


def test_lead4_four_single_sentence_chunks():
    texts = ["gun law passed.", "gun gun lawsuit filed.", "the lawsuit failed.", "gun sales rose."]
    corpus = corpus_of(texts)
    ranked = bm25_retrieve("gun lawsuit", corpus, 4).chunk_ids
    out = lead4("gun lawsuit", corpus)
    assert out == " ".join(corpus[c].text for c in ranked)
    assert sorted(sentence_split(out)) == sorted(texts)


def test_lead4_caps_and_bounds():
    two = lead4("gun lawsuit", corpus_of(["gun law passed. More text.", "a lawsuit. Second."]))
    assert len(sentence_split(two)) == 2
    many = corpus_of([f"gun story {i}. Extra sentence {i}." for i in range(9)])
    assert len(sentence_split(lead4("gun story", many))) <= 4


def test_lead4_ignores_rank_five_and_below():
    base = ["gun lawsuit one.", "gun lawsuit two.", "gun lawsuit three.", "gun lawsuit four.", "tolls rose."]
    changed = base[:4] + ["taxes fell. More."]
    assert lead4("gun lawsuit", corpus_of(base)) == lead4("gun lawsuit", corpus_of(changed))


def test_macro_f1_cases():
    gold = ["false", "mixture", "true", "true"]
    assert macro_f1(gold, gold) == 1.0
    assert macro_f1(["true", "true"], ["true", "true"]) == pytest.approx(1 / 3)
    counts = {"false": 388, "mixture": 532, "true": 67}
    gold = [label for label, n in counts.items() for _ in range(n)]
    score = macro_f1(["mixture"] * len(gold), gold)
    assert score == pytest.approx(VALUES["majority_macro_f1"], abs=1e-12)
    assert abs(100 * score - 23.34) <= 0.01
    with pytest.raises(LengthMismatch):
        macro_f1(["true"], ["true", "false"])
    assert macro_f1([VeracityLabel.TRUE], ["true"]) == pytest.approx(1 / 3)


def test_mean_std():
    mean, std = mean_std([0.2, 0.3, 0.4])
    assert mean == pytest.approx(VALUES["seed_mean"]) and std == pytest.approx(VALUES["seed_std"])
    assert mean_std([0.5]) == (0.5, None)


def refs():
    return [make_instance(i) for i in range(3)]


def rows_for(instances, text=None, label=None):
    out = {}
    for inst in instances:
        row = {"id": inst.id, "justification": text or inst.justification}
        if label:
            row["label"] = label
        out[inst.id] = row
    return out


def test_evaluate_identical_seeds_zero_std():
    r = refs()
    report = evaluate_run({"s1": rows_for(r), "s2": rows_for(r), "s3": rows_for(r)}, r)
    assert report.mean["rouge1"] == 1.0
    assert all(report.std[m] == 0.0 for m in report.metrics)
    assert "macro_f1" not in report.metrics
    assert all(0 <= v <= 1 for seed in report.per_instance.values() for inst in seed.values() for v in inst.values())


def test_evaluate_one_seed_and_labels(tmp_path):
    r = refs()
    report = evaluate_run({"only": rows_for(r, label="mixture")}, r, metrics=["rouge1"])
    assert report.metrics == ["rouge1", "macro_f1"]
    assert report.std["rouge1"] is None
    assert "(-)" in report.table()
    report.write(tmp_path / "report.json")
    assert json.loads((tmp_path / "report.json").read_text())["std"]["rouge1"] is None


def test_evaluate_seed_spread_matches_sample_std():
    r = refs()[:1]
    ref = r[0].justification.split()
    preds = {}
    for name, k in (("a", 2), ("b", 3), ("c", 4)):
        preds[name] = {r[0].id: {"id": r[0].id, "justification": " ".join(ref[:k])}}
    report = evaluate_run(preds, r, metrics=["rouge1"])
    vals = [report.per_seed[s]["rouge1"] for s in "abc"]
    mean = sum(vals) / 3
    assert report.mean["rouge1"] == pytest.approx(mean)
    assert report.std["rouge1"] == pytest.approx(math.sqrt(sum((v - mean) ** 2 for v in vals) / 2))


def test_evaluate_missing_predictions():
    r = refs()
    partial = rows_for(r[:2])
    with pytest.raises(MissingPredictions) as err:
        evaluate_run({"s": partial}, r)
    assert r[2].id in str(err.value)
    with pytest.raises(MissingPredictions):
        evaluate_run({}, r)
    with pytest.raises(EvaluationError):
        evaluate_run({"s": rows_for(r)}, r, metrics=["bleu"])


def test_predictions_roundtrip(tmp_path):
    rows = [{"id": "b", "justification": "x"}, {"id": "a", "justification": "y", "label": "true"}]
    write_predictions(tmp_path / "p.jsonl", rows)
    assert read_predictions(tmp_path / "p.jsonl") == {"b": rows[0], "a": rows[1]}
