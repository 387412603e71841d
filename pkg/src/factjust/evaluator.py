"""ROUGE, SummaCC, Lead-4, macro-F1 and multi-seed report assembly.

All metric values are kept in [0, 1]; percent scaling happens only when a
report table is rendered.
"""

from __future__ import annotations

import json
import re
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .corpus import Corpus, Instance, VeracityLabel
from .retriever import BM25
from .tokenizer import EmptyText

METRICS = ("rouge1", "rouge2", "rougeL", "summacc")
ABBREVIATIONS = frozenset(
    {"dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "gov", "sen", "rep", "gen", "lt", "col", "vs", "etc", "inc", "u.s", "e.g", "i.e", "jan", "feb", "aug", "sept", "oct", "nov", "dec"}
)


class EvaluationError(ValueError):
    pass


class EmptyReference(EvaluationError):
    pass


class LengthMismatch(EvaluationError):
    pass


class EmptySummaryText(EvaluationError, EmptyText):
    pass


class MissingPredictions(EvaluationError):
    def __init__(self, missing: Sequence[str], source: str = ""):
        self.missing = list(missing)
        where = f" in {source}" if source else ""
        super().__init__(f"{len(self.missing)} reference ids have no prediction{where}: {', '.join(self.missing[:20])}")


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def _prf(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n(candidate: str, reference: str, n: int) -> float:
    """ROUGE-N F1 with clipped n-gram counts."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    ref = _tokens(reference)
    if not ref:
        raise EmptyReference("reference is empty")
    cand = _tokens(candidate)
    grams = lambda toks: Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
    c, r = grams(cand), grams(ref)
    if not r:
        return 0.0
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    ref = _tokens(reference)
    if not ref:
        raise EmptyReference("reference is empty")
    cand = _tokens(candidate)
    return _prf(lcs_length(cand, ref), len(cand), len(ref))


def rouge_l_precision(candidate: str, reference: str) -> float:
    cand = _tokens(candidate)
    return lcs_length(cand, _tokens(reference)) / len(cand) if cand else 0.0


_SENT_END = re.compile(r"[.!?]+(?=\s|$)")


def sentence_split(text: str) -> list[str]:
    """Split after ``.``, ``!`` or ``?`` followed by whitespace or end of text.

    A period closing a known abbreviation (``Dr.``, ``U.S.``) does not end a
    sentence.
    """
    out, start = [], 0
    for m in _SENT_END.finditer(text):
        end = m.end()
        if m.group() == ".":
            prev = text[start : m.start()].split()
            word = prev[-1].lower() if prev else ""
            if word in ABBREVIATIONS:
                continue
        sent = text[start:end].strip()
        if sent:
            out.append(sent)
        start = end
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


class EntailmentScorer(Protocol):
    name: str

    def __call__(self, premise: str, hypothesis: str) -> float: ...


class LexicalOverlapScorer:
    """Entailment proxy: share of the hypothesis's word types present in the premise.

    A desk-scale stand-in for an NLI model; reports label it as a proxy.
    """

    name = "lexical-overlap-proxy"

    def __call__(self, premise: str, hypothesis: str) -> float:
        hyp = set(re.findall(r"\w+", hypothesis.lower()))
        if not hyp:
            return 0.0
        return len(hyp & set(re.findall(r"\w+", premise.lower()))) / len(hyp)


class ExternalScorer:
    """Wraps any ``(premise, hypothesis) -> probability`` callable, e.g. an NLI model."""

    def __init__(self, fn: Callable[[str, str], float], name: str = "external"):
        self.fn = fn
        self.name = name

    def __call__(self, premise: str, hypothesis: str) -> float:
        p = float(self.fn(premise, hypothesis))
        if not 0.0 <= p <= 1.0:
            raise EvaluationError(f"scorer {self.name} returned {p}, outside [0, 1]")
        return p


def summacc_components(candidate: str, reference: str, scorer: EntailmentScorer) -> tuple[float, float]:
    """Return ``(coverage, consistency)``, each the mean over the split side's sentences."""
    ref_sents, cand_sents = sentence_split(reference), sentence_split(candidate)
    if not ref_sents or not cand_sents:
        raise EmptySummaryText("SummaCC needs non-empty candidate and reference")
    coverage = sum(scorer(candidate, s) for s in ref_sents) / len(ref_sents)
    consistency = sum(scorer(reference, s) for s in cand_sents) / len(cand_sents)
    return coverage, consistency


def summacc(candidate: str, reference: str, scorer: EntailmentScorer | None = None, aggregation: str = "mean") -> float:
    coverage, consistency = summacc_components(candidate, reference, scorer or LexicalOverlapScorer())
    if aggregation == "mean":
        return (coverage + consistency) / 2
    if aggregation == "sum":
        return coverage + consistency
    raise ValueError(f"aggregation must be 'mean' or 'sum', got {aggregation!r}")


def lead4(claim: str, corpus: Corpus | BM25, k: int = 4) -> str:
    """First sentence of each of the top-k BM25 chunks, in rank order."""
    bm25 = corpus if isinstance(corpus, BM25) else BM25(corpus)
    hits = bm25.retrieve(claim, min(k, len(bm25.chunk_ids)))
    firsts = []
    for cid in hits.chunk_ids:
        sents = sentence_split(bm25.text(cid))
        if sents:
            firsts.append(sents[0])
    return " ".join(firsts)


def macro_f1(predictions: Sequence[VeracityLabel | str], gold: Sequence[VeracityLabel | str]) -> float:
    """Unweighted mean of per-class F1 over false/mixture/true; absent classes score 0."""
    if len(predictions) != len(gold):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(gold)} gold labels")
    pred = [VeracityLabel(p) for p in predictions]
    ref = [VeracityLabel(g) for g in gold]
    scores = []
    for label in VeracityLabel.ordered():
        tp = sum(p == label and g == label for p, g in zip(pred, ref))
        fp = sum(p == label and g != label for p, g in zip(pred, ref))
        fn = sum(p != label and g == label for p, g in zip(pred, ref))
        scores.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return sum(scores) / len(scores)


# -- reports -----------------------------------------------------------------


def score_instance(candidate: str, reference: str, scorer: EntailmentScorer, aggregation: str = "mean") -> dict[str, float]:
    return {
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l(candidate, reference),
        "summacc": summacc(candidate, reference, scorer, aggregation) if candidate.strip() else 0.0,
    }


@dataclass
class MetricReport:
    metrics: list[str]
    seeds: list[str]
    per_instance: dict[str, dict[str, dict[str, float]]]  # seed -> id -> metric -> value
    per_seed: dict[str, dict[str, float]]  # seed -> metric -> mean
    mean: dict[str, float]
    std: dict[str, float | None]
    scorer: str
    summacc_aggregation: str = "mean"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "seeds": self.seeds,
            "per_instance": self.per_instance,
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
            "scorer": self.scorer,
            "summacc_aggregation": self.summacc_aggregation,
            "notes": self.notes,
        }

    def table(self) -> str:
        width = max(10, *(len(s) for s in self.seeds)) + 2
        head = "run".ljust(width) + "".join(m.rjust(12) for m in self.metrics)
        lines = [head, "-" * len(head)]
        for seed in self.seeds:
            lines.append(seed.ljust(width) + "".join(f"{100 * self.per_seed[seed][m]:12.2f}" for m in self.metrics))
        cells = []
        for m in self.metrics:
            sd = self.std[m]
            cells.append(f"{100 * self.mean[m]:.2f}" + (f"({100 * sd:.2f})" if sd is not None else "(-)"))
        lines.append("mean(std)".ljust(width) + "".join(c.rjust(12) for c in cells))
        if "summacc" in self.metrics:
            lines.append(f"summacc scorer: {self.scorer}, aggregation: {self.summacc_aggregation}")
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(path)


def mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and sample standard deviation; the deviation is None for one value."""
    mean = statistics.fmean(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else None)


def evaluate_run(
    predictions: Mapping[str, Mapping[str, dict]],
    references: Sequence[Instance],
    metrics: Sequence[str] = METRICS,
    scorer: EntailmentScorer | None = None,
    aggregation: str = "mean",
) -> MetricReport:
    """Score each seed's predictions against the references and aggregate across seeds.

    ``predictions`` maps a seed/run name to ``{instance_id: prediction row}``.
    ``macro_f1`` is added when every row of every run carries a label.
    """
    if not predictions:
        raise MissingPredictions([], "no prediction files")
    scorer = scorer or LexicalOverlapScorer()
    metrics = list(metrics)
    unknown = [m for m in metrics if m not in (*METRICS, "macro_f1")]
    if unknown:
        raise EvaluationError(f"unknown metrics: {unknown}")
    ref_by_id = {r.id: r for r in references}
    with_labels = all("label" in row for rows in predictions.values() for row in rows.values())
    if with_labels and "macro_f1" not in metrics:
        metrics.append("macro_f1")
    text_metrics = [m for m in metrics if m != "macro_f1"]

    per_instance: dict[str, dict[str, dict[str, float]]] = {}
    per_seed: dict[str, dict[str, float]] = {}
    for seed, rows in predictions.items():
        missing = sorted(set(ref_by_id) - set(rows))
        if missing:
            raise MissingPredictions(missing, seed)
        scored = {}
        for iid in sorted(ref_by_id):
            full = score_instance(rows[iid]["justification"], ref_by_id[iid].justification, scorer, aggregation)
            scored[iid] = {m: full[m] for m in text_metrics}
        per_instance[seed] = scored
        agg = {m: statistics.fmean(v[m] for v in scored.values()) for m in text_metrics}
        if "macro_f1" in metrics:
            ids = sorted(ref_by_id)
            agg["macro_f1"] = macro_f1([rows[i]["label"] for i in ids], [ref_by_id[i].label for i in ids])
        per_seed[seed] = agg

    mean, std = {}, {}
    for m in metrics:
        mean[m], std[m] = mean_std([per_seed[s][m] for s in predictions])
    notes = ["ROUGE: whitespace tokens, lowercased, no stemming"]
    if "summacc" in metrics and isinstance(scorer, LexicalOverlapScorer):
        notes.append("SummaCC uses the lexical-overlap entailment proxy, not an NLI model")
    return MetricReport(metrics, list(predictions), per_instance, per_seed, mean, std, scorer.name, aggregation, notes)


def read_predictions(path: str | Path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return {str(r["id"]): r for r in rows}


def write_predictions(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    tmp.replace(path)
