"""Synthetic claims with planted evidence, for desk-scale end-to-end checks.

Each claim gets a fact-check article that restates the true figures and a
justification after an "Our ruling" cue. Two reference chunks per claim
paraphrase the article's evidence; the rest of the corpus is distractor
text built from the same vocabulary.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import RawRecord, ReferenceDoc

SPEAKERS = (
    "adams baker carter davis evans foster garcia harris irwin jensen keller lopez morgan nelson ortiz "
    "parker quinn reyes stone turner underwood vance walsh young zimmer abbott bishop crane dunn ellis"
).split()
TOPICS = (
    "wages rent tuition crime tolls fares taxes tariffs pensions salaries layoffs exports imports "
    "deficits subsidies vaccinations enrollment emissions arrests evictions"
).split()
PLACES = "ohio texas oregon maine utah nevada georgia iowa kansas vermont idaho montana".split()
AGENCIES = "census treasury labor commerce audit statistics".split()
ACTIONS = ("rose", "fell", "doubled", "stalled")
FILLER = (
    "the a of and in on for with by from at about after before during officials residents report "
    "statement analysis data figures budget committee session county city state federal local public "
    "program plan policy review hearing vote office board meeting week month year summer winter spring "
    "record source interview website campaign press release speech remarks supporters critics voters "
    "history context change level period trend number share growth decline debate question issue"
).split()


@dataclass
class SyntheticConfig:
    n_train: int = 30
    n_test: int = 20
    n_chunks: int = 500
    planted_per_claim: int = 2
    seed: int = 0


@dataclass
class SyntheticData:
    records: list[RawRecord]
    probe: dict[str, list[str]]  # instance id -> planted chunk ids


def _filler(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(FILLER) for _ in range(n))


def generate(config: SyntheticConfig | None = None) -> SyntheticData:
    cfg = config or SyntheticConfig()
    rng = random.Random(cfg.seed)
    n_claims = cfg.n_train + cfg.n_test
    n_planted = n_claims * cfg.planted_per_claim
    if n_planted > cfg.n_chunks:
        raise ValueError("corpus too small for the planted evidence")
    labels = ["false", "mixture", "true"]

    records: list[RawRecord] = []
    probe: dict[str, list[str]] = {}
    for k in range(n_claims):
        rid = f"syn{k:04d}"
        speaker, topic, place, agency = rng.choice(SPEAKERS), rng.choice(TOPICS), rng.choice(PLACES), rng.choice(AGENCIES)
        label = labels[k % 3]
        action = rng.choice(ACTIONS)
        claimed = rng.randint(10, 99)
        if label == "true":
            true_action, true_num = action, claimed
        elif label == "mixture":
            true_action, true_num = action, rng.choice([n for n in range(10, 100) if n != claimed])
        else:
            true_action, true_num = rng.choice([a for a in ACTIONS if a != action]), rng.randint(10, 99)

        claim = f"{speaker} says {topic} {action} {claimed} percent in {place}."
        justification = (
            f"Our ruling: {speaker} said {topic} {action} {claimed} percent in {place}. "
            f"The {agency} records show {topic} {true_action} {true_num} percent. We rate this claim {label}."
        )
        body = (
            f"{speaker} said in a {rng.choice(['speech', 'interview', 'statement'])} that {topic} {action} {claimed} percent in {place}. "
            f"{_filler(rng, 30)}. According to the {agency} office, {topic} in {place} {true_action} {true_num} percent over the period. "
            f"{_filler(rng, 30)}. The figures on {topic} support a {label} rating for {speaker}. {_filler(rng, 40)}."
        )
        evidence = [
            f"{agency} report on {topic} in {place}: {topic} {true_action} {true_num} percent this year. {_filler(rng, 50)}.",
            f"{speaker} remarks on {topic} in {place}. {speaker} claimed {topic} {action} {claimed} percent. {_filler(rng, 50)}.",
        ][: cfg.planted_per_claim]
        docs = [ReferenceDoc(f"{rid}-ev{i}", text) for i, text in enumerate(evidence)]
        records.append(
            RawRecord(
                id=rid,
                claim=claim,
                article=f"{body} {justification}",
                label=label,
                reference_docs=docs,
                split="train" if k < cfg.n_train else "test",
            )
        )
        probe[rid] = [f"{d.doc_id}#0" for d in docs]

    # distractors attach to the records so the corpus stays one mixed pool
    for i in range(cfg.n_chunks - n_planted):
        text = (
            f"{rng.choice(SPEAKERS)} and {rng.choice(TOPICS)} in {rng.choice(PLACES)}: "
            f"{rng.choice(TOPICS)} {rng.choice(ACTIONS)} {rng.randint(10, 99)} percent. {_filler(rng, 50)}."
        )
        records[i % n_claims].reference_docs.append(ReferenceDoc(f"noise{i:05d}", text))
    return SyntheticData(records, probe)
