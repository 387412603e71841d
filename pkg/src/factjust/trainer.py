"""Few-shot fine-tuning: shot sampling, LM warmup, the main loop and joint veracity."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .corpus import Corpus, Instance, VeracityLabel
from .distillation import LM_LOSSES, Evidence, LossConfig, total_loss
from .generator import FiDEncoding
from .modeling import RAGModel
from .retriever import EmbeddingIndex

logger = logging.getLogger(__name__)

MODES = ("retrieval", "article_input")
VERBALIZERS = {label: label.value for label in VeracityLabel}


class TrainingError(ValueError):
    pass


class InsufficientInstances(TrainingError):
    pass


class MissingArticle(TrainingError):
    pass


class MissingLabel(TrainingError):
    pass


@dataclass
class TrainConfig:
    shots: int = 30
    balanced_shots: bool = False
    top_n: int = 20
    steps: int = 100
    batch_size: int = 8
    lr: float = 4e-5
    retriever_lr: float | None = None  # query-encoder lr; None shares ``lr``
    warmup_steps: int = 5
    seed: int = 13
    losses: LossConfig = field(default_factory=LossConfig)
    warmup_finetune_steps: int = 20
    mode: str = "retrieval"
    joint_veracity: bool = False
    veracity_weight: float = 1.0
    probe_k: int = 5

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.balanced_shots and self.shots % len(VeracityLabel):
            raise TrainingError("balanced shots must be divisible by the number of classes")
        if self.mode == "article_input" and set(self.losses.active) != {"base_lm"}:
            raise TrainingError("article_input mode trains the LM alone: only base_lm may be active")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        obj = dict(obj)
        losses = obj.pop("losses", None)
        weights = obj.pop("loss_weights", {}) or {}
        stops = obj.pop("stop_gradient", {}) or {}
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown config keys: {sorted(unknown)}")
        if losses is None:
            loss_cfg = LossConfig(weights=weights, stop_gradient=stops)
        else:
            names = losses.split(",") if isinstance(losses, str) else list(losses)
            loss_cfg = LossConfig(tuple(n.strip() for n in names if n.strip()), weights, stops)
        return cls(losses=loss_cfg, **obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["losses"] = list(self.losses.active)
        out["loss_weights"] = dict(self.losses.weights)
        out["stop_gradient"] = dict(self.losses.stop_gradient)
        return out


@dataclass
class FewShotSample:
    seed: int
    ids: list[str]


def sample_few_shot(train: Sequence[Instance], k: int, seed: int, balanced: bool = False) -> FewShotSample:
    """Draw ``k`` training instances without replacement, reproducibly per seed.

    With ``balanced`` the draw is ``k / 3`` per veracity class.
    """
    pool = sorted(train, key=lambda i: i.id)
    if k > len(pool):
        raise InsufficientInstances(f"asked for {k} shots from {len(pool)} instances")
    rng = random.Random(seed)
    if not balanced:
        return FewShotSample(seed, [i.id for i in rng.sample(pool, k)])
    classes = VeracityLabel.ordered()
    if k % len(classes):
        raise TrainingError("balanced shots must be divisible by the number of classes")
    per_class = k // len(classes)
    ids: list[str] = []
    for label in classes:
        members = [i for i in pool if i.label == label]
        if len(members) < per_class:
            raise InsufficientInstances(f"class {label.value}: need {per_class}, have {len(members)}")
        ids.extend(i.id for i in rng.sample(members, per_class))
    return FewShotSample(seed, ids)


def linear_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp to ``base_lr`` over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return base_lr * (total_steps - step) / max(1, total_steps - warmup_steps)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)


def _batches(ids: Sequence[str], batch_size: int, rng: random.Random) -> Iterable[list[str]]:
    """Endless reshuffled passes over the sample."""
    order: list[str] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(ids)
                rng.shuffle(order)
            batch.append(order.pop())
        yield batch


# -- evidence ----------------------------------------------------------------


@torch.no_grad()
def retrieve_evidence(model: RAGModel, claim: str, index: EmbeddingIndex, corpus: Corpus, n: int, query_id: str = "") -> Evidence:
    q = model.retriever.encode_queries([claim])[0]
    hits = index.search(q, n, query_id)
    return Evidence(
        texts=[corpus[c].text for c in hits.chunk_ids],
        embeddings=torch.from_numpy(index.rows(hits.chunk_ids)),
        chunk_ids=hits.chunk_ids,
    )


def article_evidence(instance: Instance) -> Evidence:
    if not instance.article.split():
        raise MissingArticle(f"instance {instance.id} has no article text")
    chunks = instance.article_chunks()
    return Evidence([c.text for c in chunks], torch.zeros(len(chunks), 0), [c.chunk_id for c in chunks])


@torch.no_grad()
def retrieval_recall(
    model: RAGModel, instances: Sequence[Instance], index: EmbeddingIndex, probe: Mapping[str, Sequence[str]], k: int = 5
) -> float:
    """Mean fraction of each instance's planted chunks found in its top-k."""
    fractions = []
    for inst in instances:
        planted = set(probe.get(inst.id, ()))
        if not planted:
            continue
        hits = index.search(model.retriever.encode_queries([inst.claim])[0], k).chunk_ids
        fractions.append(len(planted.intersection(hits)) / len(planted))
    return sum(fractions) / len(fractions) if fractions else float("nan")


# -- joint veracity ----------------------------------------------------------


def veracity_score(model: RAGModel, label: VeracityLabel, claim: str, contexts: Sequence[str], encoding: FiDEncoding | None = None) -> torch.Tensor:
    """Length-normalized ``log p_L(verbalizer | x, D_N)``; eos counts toward the length."""
    per_token, total = model.reader.lm_logprob(VERBALIZERS[label], claim, contexts, encoding)
    return total / per_token.shape[0]


def veracity_scores(model: RAGModel, claim: str, contexts: Sequence[str], encoding: FiDEncoding | None = None) -> torch.Tensor:
    enc = encoding or model.reader.encode_fid(claim, contexts)
    return torch.stack([veracity_score(model, label, claim, contexts, enc) for label in VeracityLabel.ordered()])


def predict_veracity(scores: Sequence[float] | torch.Tensor) -> VeracityLabel:
    """Top-scoring class; ties resolve in the order false < mixture < true."""
    values = [float(s) for s in scores]
    best = max(range(len(values)), key=lambda i: (values[i], -i))
    return VeracityLabel.ordered()[best]


def veracity_ce(beta: torch.Tensor, label: VeracityLabel) -> torch.Tensor:
    """Cross-entropy of ``softmax(beta)`` against the gold class."""
    gold = torch.tensor([VeracityLabel.ordered().index(VeracityLabel(label))])
    return F.cross_entropy(beta[None], gold)


def joint_loss(
    model: RAGModel, instance: Instance, evidence: Evidence, config: TrainConfig
) -> tuple[torch.Tensor, dict[str, float]]:
    """``total_loss`` plus cross-entropy of softmax over the three class scores."""
    if instance.label is None:
        raise MissingLabel(f"instance {instance.id} has no veracity label")
    total, breakdown = total_loss(model, instance, evidence, config.losses)
    ce = veracity_ce(veracity_scores(model, instance.claim, evidence.texts), instance.label)
    breakdown["veracity_ce"] = float(ce.detach())
    return total + config.veracity_weight * ce, breakdown


# -- loops -------------------------------------------------------------------


def warmup_finetune(
    model: RAGModel, instances: Sequence[Instance], steps: int, lr: float = 4e-5, batch_size: int = 8, seed: int = 0, warmup_steps: int = 5
) -> list[float]:
    """Teach the LM to read articles: base LM loss with article chunks as contexts.

    Only reader tensors are updated. Returns the per-step batch loss.
    """
    if steps <= 0:
        return []
    for inst in instances:
        if not inst.article.split():
            raise MissingArticle(f"instance {inst.id} has no article text")
    by_id = {i.id: i for i in instances}
    optimizer = torch.optim.Adam(model.lm_parameters(), lr=lr)
    batches = _batches(sorted(by_id), batch_size, random.Random(seed))
    history = []
    for step in range(steps):
        _set_lr(optimizer, linear_schedule(step, steps, min(warmup_steps, steps - 1), lr))
        optimizer.zero_grad(set_to_none=True)
        batch = [by_id[i] for i in next(batches)]
        loss = sum(
            -model.reader.lm_logprob(inst.justification, inst.claim, [c.text for c in inst.article_chunks()])[0].mean()
            for inst in batch
        ) / len(batch)
        loss.backward()
        optimizer.step()
        history.append(float(loss.detach()))
    return history


@dataclass
class TrainResult:
    model: RAGModel
    sample: FewShotSample
    log: list[dict]
    warmup_losses: list[float]


def train(
    config: TrainConfig,
    dataset: Sequence[Instance],
    corpus: Corpus,
    index: EmbeddingIndex,
    model: RAGModel,
    out_dir: str | Path | None = None,
    probe: Mapping[str, Sequence[str]] | None = None,
) -> TrainResult:
    """Fine-tune ``model`` in place on a few-shot draw from ``dataset``.

    Each step re-retrieves top-N evidence with the current query encoder
    against the frozen index. With ``out_dir`` the checkpoint and the JSON
    Lines loss log are written there.
    """
    torch.manual_seed(config.seed)
    sample = sample_few_shot(dataset, config.shots, config.seed, config.balanced_shots)
    by_id = {i.id: i for i in dataset}
    shots = [by_id[i] for i in sample.ids]
    model.train()

    warmup_losses: list[float] = []
    lm_distill = any(n in config.losses.active for n in ("lm_g", "lm_c"))
    if config.mode == "retrieval" and lm_distill and config.warmup_finetune_steps > 0:
        warmup_losses = warmup_finetune(
            model, shots, config.warmup_finetune_steps, config.lr, config.batch_size, config.seed, config.warmup_steps
        )

    trains_retriever = config.mode == "retrieval" and any(n not in LM_LOSSES for n in config.losses.active)
    groups = [{"params": model.lm_parameters()}]
    if trains_retriever:
        ret_lr = config.lr if config.retriever_lr is None else config.retriever_lr
        groups.append({"params": model.query_parameters(), "lr_scale": ret_lr / config.lr if config.lr else 0.0})
    optimizer = torch.optim.Adam(groups, lr=config.lr)
    batches = _batches(sorted(sample.ids), config.batch_size, random.Random(config.seed))

    log: list[dict] = []
    for step in range(config.steps):
        lr = linear_schedule(step, config.steps, config.warmup_steps, config.lr)
        _set_lr(optimizer, lr)
        optimizer.zero_grad(set_to_none=True)
        row: dict = {"step": step, "lr": lr}
        if probe:
            row[f"probe_recall@{config.probe_k}"] = retrieval_recall(model, shots, index, probe, config.probe_k)
        batch = [by_id[i] for i in next(batches)]
        loss_sum = 0.0
        sums: dict[str, float] = {}
        for inst in batch:
            if config.mode == "article_input":
                evidence = article_evidence(inst)
            else:
                evidence = retrieve_evidence(model, inst.claim, index, corpus, config.top_n, inst.id)
            if config.joint_veracity:
                loss, breakdown = joint_loss(model, inst, evidence, config)
            else:
                loss, breakdown = total_loss(model, inst, evidence, config.losses)
            (loss / len(batch)).backward()
            loss_sum += float(loss.detach())
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
        optimizer.step()
        row["loss"] = loss_sum / len(batch)
        row.update({k: v / len(batch) for k, v in sums.items()})
        log.append(row)
        logger.debug("step %d lr %.3g loss %.4f", step, lr, row["loss"])

    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "checkpoint.safetensors", extra={"train_config": config.to_dict(), "sample_ids": sample.ids})
        write_log(out / "train_log.jsonl", log)
    return TrainResult(model, sample, log, warmup_losses)


def write_log(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


# -- inference ---------------------------------------------------------------


@torch.no_grad()
def generate_predictions(
    model: RAGModel,
    instances: Sequence[Instance],
    index: EmbeddingIndex | None,
    corpus: Corpus | None,
    top_n: int = 20,
    context: str = "retrieved",
    with_veracity: bool = False,
    max_len: int = 160,
    beam_size: int = 1,
) -> list[dict]:
    """One prediction row per instance: id, generated justification, optional label."""
    model.eval()
    rows = []
    for inst in instances:
        if context == "article":
            evidence = article_evidence(inst)
        elif context == "retrieved":
            evidence = retrieve_evidence(model, inst.claim, index, corpus, top_n, inst.id)
        else:
            raise ValueError(f"unknown context source {context!r}")
        row = {"id": inst.id, "justification": model.reader.generate(inst.claim, evidence.texts, max_len, beam_size)}
        if with_veracity:
            row["label"] = predict_veracity(veracity_scores(model, inst.claim, evidence.texts)).value
        rows.append(row)
    return rows
