"""Training losses: LM, perplexity distillation and the four article distillation losses.

Teacher quantities (the article-conditioned branch, LM posteriors over
documents, article-chunk attention targets) are computed without gradient
by default. Every loss accepts a precomputed ``teacher`` so the targets can
be frozen from outside, which is how the finite-difference checks hold them
fixed while perturbing parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .corpus import Chunk, Instance
from .generator import FiDEncoding, TeacherForced
from .modeling import RAGModel
from .retriever import EmptyArticle, article_embedding

LOSS_NAMES = ("base_lm", "perplexity_distill", "ret_g", "lm_g", "ret_c", "lm_c")
RETRIEVER_LOSSES = ("perplexity_distill", "ret_g", "ret_c")
LM_LOSSES = ("base_lm", "lm_g", "lm_c")


class LossConfigError(ValueError):
    pass


class InactiveLossRequested(LossConfigError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class LossConfig:
    active: tuple[str, ...] = ("base_lm",)
    weights: dict[str, float] = field(default_factory=dict)
    stop_gradient: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.active = tuple(self.active)
        if not self.active:
            raise LossConfigError("at least one loss must be active")
        unknown = [n for n in (*self.active, *self.stop_gradient) if n not in LOSS_NAMES]
        if unknown:
            raise LossConfigError(f"unknown loss names: {unknown}")
        inactive = [n for n in self.weights if n not in self.active]
        if inactive:
            raise InactiveLossRequested(f"weights given for inactive losses: {inactive}")

    @classmethod
    def combination(cls, retriever: str | None, lm: str | None, **kwargs) -> "LossConfig":
        """Base LM + perplexity distillation plus ``ret_{retriever}`` and ``lm_{lm}``."""
        active = ["base_lm", "perplexity_distill"]
        if retriever:
            active.append(f"ret_{retriever}")
        if lm:
            active.append(f"lm_{lm}")
        return cls(tuple(active), **kwargs)

    @classmethod
    def parse(cls, spec: str, **kwargs) -> "LossConfig":
        return cls(tuple(n.strip() for n in spec.split(",") if n.strip()), **kwargs)

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 1.0))

    def stops(self, name: str) -> bool:
        return self.stop_gradient.get(name, True)

    @property
    def needs_article(self) -> bool:
        return any(n in self.active for n in ("ret_g", "lm_g", "ret_c", "lm_c"))


@dataclass
class Evidence:
    """The retrieved set D_N of one instance: texts plus their frozen embeddings."""

    texts: list[str]
    embeddings: torch.Tensor  # [N, d]
    chunk_ids: list[str] | None = None

    def __len__(self) -> int:
        return len(self.texts)


@dataclass
class ChunkAssignment:
    """For each retrieved doc, the 0-based index of its most similar article chunk."""

    chunk_index: list[int]
    scores: list[float]


def _texts(chunks: Sequence[Chunk | str]) -> list[str]:
    return [c.text if isinstance(c, Chunk) else c for c in chunks]


def _doc_matrix(embeddings: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # document embeddings are index rows: never a gradient path
    return embeddings.detach().to(like.dtype)


def kl_terms(target: torch.Tensor, log_pred: torch.Tensor) -> torch.Tensor:
    """Elementwise ``q * (log q - log p)`` with the 0 log 0 = 0 convention."""
    log_q = torch.where(target > 0, target.clamp_min(1e-300).log(), torch.zeros_like(target))
    return target * (log_q - log_pred)


# -- formula cores: tensors in, scalar out --------------------------------------


def perplexity_distillation_value(lm_loglik: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """KL(softmax(lm_loglik) || softmax(scores)) over the N documents."""
    q = torch.softmax(lm_loglik.double(), dim=0)
    return kl_terms(q, F.log_softmax(scores.double(), dim=0)).sum()


def article_retrieval_value(article_emb: torch.Tensor, doc_emb: torch.Tensor) -> torch.Tensor:
    """``(1 / (N d)) sum_j ||article_emb - doc_emb[j]||^2``."""
    if doc_emb.ndim != 2 or doc_emb.shape[1] != article_emb.shape[0]:
        raise DimensionMismatch(f"article embedding dim {article_emb.shape[0]} vs doc embeddings {tuple(doc_emb.shape)}")
    return ((article_emb[None, :] - doc_emb) ** 2).sum(1).mean() / article_emb.shape[0]


def article_generation_value(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Squared difference of two ``[|y|, V]`` distribution sequences, averaged over both axes."""
    return ((student - teacher) ** 2).mean()


def chunk_retrieval_value(q_assigned: torch.Tensor, log_p_assigned: torch.Tensor) -> torch.Tensor:
    """``sum_j q_j log(q_j / p_j)`` where both entries belong to doc j's assigned chunk."""
    return kl_terms(q_assigned.double(), log_p_assigned.double()).sum()


def chunk_generation_value(target: torch.Tensor, doc_scores: torch.Tensor) -> torch.Tensor:
    """KL(target || softmax(doc_scores)) over the N documents."""
    return kl_terms(target.double(), F.log_softmax(doc_scores.double(), dim=0)).sum()


def retrieval_scores(model: RAGModel, queries: Sequence[str], doc_embeddings: torch.Tensor) -> torch.Tensor:
    """``s(q, d) = E_c(q)^T E_d(d)`` for every (query, doc) pair: ``[Q, N]``."""
    q = model.retriever.encode_queries(list(queries))
    return q @ _doc_matrix(doc_embeddings, q).t()


# -- base objective ----------------------------------------------------------


def base_lm_loss(
    model: RAGModel, target, claim: str, contexts: Sequence[str], forward: TeacherForced | None = None
) -> torch.Tensor:
    """Mean negative log-likelihood per target token (eos included)."""
    fwd = forward or model.reader.teacher_forced(target, claim, contexts)
    return -fwd.token_logprobs().mean()


def perplexity_distillation_targets(
    model: RAGModel, target, claim: str, contexts: Sequence[str], encoding: FiDEncoding | None = None, stop_gradient: bool = True
) -> torch.Tensor:
    """``log p_L(y | x, d_j)`` with each retrieved doc alone: ``[N]``."""
    with torch.set_grad_enabled(torch.is_grad_enabled() and not stop_gradient):
        enc = encoding or model.reader.encode_fid(claim, contexts)
        if stop_gradient:
            enc = FiDEncoding(enc.states.detach(), enc.lengths)
        return model.reader.context_logprobs([target], enc)[0]


def perplexity_distillation_loss(
    model: RAGModel,
    target,
    claim: str,
    evidence: Evidence,
    encoding: FiDEncoding | None = None,
    teacher: torch.Tensor | None = None,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """KL(q || p_retr) with q = softmax_j log p_L(y|x,d_j) and p_retr = softmax_j s(x, d_j)."""
    if teacher is None:
        teacher = perplexity_distillation_targets(model, target, claim, evidence.texts, encoding, stop_gradient)
    return perplexity_distillation_value(teacher, retrieval_scores(model, [claim], evidence.embeddings)[0])


# -- article-level -----------------------------------------------------------


def article_retrieval_loss(model: RAGModel, article_chunks: Sequence[Chunk | str], doc_embeddings: torch.Tensor) -> torch.Tensor:
    """MSE between the mean article-chunk query embedding and each retrieved doc
    embedding, normalized by N and the embedding dimension."""
    z = article_embedding(_texts(article_chunks), model.retriever).double()
    return article_retrieval_value(z, _doc_matrix(doc_embeddings, z))


def article_generation_targets(model: RAGModel, target, claim: str, article_chunks: Sequence[Chunk | str], stop_gradient: bool = True) -> torch.Tensor:
    with torch.set_grad_enabled(torch.is_grad_enabled() and not stop_gradient):
        return model.reader.token_distributions(target, claim, _texts(article_chunks))


def article_generation_loss(
    model: RAGModel,
    target,
    claim: str,
    contexts: Sequence[str],
    article_chunks: Sequence[Chunk | str],
    forward: TeacherForced | None = None,
    teacher: torch.Tensor | None = None,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """Squared difference between retrieval-conditioned and article-conditioned
    token distributions, averaged over target positions and vocabulary."""
    fwd = forward or model.reader.teacher_forced(target, claim, contexts)
    student = fwd.distributions()
    if teacher is None:
        teacher = article_generation_targets(model, target, claim, article_chunks, stop_gradient)
    return article_generation_value(student, teacher)


# -- chunk-level -------------------------------------------------------------


@torch.no_grad()
def chunk_assign(model: RAGModel, article_chunks: Sequence[Chunk | str], doc_embeddings: torch.Tensor) -> ChunkAssignment:
    """Most similar article chunk per retrieved doc; ties go to the lowest chunk index."""
    if not article_chunks:
        raise EmptyArticle("article has no chunks")
    s = retrieval_scores(model, _texts(article_chunks), doc_embeddings)  # [M, N]
    best = s.argmax(dim=0)  # first maximal index on ties
    return ChunkAssignment(best.tolist(), s.gather(0, best[None])[0].tolist())


def chunk_retrieval_targets(
    model: RAGModel,
    assignment: ChunkAssignment,
    claim: str,
    contexts: Sequence[str],
    article_chunks: Sequence[Chunk | str],
    encoding: FiDEncoding | None = None,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """``q_L(z_{j*} | x, d_j)`` for every retrieved doc j: ``[N]``."""
    chunk_texts = _texts(article_chunks)
    used = sorted(set(assignment.chunk_index))
    with torch.set_grad_enabled(torch.is_grad_enabled() and not stop_gradient):
        enc = encoding or model.reader.encode_fid(claim, contexts)
        if stop_gradient:
            enc = FiDEncoding(enc.states.detach(), enc.lengths)
        loglik = model.reader.context_logprobs([chunk_texts[i] for i in used], enc)  # [U, N]
        posterior = torch.softmax(loglik, dim=1)
        row = {i: r for r, i in enumerate(used)}
        return torch.stack([posterior[row[i], j] for j, i in enumerate(assignment.chunk_index)])


def chunk_retrieval_loss(
    model: RAGModel,
    assignment: ChunkAssignment,
    claim: str,
    evidence: Evidence,
    article_chunks: Sequence[Chunk | str],
    encoding: FiDEncoding | None = None,
    teacher: torch.Tensor | None = None,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """``sum_j q_L(z_{j*}|x,d_j) log(q_L(z_{j*}|x,d_j) / p_R(d_j|z_{j*}))``, summed
    literally over j even though each term comes from its own chunk's distribution."""
    if teacher is None:
        teacher = chunk_retrieval_targets(model, assignment, claim, evidence.texts, article_chunks, encoding, stop_gradient)
    log_p = F.log_softmax(retrieval_scores(model, _texts(article_chunks), evidence.embeddings).double(), dim=1)  # [M, N]
    j = torch.arange(len(evidence))
    return chunk_retrieval_value(teacher, log_p[torch.tensor(assignment.chunk_index), j])


def chunk_generation_targets(
    model: RAGModel,
    target,
    claim: str,
    article_chunks: Sequence[Chunk | str],
    assignment: ChunkAssignment,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """``p'(z_{j*})``: softmax over docs of the attention distribution of their assigned chunks."""
    with torch.set_grad_enabled(torch.is_grad_enabled() and not stop_gradient):
        p_chunks = torch.softmax(model.reader.cross_attention_doc_scores(target, claim, _texts(article_chunks)), dim=0)
        return torch.softmax(p_chunks[torch.tensor(assignment.chunk_index)], dim=0)


def chunk_generation_loss(
    model: RAGModel,
    target,
    claim: str,
    contexts: Sequence[str],
    article_chunks: Sequence[Chunk | str],
    assignment: ChunkAssignment,
    forward: TeacherForced | None = None,
    teacher: torch.Tensor | None = None,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """KL(p' || p) between assigned-chunk attention targets and doc attention."""
    fwd = forward or model.reader.teacher_forced(target, claim, contexts)
    if teacher is None:
        teacher = chunk_generation_targets(model, target, claim, article_chunks, assignment, stop_gradient)
    return chunk_generation_value(teacher, fwd.doc_scores())


# -- combination -------------------------------------------------------------


def total_loss(
    model: RAGModel,
    instance: Instance,
    evidence: Evidence,
    config: LossConfig,
    article_chunks: Sequence[Chunk | str] | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the active losses and a per-loss breakdown (unweighted values)."""
    reader = model.reader
    target, claim, contexts = instance.justification, instance.claim, evidence.texts
    if config.needs_article:
        article_chunks = article_chunks if article_chunks is not None else instance.article_chunks()
    needs_encoding = any(n in config.active for n in ("base_lm", "perplexity_distill", "lm_g", "ret_c", "lm_c"))
    enc = reader.encode_fid(claim, contexts) if needs_encoding else None
    needs_forward = any(n in config.active for n in ("base_lm", "lm_g", "lm_c"))
    fwd = reader.teacher_forced(target, claim, contexts, enc) if needs_forward else None
    assignment = None
    if "ret_c" in config.active or "lm_c" in config.active:
        assignment = chunk_assign(model, article_chunks, evidence.embeddings)

    values: dict[str, torch.Tensor] = {}
    for name in config.active:
        stop = config.stops(name)
        if name == "base_lm":
            values[name] = base_lm_loss(model, target, claim, contexts, fwd)
        elif name == "perplexity_distill":
            values[name] = perplexity_distillation_loss(model, target, claim, evidence, enc, stop_gradient=stop)
        elif name == "ret_g":
            values[name] = article_retrieval_loss(model, article_chunks, evidence.embeddings)
        elif name == "lm_g":
            values[name] = article_generation_loss(model, target, claim, contexts, article_chunks, fwd, stop_gradient=stop)
        elif name == "ret_c":
            values[name] = chunk_retrieval_loss(model, assignment, claim, evidence, article_chunks, enc, stop_gradient=stop)
        elif name == "lm_c":
            values[name] = chunk_generation_loss(model, target, claim, contexts, article_chunks, assignment, fwd, stop_gradient=stop)
    total = sum(config.weight(n) * v for n, v in values.items())
    return total, {n: float(v.detach()) for n, v in values.items()}


def weighted_sum(breakdown: Mapping[str, float], config: LossConfig) -> float:
    return sum(config.weight(n) * v for n, v in breakdown.items() if n in config.active)
