"""Dense dual-encoder retrieval, the exact inner-product index, and a BM25 baseline."""

from __future__ import annotations

import copy
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import Chunk, Corpus
from .layers import EncoderLayer, sinusoidal_positions
from .tokenizer import EmptyText, Vocab

INDEX_FORMAT_VERSION = 1
QUERY_MAX_LEN = 512


class RetrievalError(ValueError):
    pass


class EmptyCorpus(RetrievalError):
    pass


class NTooLarge(RetrievalError):
    pass


class EmptyQuery(RetrievalError):
    pass


class EmptyArticle(RetrievalError):
    pass


class TextEncoder(nn.Module):
    """Token embedding, a small transformer encoder and mean pooling over real tokens."""

    def __init__(self, vocab_size: int, dim: int = 64, n_layers: int = 2, n_heads: int = 2, d_ff: int = 128, max_len: int = QUERY_MAX_LEN):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=0)
        nn.init.normal_(self.embed.weight, std=dim**-0.5)
        with torch.no_grad():
            self.embed.weight[0].zero_()
        self.register_buffer("pos", sinusoidal_positions(max_len, dim), persistent=False)
        self.layers = nn.ModuleList(EncoderLayer(dim, n_heads, d_ff) for _ in range(n_layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids) * math.sqrt(self.dim) + self.pos[: ids.shape[1]].to(self.embed.weight.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        x = self.norm(x)
        m = mask.to(x.dtype)[..., None]
        # scaled so that dot products stay O(1) at init
        return (x * m).sum(1) / m.sum(1) / self.dim**0.25


def tokenize_batch(vocab: Vocab, texts: Sequence[str], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    seqs = []
    for t in texts:
        ids = vocab.encode(t, max_len=max_len)
        if not ids:
            raise EmptyText(f"text has no tokens: {t!r}")
        seqs.append(ids)
    width = max(len(s) for s in seqs)
    ids = torch.zeros(len(seqs), width, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s)
    return ids, ids != vocab.pad_id


class Retriever(nn.Module):
    """Query and document encoders of one architecture; the document side is frozen."""

    def __init__(self, vocab: Vocab, dim: int = 64, n_layers: int = 2, n_heads: int = 2, d_ff: int = 128, max_len: int = QUERY_MAX_LEN):
        super().__init__()
        self.vocab = vocab
        self.doc_encoder = TextEncoder(len(vocab), dim, n_layers, n_heads, d_ff, max_len)
        # both sides start from the same weights, as with a shared pretrained checkpoint
        self.query_encoder = copy.deepcopy(self.doc_encoder)
        self.doc_encoder.requires_grad_(False)
        self.doc_encoder.eval()

    @property
    def dim(self) -> int:
        return self.query_encoder.dim

    def train(self, mode: bool = True) -> "Retriever":
        super().train(mode)
        self.doc_encoder.eval()
        return self

    def encode_queries(self, texts: Sequence[str]) -> torch.Tensor:
        ids, mask = tokenize_batch(self.vocab, texts, self.query_encoder.max_len)
        return self.query_encoder(ids, mask)

    @torch.no_grad()
    def encode_documents(self, texts: Sequence[str]) -> torch.Tensor:
        ids, mask = tokenize_batch(self.vocab, texts, self.doc_encoder.max_len)
        return self.doc_encoder(ids, mask)


def encode_query(text: str, retriever: Retriever) -> torch.Tensor:
    return retriever.encode_queries([text])[0]


def encode_document(text: str, retriever: Retriever) -> torch.Tensor:
    return retriever.encode_documents([text])[0]


def article_embedding(article_chunks: Sequence[Chunk | str], retriever: Retriever) -> torch.Tensor:
    """Mean of the query-encoder embeddings of an article's chunks."""
    if not article_chunks:
        raise EmptyArticle("article has no chunks")
    texts = [c.text if isinstance(c, Chunk) else c for c in article_chunks]
    return retriever.encode_queries(texts).mean(0)


@dataclass
class RetrievedSet:
    query_id: str
    chunk_ids: list[str]
    scores: list[float]

    @property
    def n(self) -> int:
        return len(self.chunk_ids)

    def items(self) -> list[tuple[str, float]]:
        return list(zip(self.chunk_ids, self.scores))


def _rank(scores: np.ndarray, tie_rank: np.ndarray, n: int) -> np.ndarray:
    # primary key: score descending; secondary: chunk_id ascending
    return np.lexsort((tie_rank, -scores))[:n]


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray  # [count, dim] float32
    chunk_ids: list[str]
    _tie_rank: np.ndarray = field(init=False, repr=False)
    _row: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.chunk_ids):
            raise RetrievalError("embedding rows must match chunk ids")
        order = sorted(range(len(self.chunk_ids)), key=self.chunk_ids.__getitem__)
        self._tie_rank = np.empty(len(order), dtype=np.int64)
        self._tie_rank[order] = np.arange(len(order))
        self._row = {cid: i for i, cid in enumerate(self.chunk_ids)}

    def __len__(self) -> int:
        return len(self.chunk_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def rows(self, chunk_ids: Sequence[str]) -> np.ndarray:
        return self.embeddings[[self._row[c] for c in chunk_ids]]

    def scores(self, query: np.ndarray, block: int = 65536) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise RetrievalError(f"query dimension {q.shape} does not match index dimension {self.dim}")
        out = np.empty(len(self), dtype=np.float64)
        for start in range(0, len(self), block):
            out[start : start + block] = self.embeddings[start : start + block].astype(np.float64) @ q
        return out

    def search(self, query: np.ndarray | torch.Tensor, n: int, query_id: str = "") -> RetrievedSet:
        if isinstance(query, torch.Tensor):
            query = query.detach().cpu().double().numpy()
        if n < 1:
            raise RetrievalError("N must be at least 1")
        if n > len(self):
            raise NTooLarge(f"N={n} exceeds index size {len(self)}")
        s = self.scores(query)
        top = _rank(s, self._tie_rank, n)
        return RetrievedSet(query_id, [self.chunk_ids[i] for i in top], [float(s[i]) for i in top])

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "version": INDEX_FORMAT_VERSION,
            "dim": self.dim,
            "count": len(self),
            "dtype": "f32",
            "tie_break": "chunk_id_asc",
        }
        _atomic_write(d / "embeddings.bin", self.embeddings.astype("<f4").tobytes(order="C"))
        _atomic_write(d / "ids.txt", ("\n".join(self.chunk_ids) + "\n").encode("utf-8"))
        _atomic_write(d / "meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, directory: str | Path) -> "EmbeddingIndex":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        if meta.get("version") != INDEX_FORMAT_VERSION or meta.get("dtype") != "f32":
            raise RetrievalError(f"unsupported index format: {meta}")
        ids = [line for line in (d / "ids.txt").read_text(encoding="utf-8").split("\n") if line]
        emb = np.fromfile(d / "embeddings.bin", dtype="<f4")
        if len(ids) != meta["count"] or emb.size != meta["count"] * meta["dim"]:
            raise RetrievalError(f"{d}: index files disagree with meta.json")
        return cls(emb.reshape(meta["count"], meta["dim"]).astype(np.float32), ids)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def build_index(corpus: Corpus, retriever: Retriever, batch_size: int = 64) -> EmbeddingIndex:
    """Embed every corpus chunk with the frozen document encoder."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    rows = []
    for start in range(0, len(corpus), batch_size):
        batch = corpus.chunks[start : start + batch_size]
        rows.append(retriever.encode_documents([c.text for c in batch]).float().numpy())
    return EmbeddingIndex(np.concatenate(rows), [c.chunk_id for c in corpus.chunks])


def retrieve(query_embedding: np.ndarray | torch.Tensor, index: EmbeddingIndex, n: int, query_id: str = "") -> RetrievedSet:
    return index.search(query_embedding, n, query_id)


_BM25_TOKEN = re.compile(r"\w+")


def bm25_tokens(text: str) -> list[str]:
    return _BM25_TOKEN.findall(text.lower())


class BM25:
    """Okapi BM25 over corpus chunks, idf = ln(1 + (n - df + 0.5) / (df + 0.5))."""

    def __init__(self, corpus: Corpus, k1: float = 0.9, b: float = 0.4):
        if len(corpus) == 0:
            raise EmptyCorpus("cannot build BM25 over an empty corpus")
        self.k1 = k1
        self.b = b
        self.chunk_ids = [c.chunk_id for c in corpus.chunks]
        self._text = {c.chunk_id: c.text for c in corpus.chunks}
        self.doc_len = np.array([len(bm25_tokens(c.text)) for c in corpus.chunks], dtype=np.float64)
        self.avgdl = float(self.doc_len.mean()) or 1.0
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for row, c in enumerate(corpus.chunks):
            for term, tf in Counter(bm25_tokens(c.text)).items():
                self.postings.setdefault(term, []).append((row, tf))
        order = sorted(range(len(self.chunk_ids)), key=self.chunk_ids.__getitem__)
        self._tie_rank = np.empty(len(order), dtype=np.int64)
        self._tie_rank[order] = np.arange(len(order))

    def text(self, chunk_id: str) -> str:
        return self._text[chunk_id]

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = len(self.chunk_ids)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def scores(self, query: str) -> np.ndarray:
        terms = bm25_tokens(query)
        if not terms:
            raise EmptyQuery("query has no terms")
        out = np.zeros(len(self.chunk_ids), dtype=np.float64)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avgdl)
        for term in terms:
            postings = self.postings.get(term)
            if not postings:
                continue
            rows = np.fromiter((r for r, _ in postings), dtype=np.int64, count=len(postings))
            tf = np.fromiter((f for _, f in postings), dtype=np.float64, count=len(postings))
            out[rows] += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm[rows])
        return out

    def retrieve(self, query: str, n: int, query_id: str = "") -> RetrievedSet:
        if n < 1:
            raise RetrievalError("N must be at least 1")
        if n > len(self.chunk_ids):
            raise NTooLarge(f"N={n} exceeds corpus size {len(self.chunk_ids)}")
        s = self.scores(query)
        top = _rank(s, self._tie_rank, n)
        return RetrievedSet(query_id, [self.chunk_ids[i] for i in top], [float(s[i]) for i in top])


def bm25_retrieve(query: str, corpus: Corpus | BM25, n: int, k1: float = 0.9, b: float = 0.4) -> RetrievedSet:
    bm25 = corpus if isinstance(corpus, BM25) else BM25(corpus, k1=k1, b=b)
    return bm25.retrieve(query, n)

