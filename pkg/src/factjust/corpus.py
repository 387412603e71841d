"""Dataset ingestion: justification extraction, 100-word chunking, corpus assembly."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

DEFAULT_CUE_PHRASES = ("Our ruling", "Our rating")
CHUNK_SIZE = 100


class CorpusError(ValueError):
    pass


class EmptyDocument(CorpusError):
    pass


class UnknownLabel(CorpusError):
    pass


class MalformedRecord(CorpusError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems)
        super().__init__(f"malformed input ({len(problems)} lines): {lines}")


class VeracityLabel(str, Enum):
    FALSE = "false"
    MIXTURE = "mixture"
    TRUE = "true"

    @classmethod
    def ordered(cls) -> list["VeracityLabel"]:
        # also the tie-break order for prediction
        return [cls.FALSE, cls.MIXTURE, cls.TRUE]


DEFAULT_LABEL_MAP: dict[str, VeracityLabel] = {
    "false": VeracityLabel.FALSE,
    "mixture": VeracityLabel.MIXTURE,
    "true": VeracityLabel.TRUE,
    # integer-coded labels as distributed with WatClaimCheck
    "0": VeracityLabel.FALSE,
    "1": VeracityLabel.MIXTURE,
    "2": VeracityLabel.TRUE,
}


@dataclass
class ReferenceDoc:
    doc_id: str
    text: str


@dataclass
class RawRecord:
    id: str
    claim: str
    article: str
    label: str
    reference_docs: list[ReferenceDoc] = field(default_factory=list)
    split: str | None = None

    @classmethod
    def from_dict(cls, obj: Mapping) -> "RawRecord":
        for key in ("id", "claim", "article", "label"):
            if key not in obj:
                raise KeyError(key)
        if not str(obj["claim"]).strip():
            raise ValueError("empty claim")
        docs = [ReferenceDoc(str(d["doc_id"]), str(d["text"])) for d in obj.get("reference_docs", [])]
        return cls(
            id=str(obj["id"]),
            claim=str(obj["claim"]),
            article=str(obj["article"]),
            label=str(obj["label"]),
            reference_docs=docs,
            split=obj.get("split"),
        )


@dataclass
class Instance:
    id: str
    claim: str
    justification: str
    article: str
    label: VeracityLabel
    reference_doc_ids: list[str] = field(default_factory=list)
    split: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["label"] = self.label.value
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Instance":
        return cls(
            id=str(obj["id"]),
            claim=obj["claim"],
            justification=obj["justification"],
            article=obj.get("article", ""),
            label=VeracityLabel(obj["label"]),
            reference_doc_ids=list(obj.get("reference_doc_ids", [])),
            split=obj.get("split"),
        )

    def article_chunks(self, chunk_size: int = CHUNK_SIZE) -> list["Chunk"]:
        return chunk_document(self.article, chunk_size, source_doc_id=f"{self.id}:article")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    source_doc_id: str
    position: int
    text: str

    @property
    def words(self) -> list[str]:
        return self.text.split()


@dataclass
class Corpus:
    chunks: list[Chunk] = field(default_factory=list)
    doc_index: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._by_id = {c.chunk_id: c for c in self.chunks}
        if len(self._by_id) != len(self.chunks):
            raise CorpusError("duplicate chunk_id in corpus")

    def __len__(self) -> int:
        return len(self.chunks)

    def __getitem__(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]

    def add_document(self, doc_id: str, text: str) -> None:
        if doc_id in self.doc_index:
            return
        chunks = chunk_document(text, source_doc_id=doc_id)
        for c in chunks:
            if c.chunk_id in self._by_id:
                raise CorpusError(f"duplicate chunk_id {c.chunk_id}")
            self._by_id[c.chunk_id] = c
        self.chunks.extend(chunks)
        self.doc_index[doc_id] = [c.chunk_id for c in chunks]

    @classmethod
    def from_chunks(cls, chunks: Iterable[Chunk]) -> "Corpus":
        chunks = list(chunks)
        doc_index: dict[str, list[tuple[int, str]]] = {}
        for c in chunks:
            doc_index.setdefault(c.source_doc_id, []).append((c.position, c.chunk_id))
        return cls(chunks, {k: [cid for _, cid in sorted(v)] for k, v in doc_index.items()})


def chunk_document(text: str | Sequence[str], chunk_size: int = CHUNK_SIZE, source_doc_id: str = "doc") -> list[Chunk]:
    """Split ``text`` into disjoint chunks of ``chunk_size`` whitespace words.

    Every chunk but the last has exactly ``chunk_size`` words, so the count is
    ``ceil(len(words) / chunk_size)``. Chunk ids are ``"{source_doc_id}#{position}"``.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    words = text.split() if isinstance(text, str) else list(text)
    if not words:
        raise EmptyDocument(f"document {source_doc_id!r} has no words")
    return [
        Chunk(
            chunk_id=f"{source_doc_id}#{pos}",
            source_doc_id=source_doc_id,
            position=pos,
            text=" ".join(words[start : start + chunk_size]),
        )
        for pos, start in enumerate(range(0, len(words), chunk_size))
    ]


def expected_chunk_count(n_words: int, chunk_size: int = CHUNK_SIZE) -> int:
    return math.ceil(n_words / chunk_size)


def extract_justification(
    article: str, cue_phrases: Sequence[str] = DEFAULT_CUE_PHRASES
) -> tuple[str, str] | None:
    """Return ``(justification, remainder)`` or None when no cue phrase occurs.

    Matching is case-insensitive on the exact phrase and the earliest
    occurrence of any cue wins. The justification keeps the cue and runs to
    the end of the article; the remainder is everything before the cue with
    trailing whitespace removed.
    """
    pattern = re.compile("|".join(re.escape(c) for c in cue_phrases), re.IGNORECASE)
    m = pattern.search(article)
    if m is None:
        return None
    return article[m.start() :], article[: m.start()].rstrip()


@dataclass
class BuildConfig:
    cue_phrases: tuple[str, ...] = DEFAULT_CUE_PHRASES
    include_dropped_refs: bool = True
    chunk_size: int = CHUNK_SIZE


def build_dataset(
    records: Sequence[RawRecord],
    label_map: Mapping[str, VeracityLabel] | None = None,
    config: BuildConfig | None = None,
) -> tuple[list[Instance], list[Instance], Corpus]:
    """Turn raw claim records into train/test instances and one mixed chunk corpus.

    Records whose article has no cue phrase are dropped. Their reference
    chunks still enter the corpus unless ``include_dropped_refs`` is off.
    """
    label_map = DEFAULT_LABEL_MAP if label_map is None else label_map
    config = config or BuildConfig()
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise CorpusError("record ids must be unique")

    train: list[Instance] = []
    test: list[Instance] = []
    corpus = Corpus()
    for rec in records:
        key = rec.label if rec.label in label_map else rec.label.strip().lower()
        if key not in label_map:
            raise UnknownLabel(f"record {rec.id}: no mapping for label {rec.label!r}")
        if rec.split not in ("train", "test"):
            raise CorpusError(f"record {rec.id}: split must be 'train' or 'test', got {rec.split!r}")
        extracted = extract_justification(rec.article, config.cue_phrases)
        if extracted is not None or config.include_dropped_refs:
            for doc in rec.reference_docs:
                if not doc.text.split():
                    logger.warning("skipping empty reference doc %s", doc.doc_id)
                    continue
                corpus.add_document(doc.doc_id, doc.text)
        if extracted is None:
            continue
        justification, remainder = extracted
        inst = Instance(
            id=rec.id,
            claim=rec.claim,
            justification=justification,
            article=remainder,
            label=label_map[key],
            reference_doc_ids=[d.doc_id for d in rec.reference_docs],
            split=rec.split,
        )
        (train if rec.split == "train" else test).append(inst)
    return train, test, corpus


def read_raw_records(path: str | Path) -> list[RawRecord]:
    records: list[RawRecord] = []
    problems: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(RawRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                problems.append((lineno, f"{type(exc).__name__}: {exc}"))
    if problems:
        raise MalformedRecord(problems)
    return records


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    tmp.replace(path)


def write_instances(path: str | Path, instances: Iterable[Instance]) -> None:
    _write_jsonl(Path(path), (i.to_dict() for i in instances))


def read_instances(path: str | Path, split: str | None = None) -> list[Instance]:
    with open(path, encoding="utf-8") as fh:
        out = [Instance.from_dict(json.loads(line)) for line in fh if line.strip()]
    if split is not None:
        out = [i for i in out if i.split == split]
    return out


def write_corpus(path: str | Path, corpus: Corpus) -> None:
    _write_jsonl(
        Path(path),
        ({"chunk_id": c.chunk_id, "source_doc_id": c.source_doc_id, "position": c.position, "text": c.text} for c in corpus.chunks),
    )


def read_corpus(path: str | Path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        chunks = [
            Chunk(str(o["chunk_id"]), str(o["source_doc_id"]), int(o["position"]), o["text"])
            for o in map(json.loads, filter(str.strip, fh))
        ]
    return Corpus.from_chunks(chunks)
