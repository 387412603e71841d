"""Word-level vocabulary shared by the retriever encoders and the reader."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
SPECIALS = (PAD, BOS, EOS, UNK, SEP)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,!?;:%)]}'\"")


class EmptyText(ValueError):
    pass


class UnknownToken(KeyError):
    pass


def words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Lowercased word/punctuation vocabulary with the five special tokens first."""

    def __init__(self, tokens: Iterable[str], use_unk: bool = True):
        self.itos: list[str] = list(SPECIALS)
        seen = set(self.itos)
        for tok in tokens:
            if tok not in seen:
                self.itos.append(tok)
                seen.add(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.use_unk = use_unk

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3
    sep_id = 4

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1, max_size: int | None = None, extra: Iterable[str] = ()) -> "Vocab":
        counts = Counter(tok for t in texts for tok in words(t))
        for tok in extra:
            counts[tok] += min_count
        # frequency desc, then lexicographic, for a stable order
        ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIALS))]
        return cls(ranked)

    def encode(self, text: str, max_len: int | None = None, add_eos: bool = False) -> list[int]:
        ids = []
        for tok in words(text):
            idx = self.stoi.get(tok)
            if idx is None:
                if not self.use_unk:
                    raise UnknownToken(tok)
                idx = self.unk_id
            ids.append(idx)
        if add_eos:
            ids.append(self.eos_id)
        if max_len is not None:
            ids = ids[:max_len]
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        for i in ids:
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            tok = self.itos[i]
            if out and tok in _NO_SPACE_BEFORE:
                out[-1] += tok
            else:
                out.append(tok)
        return " ".join(out)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        toks = Path(path).read_text(encoding="utf-8").split("\n")
        toks = [t for t in toks if t]
        if tuple(toks[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with the special tokens")
        return cls(toks[len(SPECIALS) :])
