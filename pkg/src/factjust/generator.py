"""Encoder-decoder reader with Fusion-in-Decoder evidence aggregation.

Each context is encoded on its own as ``claim <sep> context`` and the
encoder states are concatenated before the decoder cross-attends over them.
Distributions and log-probabilities are returned in float64 regardless of
the parameter dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import DecoderLayer, EncoderLayer, sinusoidal_positions
from .tokenizer import EmptyText, Vocab


class NoContexts(ValueError):
    pass


class InvalidTarget(ValueError):
    pass


@dataclass
class FiDEncoding:
    states: torch.Tensor  # [sum(lengths), d]
    lengths: list[int]

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for n in self.lengths:
            out.append(acc)
            acc += n
        return out

    def block(self, j: int) -> torch.Tensor:
        start = self.offsets[j]
        return self.states[start : start + self.lengths[j]]

    def padded_blocks(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Each context's states as its own memory: ``[N, Lmax, d]`` plus a key mask."""
        width = max(self.lengths)
        n, d = len(self.lengths), self.states.shape[-1]
        mem = self.states.new_zeros(n, width, d)
        mask = torch.zeros(n, width, dtype=torch.bool)
        for j, (start, length) in enumerate(zip(self.offsets, self.lengths)):
            mem[j, :length] = self.states[start : start + length]
            mask[j, :length] = True
        return mem, mask


@dataclass
class TeacherForced:
    target_ids: list[int]
    logits: torch.Tensor  # [T, V]
    cross_attention: list[torch.Tensor]  # per layer [H, T, S]
    lengths: list[int]

    def token_logprobs(self) -> torch.Tensor:
        logp = F.log_softmax(self.logits.double(), dim=-1)
        return logp.gather(1, torch.tensor(self.target_ids)[:, None])[:, 0]

    def distributions(self) -> torch.Tensor:
        return torch.softmax(self.logits.double(), dim=-1)

    def doc_scores(self) -> torch.Tensor:
        """One score per context: cross-attention averaged over layers, heads,
        target tokens and the key positions of that context's block."""
        per_key = torch.stack(self.cross_attention).double().mean(dim=(0, 1, 2))  # [S]
        return torch.stack([blk.mean() for blk in per_key.split(self.lengths)])


class FiDReader(nn.Module):
    def __init__(
        self,
        vocab: Vocab,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 2,
        d_ff: int = 128,
        max_context_len: int = 256,
        max_target_len: int = 512,
    ):
        super().__init__()
        self.vocab = vocab
        self.d_model = d_model
        self.max_context_len = max_context_len
        self.max_target_len = max_target_len
        self.embed = nn.Embedding(len(vocab), d_model)
        nn.init.normal_(self.embed.weight, std=d_model**-0.5)
        self.register_buffer("pos", sinusoidal_positions(max(max_context_len, max_target_len) + 1, d_model), persistent=False)
        self.encoder = nn.ModuleList(EncoderLayer(d_model, n_heads, d_ff) for _ in range(n_layers))
        self.enc_norm = nn.LayerNorm(d_model)
        self.decoder = nn.ModuleList(DecoderLayer(d_model, n_heads, d_ff) for _ in range(n_layers))
        self.dec_norm = nn.LayerNorm(d_model)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embed(ids) * math.sqrt(self.d_model) + self.pos[: ids.shape[-1]].to(self.embed.weight.dtype)

    # -- tokenization -----------------------------------------------------

    def context_ids(self, claim: str, context: str) -> list[int]:
        ids = self.vocab.encode(claim) + [self.vocab.sep_id] + self.vocab.encode(context)
        return ids[: self.max_context_len]

    def target_ids(self, target: str | Sequence[int]) -> list[int]:
        """Token ids of a target, always ending with eos."""
        if isinstance(target, str):
            ids = self.vocab.encode(target)
            if not ids:
                raise EmptyText("empty target")
            ids = ids[: self.max_target_len - 1] + [self.vocab.eos_id]
        else:
            ids = list(target)
            if not ids or ids[-1] != self.vocab.eos_id:
                raise InvalidTarget("target token sequence must be non-empty and end with eos")
        return ids

    # -- encoder ----------------------------------------------------------

    def encode_fid(self, claim: str, contexts: Sequence[str]) -> FiDEncoding:
        if not contexts:
            raise NoContexts("at least one context is required")
        blocks, lengths = [], []
        # one forward per context keeps each block a function of (claim, context) alone
        for ctx in contexts:
            ids = torch.tensor([self.context_ids(claim, ctx)])
            x = self._embed(ids)
            for layer in self.encoder:
                x = layer(x)
            blocks.append(self.enc_norm(x)[0])
            lengths.append(ids.shape[1])
        return FiDEncoding(torch.cat(blocks), lengths)

    # -- decoder ----------------------------------------------------------

    def decode(
        self, memory: torch.Tensor, tgt_in: torch.Tensor, memory_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Logits ``[B, T, V]`` and per-layer cross-attention ``[B, H, T, S]``."""
        x = self._embed(tgt_in)
        cross = []
        for layer in self.decoder:
            x, attn = layer(x, memory, memory_mask)
            cross.append(attn)
        h = self.dec_norm(x)
        return h @ self.embed.weight.t(), cross

    def teacher_forced(self, target, claim: str, contexts: Sequence[str], encoding: FiDEncoding | None = None) -> "TeacherForced":
        """One decoder pass over the gold target; all per-target quantities derive from it."""
        ids = self.target_ids(target)
        enc = encoding if encoding is not None else self.encode_fid(claim, contexts)
        tgt_in = torch.tensor([[self.vocab.bos_id] + ids[:-1]])
        logits, cross = self.decode(enc.states[None], tgt_in)
        return TeacherForced(ids, logits[0], [a[0] for a in cross], enc.lengths)

    def lm_logprob(
        self, target, claim: str, contexts: Sequence[str], encoding: FiDEncoding | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-token log-probabilities of the target and their sum."""
        per_token = self.teacher_forced(target, claim, contexts, encoding).token_logprobs()
        return per_token, per_token.sum()

    def token_distributions(
        self, target, claim: str, contexts: Sequence[str], encoding: FiDEncoding | None = None
    ) -> torch.Tensor:
        """Full next-token distributions ``[|y|, V]`` along the teacher-forced target."""
        return self.teacher_forced(target, claim, contexts, encoding).distributions()

    def cross_attention_doc_scores(
        self, target, claim: str, contexts: Sequence[str], encoding: FiDEncoding | None = None
    ) -> torch.Tensor:
        return self.teacher_forced(target, claim, contexts, encoding).doc_scores()

    def context_logprobs(self, targets: Sequence, encoding: FiDEncoding) -> torch.Tensor:
        """``log p(target_t | claim, context_j)`` with each context used alone: ``[T, N]``."""
        mem, mask = encoding.padded_blocks()
        n = mem.shape[0]
        rows = []
        for target in targets:
            ids = self.target_ids(target)
            tgt_in = torch.tensor([[self.vocab.bos_id] + ids[:-1]]).expand(n, -1)
            logits, _ = self.decode(mem, tgt_in, mask)
            logp = F.log_softmax(logits.double(), dim=-1)
            gold = torch.tensor(ids)[None, :, None].expand(n, -1, 1)
            rows.append(logp.gather(2, gold)[..., 0].sum(1))
        return torch.stack(rows)

    @torch.no_grad()
    def generate(self, claim: str, contexts: Sequence[str], max_len: int = 64, beam_size: int = 1) -> str:
        return self.vocab.decode(self.generate_ids(claim, contexts, max_len, beam_size))

    @torch.no_grad()
    def generate_ids(self, claim: str, contexts: Sequence[str], max_len: int = 64, beam_size: int = 1) -> list[int]:
        if max_len < 1:
            raise ValueError("max_len must be positive")
        enc = self.encode_fid(claim, contexts)
        memory = enc.states[None]
        eos = self.vocab.eos_id
        beams: list[tuple[list[int], float]] = [([], 0.0)]
        finished: list[tuple[list[int], float]] = []
        for _ in range(max_len):
            candidates = []
            prefixes = torch.tensor([[self.vocab.bos_id] + seq for seq, _ in beams])
            logits, _ = self.decode(memory.expand(len(beams), -1, -1), prefixes)
            logp = F.log_softmax(logits[:, -1].double(), dim=-1)
            for (seq, score), row in zip(beams, logp):
                top = torch.topk(row, beam_size)
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((seq + [tok], score + lp))
            # stable sort keeps lower token ids first on equal scores
            candidates.sort(key=lambda c: -c[1])
            beams = []
            for seq, score in candidates:
                if seq[-1] == eos:
                    finished.append((seq, score))
                else:
                    beams.append((seq, score))
                if len(beams) == beam_size:
                    break
            if beam_size == 1 and finished:
                break
            if not beams or len(finished) >= beam_size:
                break
        pool = finished or beams
        if beam_size == 1:
            pool = finished[:1] or beams[:1]
        else:
            pool = sorted(pool, key=lambda c: -c[1] / len(c[0]))
        return pool[0][0]
