"""The retriever/reader bundle and its checkpoint container."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

from .generator import FiDReader
from .retriever import Retriever
from .tokenizer import Vocab

CHECKPOINT_FORMAT_VERSION = "1"
VOCAB_FILENAME = "vocab.txt"


@dataclass
class ModelConfig:
    retriever_dim: int = 64
    retriever_layers: int = 2
    retriever_heads: int = 2
    retriever_ff: int = 128
    retriever_max_len: int = 512
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_context_len: int = 256
    max_target_len: int = 512

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


class RAGModel(nn.Module):
    """Dual-encoder retriever plus FiD reader over one shared vocabulary."""

    def __init__(self, vocab: Vocab, config: ModelConfig | None = None, seed: int | None = 0):
        super().__init__()
        self.vocab = vocab
        self.config = config or ModelConfig()
        c = self.config
        if seed is not None:
            torch.manual_seed(seed)
        self.retriever = Retriever(vocab, c.retriever_dim, c.retriever_layers, c.retriever_heads, c.retriever_ff, c.retriever_max_len)
        self.reader = FiDReader(vocab, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_context_len, c.max_target_len)

    def query_parameters(self) -> list[nn.Parameter]:
        return list(self.retriever.query_encoder.parameters())

    def lm_parameters(self) -> list[nn.Parameter]:
        return list(self.reader.parameters())

    def doc_parameters(self) -> list[nn.Parameter]:
        return list(self.retriever.doc_encoder.parameters())

    def partition(self, name: str) -> str:
        if name.startswith("retriever.doc_encoder."):
            return "doc"
        if name.startswith("retriever.query_encoder."):
            return "query"
        return "lm"

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Write tensors as little-endian f32 safetensors with a JSON config block.

        The vocabulary is written next to the checkpoint and referenced by name
        and hash. Both files are written to a temporary name and renamed.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        vocab_path = path.parent / VOCAB_FILENAME
        tmp_vocab = vocab_path.with_name(vocab_path.name + ".tmp")
        self.vocab.save(tmp_vocab)
        os.replace(tmp_vocab, vocab_path)
        # a single metadata key: safetensors stores metadata in a hash map, so
        # several keys would be written in an order that varies between runs
        meta = {
            "config": json.dumps(
                {
                    "format_version": CHECKPOINT_FORMAT_VERSION,
                    "model": asdict(self.config),
                    "vocab_size": len(self.vocab),
                    "vocab_sha256": self.vocab.fingerprint(),
                    "tokenizer_file": VOCAB_FILENAME,
                    **(extra or {}),
                },
                sort_keys=True,
            ),
        }
        tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in self.state_dict().items()}
        tmp = path.with_name(path.name + ".tmp")
        save_file(tensors, str(tmp), metadata=meta)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "RAGModel":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        meta = read_checkpoint_meta(path)
        vocab = Vocab.load(path.parent / meta["tokenizer_file"])
        if vocab.fingerprint() != meta["vocab_sha256"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        model = cls(vocab, ModelConfig.from_dict(meta["model"]), seed=None)
        model.load_state_dict(load_file(str(path)))
        return model


def read_checkpoint_meta(path: str | Path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        raw = fh.metadata() or {}
    meta = json.loads(raw.get("config", "{}"))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format_version')!r}")
    return meta
