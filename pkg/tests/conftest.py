import pytest
import torch

from factjust.corpus import Corpus, Instance, VeracityLabel, chunk_document
from factjust.modeling import ModelConfig, RAGModel
from factjust.tokenizer import Vocab

CLAIM = "senator adams says taxes rose 10 percent in ohio"
TARGET = "our ruling : taxes fell 4 percent , we rate this false"
DOCS = [
    "treasury data show taxes fell 4 percent in ohio last year",
    "adams spoke at a rally about wages and rent",
    "ohio budget office report on tolls and fares",
]
ARTICLE_CHUNKS = [
    "adams said taxes rose 10 percent during a speech",
    "the treasury reports taxes fell 4 percent in ohio",
]

TINY = ModelConfig(
    retriever_dim=8, retriever_layers=1, retriever_heads=2, retriever_ff=16, retriever_max_len=64,
    d_model=8, n_layers=1, n_heads=2, d_ff=16, max_context_len=64, max_target_len=64,
)


def all_texts():
    return [CLAIM, TARGET, *DOCS, *ARTICLE_CHUNKS, "false mixture true"]


@pytest.fixture(scope="session")
def vocab():
    return Vocab.build(all_texts())


@pytest.fixture
def tiny_model(vocab):
    return RAGModel(vocab, TINY, seed=3)


@pytest.fixture
def tiny_model64(vocab):
    return RAGModel(vocab, TINY, seed=3).double()


def make_instance(i=0, label=VeracityLabel.FALSE, split="train"):
    article = " ".join(ARTICLE_CHUNKS)
    return Instance(
        id=f"c{i:03d}", claim=CLAIM, justification=TARGET, article=article, label=label,
        reference_doc_ids=[f"r{i}"], split=split,
    )


@pytest.fixture
def toy_corpus():
    chunks = []
    for k, text in enumerate(DOCS):
        chunks.extend(chunk_document(text, source_doc_id=f"d{k}"))
    return Corpus.from_chunks(chunks)


def uniform_model(vocab, config=TINY):
    """A reader whose logits are identically zero, hence a uniform next-token distribution."""
    model = RAGModel(vocab, config, seed=0)
    with torch.no_grad():
        model.reader.dec_norm.weight.zero_()
        model.reader.dec_norm.bias.zero_()
    return model


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
