import math
import random

import pytest
import torch

from factjust.generator import FiDReader, InvalidTarget, NoContexts, TeacherForced
from factjust.tokenizer import Vocab

from conftest import CLAIM, DOCS, TARGET, TINY, uniform_model


def test_fid_lengths_and_concatenation(tiny_model):
    reader = tiny_model.reader
    enc = reader.encode_fid(CLAIM, DOCS)
    expected = [len(reader.context_ids(CLAIM, d)) for d in DOCS]
    assert enc.lengths == expected
    assert enc.states.shape[0] == sum(expected)


def test_fid_blocks_independent(tiny_model):
    reader = tiny_model.reader
    a = reader.encode_fid(CLAIM, DOCS)
    b = reader.encode_fid(CLAIM, [DOCS[0], "ohio rent rose", DOCS[2]])
    assert torch.equal(a.block(0), b.block(0))
    assert torch.equal(a.block(2), b.block(2))
    same = reader.encode_fid(CLAIM, [DOCS[1], DOCS[1]])
    assert torch.equal(same.block(0), same.block(1))


def test_context_truncation(vocab):
    reader = FiDReader(vocab, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_context_len=12)
    assert len(reader.context_ids(CLAIM, " ".join(DOCS))) == 12


def test_no_contexts(tiny_model):
    with pytest.raises(NoContexts):
        tiny_model.reader.encode_fid(CLAIM, [])
    with pytest.raises(NoContexts):
        tiny_model.reader.generate(CLAIM, [])


def test_uniform_model_logprob():
    vocab = Vocab([f"t{i}" for i in range(95)])
    assert len(vocab) == 100
    model = uniform_model(vocab)
    per_token, total = model.reader.lm_logprob([vocab.eos_id], "t1 t2", ["t3"])
    assert total.item() == pytest.approx(-math.log(100), abs=1e-12)
    assert per_token.shape == (1,)


def test_logprob_additive_and_bounded(tiny_model):
    per_token, total = tiny_model.reader.lm_logprob(TARGET, CLAIM, DOCS)
    assert abs(per_token.sum().item() - total.item()) <= 1e-10
    assert 0 < math.exp(total.item()) <= 1
    again = tiny_model.reader.lm_logprob(TARGET, CLAIM, DOCS)[1]
    assert again.item() == total.item()


def test_target_must_end_with_eos(tiny_model):
    with pytest.raises(InvalidTarget):
        tiny_model.reader.lm_logprob([5, 6], CLAIM, DOCS)


def test_distributions_normalized_and_consistent(tiny_model):
    reader = tiny_model.reader
    dist = reader.token_distributions(TARGET, CLAIM, DOCS)
    assert torch.allclose(dist.sum(1), torch.ones(dist.shape[0], dtype=dist.dtype), atol=1e-9)
    per_token, _ = reader.lm_logprob(TARGET, CLAIM, DOCS)
    ids = reader.target_ids(TARGET)
    picked = dist[torch.arange(len(ids)), torch.tensor(ids)]
    assert torch.allclose(picked, per_token.exp(), atol=1e-12)


def test_context_logprobs_match_single_context_runs(tiny_model):
    reader = tiny_model.reader
    enc = reader.encode_fid(CLAIM, DOCS)
    table = reader.context_logprobs([TARGET], enc)[0]
    for j, doc in enumerate(DOCS):
        alone = reader.lm_logprob(TARGET, CLAIM, [doc])[1]
        assert table[j].item() == pytest.approx(alone.item(), abs=1e-5)


def test_greedy_deterministic_and_max_len(tiny_model):
    reader = tiny_model.reader
    assert reader.generate_ids(CLAIM, DOCS, max_len=8) == reader.generate_ids(CLAIM, DOCS, max_len=8)
    assert len(reader.generate_ids(CLAIM, DOCS, max_len=1)) == 1
    beams = reader.generate_ids(CLAIM, DOCS, max_len=6, beam_size=3)
    assert 1 <= len(beams) <= 6


def test_doc_scores_identical_contexts(tiny_model):
    scores = tiny_model.reader.cross_attention_doc_scores(TARGET, CLAIM, [DOCS[0]] * 3)
    assert torch.isfinite(scores).all()
    assert torch.allclose(scores, scores[0].expand(3), atol=1e-7)
    assert torch.allclose(torch.softmax(scores, 0), torch.full((3,), 1 / 3, dtype=scores.dtype), atol=1e-7)


def test_doc_scores_hand_built_attention():
    # one layer, one head, 2 target steps, contexts of 2 and 3 keys
    attn = torch.tensor(
        [[[0.1, 0.3, 0.2, 0.2, 0.2], [0.5, 0.1, 0.1, 0.2, 0.1]]], dtype=torch.float64
    )
    fwd = TeacherForced([5, 2], torch.zeros(2, 7, dtype=torch.float64), [attn], [2, 3])
    expected_a = ((0.1 + 0.3) / 2 + (0.5 + 0.1) / 2) / 2
    expected_b = ((0.2 + 0.2 + 0.2) / 3 + (0.1 + 0.2 + 0.1) / 3) / 2
    assert torch.allclose(fwd.doc_scores(), torch.tensor([expected_a, expected_b], dtype=torch.float64), atol=1e-10)


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    from factjust.modeling import RAGModel, read_checkpoint_meta

    tiny_model.save(tmp_path / "ck.safetensors")
    back = RAGModel.load(tmp_path / "ck.safetensors")
    for (k, a), (_, b) in zip(tiny_model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    meta = read_checkpoint_meta(tmp_path / "ck.safetensors")
    assert meta["tokenizer_file"] == "vocab.txt" and meta["model"]["d_model"] == TINY.d_model


def test_copy_task_generalizes_to_held_out_sentence():
    rng = random.Random(0)
    words = [f"w{i}" for i in range(20)]
    vocab = Vocab(words + ["copy", "filler"])
    torch.manual_seed(0)
    reader = FiDReader(vocab, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_context_len=32, max_target_len=16)
    probe = "w3 w17 w8 w11 w0"

    def sample():
        while True:
            s = " ".join(rng.choice(words) for _ in range(5))
            if s != probe:
                return s

    opt = torch.optim.Adam(reader.parameters(), lr=3e-3)
    for _ in range(450):
        opt.zero_grad()
        loss = 0
        for _ in range(8):
            s = sample()
            loss = loss - reader.lm_logprob(s, "copy", ["filler filler", s])[0].mean()
        (loss / 8).backward()
        opt.step()
    reader.eval()
    assert reader.generate("copy", ["filler filler", probe], max_len=10) == probe
