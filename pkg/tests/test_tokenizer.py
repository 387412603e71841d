import pytest

from factjust.tokenizer import SPECIALS, UnknownToken, Vocab, words


def test_specials_first_and_ids():
    v = Vocab.build(["b a a"])
    assert v.itos[:5] == list(SPECIALS)
    assert (v.pad_id, v.bos_id, v.eos_id, v.unk_id, v.sep_id) == (0, 1, 2, 3, 4)
    assert v.itos[5:] == ["a", "b"]  # frequency, then lexical


def test_words_split_punctuation_and_lowercase():
    assert words("Our Ruling: 10 percent.") == ["our", "ruling", ":", "10", "percent", "."]


def test_encode_unknown_and_eos():
    v = Vocab.build(["the cat"])
    assert v.encode("the dog", add_eos=True) == [v.stoi["the"], v.unk_id, v.eos_id]
    strict = Vocab(v.itos[5:], use_unk=False)
    with pytest.raises(UnknownToken):
        strict.encode("dog")


def test_encode_truncates():
    v = Vocab.build(["a b c d"])
    assert len(v.encode("a b c d", max_len=2)) == 2


def test_decode_attaches_punctuation_and_stops_at_eos():
    v = Vocab.build(["we rate this false ."])
    ids = v.encode("we rate this false.", add_eos=True) + v.encode("rate")
    assert v.decode(ids) == "we rate this false."


def test_save_load_roundtrip(tmp_path):
    v = Vocab.build(["x y z z"], extra=["true"])
    v.save(tmp_path / "vocab.txt")
    back = Vocab.load(tmp_path / "vocab.txt")
    assert back.itos == v.itos and back.fingerprint() == v.fingerprint()


def test_build_min_count_and_max_size():
    v = Vocab.build(["a a b c"], min_count=2)
    assert v.itos[5:] == ["a"]
    assert len(Vocab.build(["a b c d e"], max_size=7)) == 7
