import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docmm.geometry import ZERO_BOX, Box
from docmm.tokenizer import EOS, PAD, SEP, TokenizerError, Vocab, decode, encode_words, sentinel_token, train_bpe

CORPUS = [
    "total $4.32 cash 10.00 change 5.68",
    "invoice number 1234 date 2021-04-01 total due",
    "name: john smith address: 12 hill st",
    "unbreakable unbreakable breakable breaking",
] * 3

ALPHABET = sorted(set("".join(CORPUS).lower()) - {" "})


@pytest.fixture(scope="module")
def vocab():
    return train_bpe(CORPUS, vocab_size=220)


def test_special_ids(vocab):
    assert (vocab.pad_id, vocab.eos_id, vocab.unk_id, vocab.sep_id) == (0, 1, 2, 3)
    assert vocab.tokens[:4] == [PAD, EOS, "<unk>", SEP]
    assert vocab.tokens[vocab.sentinel_id(0)] == sentinel_token(0) == "<extra_0>"
    assert vocab.sentinel_id(99) == 103
    with pytest.raises(IndexError):
        vocab.sentinel_id(100)
    assert len(set(vocab.tokens)) == vocab.size


def test_first_merge_on_repeated_letter():
    n_specials = 104
    v = train_bpe(["aaaa"], vocab_size=n_specials + 2 + 1)  # alphabet {▁, a} plus one merge
    assert v.merges[0] == ("a", "a")


def test_tie_break_prefers_lexicographically_smallest_pair():
    v = train_bpe(["ab cd"], vocab_size=104 + 5 + 1)
    # every adjacent pair occurs once; ("▁", ...) sorts after letters, ("a","b") is smallest
    assert v.merges[0] == ("a", "b")


def test_train_errors():
    with pytest.raises(TokenizerError):
        train_bpe(["abc"], vocab_size=104)
    with pytest.raises(TokenizerError):
        train_bpe([], vocab_size=500)
    with pytest.raises(TokenizerError):
        train_bpe(["   "], vocab_size=500)


def test_training_is_deterministic(tmp_path):
    a, b = train_bpe(CORPUS, vocab_size=220), train_bpe(CORPUS, vocab_size=220)
    a.save(tmp_path / "a.txt")
    b.save(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_save_load_round_trip(vocab, tmp_path):
    vocab.save(tmp_path / "v.txt")
    loaded = Vocab.load(tmp_path / "v.txt")
    assert loaded.tokens == vocab.tokens
    assert loaded.encode("total due 4.32") == vocab.encode("total due 4.32")
    (tmp_path / "bad.txt").write_text("nonsense\n")
    with pytest.raises(TokenizerError):
        Vocab.load(tmp_path / "bad.txt")


def test_decode_examples(vocab):
    assert vocab.decode(vocab.encode("total $4.32")) == "total $4.32"
    assert decode([0, 0], vocab) == ""
    ids = [vocab.sentinel_id(0)] + vocab.encode("cash") + [vocab.sentinel_id(1), vocab.eos_id]
    assert vocab.decode(ids) == "<extra_0> cash <extra_1>"
    with pytest.raises(TokenizerError):
        vocab.decode([vocab.size])


def test_lowercase_default(vocab):
    assert vocab.decode(vocab.encode("TOTAL Cash")) == "total cash"


def test_allow_specials(vocab):
    ids = vocab.encode("cash <sep> tea", allow_specials=True)
    assert vocab.sep_id in ids
    assert vocab.sep_id not in vocab.encode("cash <sep> tea")


def test_encode_words_examples(vocab):
    enc = encode_words([], vocab, 8)
    assert list(enc.ids) == [0] * 8 and not enc.mask.any()

    words = [(w, Box(0.1 * i, 0, 0.1 * i + 0.05, 0.1)) for i, w in enumerate("total due cash change".split())]
    full = encode_words(words, vocab, 500)
    n = full.length
    cut = encode_words(words, vocab, n - 5 if n > 5 else 1)
    assert cut.length == len(cut.ids) == max(n - 5, 1)
    np.testing.assert_array_equal(cut.ids, full.ids[: cut.length])

    box = Box(0.2, 0.3, 0.5, 0.35)
    enc = encode_words([("unbreakcash", box)], vocab, 16)
    pieces = enc.words[0].ids
    assert len(pieces) >= 2
    assert all(b == box for b in enc.boxes[: len(pieces)])
    assert all(b == ZERO_BOX for b in enc.boxes[len(pieces) :])


def test_unknown_characters_map_to_unk(vocab):
    ids = vocab.encode("ζ")
    assert vocab.unk_id in ids


text_strategy = st.lists(st.text(alphabet="".join(ALPHABET), min_size=1, max_size=10), min_size=0, max_size=8).map(" ".join)


@settings(max_examples=300, deadline=None)
@given(text_strategy)
def test_round_trip_over_training_alphabet(text):
    v = train_bpe(CORPUS, vocab_size=220)
    ids = v.encode(text)
    assert v.decode(ids) == text
    assert not any(v.is_sentinel(i) for i in ids)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet=string.ascii_lowercase, min_size=1, max_size=12), max_size=30), st.integers(1, 40))
def test_truncation_count(words, s):
    v = train_bpe(CORPUS, vocab_size=220)
    enc = encode_words([(w, ZERO_BOX) for w in words], v, s)
    stream = sum(len(v.encode_word(w)) for w in words)
    assert enc.length == min(stream, s)
    assert len(enc.ids) == s and len(enc.boxes) == s
    assert np.all(enc.ids[enc.length :] == v.pad_id)
