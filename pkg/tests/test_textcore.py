import pytest
from hypothesis import given
from hypothesis import strategies as st

from phrasealign import textcore as tc


def test_reserved_ids():
    assert (tc.PAD, tc.BOS, tc.EOS, tc.UNK) == (0, 1, 2, 3)


def test_build_vocab_first_appearance_order():
    v = tc.build_vocab(["a b", "b c"])
    assert v.tokens == ["<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "c"]


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        tc.build_vocab([])


def test_words_of_lowercase_and_punct():
    assert tc.words_of("A dog.") == ["a", "dog", "."]
    assert tc.words_of("Yes, no!") == ["yes", ",", "no", "!"]


def test_tokenize_unknown_maps_to_unk():
    v = tc.build_vocab(["a b"])
    assert tc.tokenize("a z b", v) == [4, tc.UNK, 5]


def test_detokenize_round_trip():
    v = tc.build_vocab(["a dog ."])
    ids = tc.tokenize("a dog .", v)
    assert tc.detokenize(ids, v) == "a dog ."


def test_span_validation_and_len():
    s = tc.Span(1, 3)
    assert len(s) == 2
    with pytest.raises(ValueError):
        tc.Span(2, 2)
    with pytest.raises(ValueError):
        tc.Span(-1, 2)


def test_span_overlap():
    assert tc.Span(0, 3).overlaps(tc.Span(2, 5))
    assert not tc.Span(0, 2).overlaps(tc.Span(2, 4))


def test_locate_phrase_pinned():
    v = tc.build_vocab(["a b c b"])
    a, b, c = v.id("a"), v.id("b"), v.id("c")
    seq = [a, b, c, b]
    assert tc.locate_phrase(seq, [b]) == tc.Span(1, 2)
    assert tc.locate_phrase(seq, [b], start=2) == tc.Span(3, 4)
    assert tc.locate_phrase(seq, [v.id("a"), c]) is None


def test_locate_phrase_empty_raises():
    with pytest.raises(ValueError, match="empty phrase"):
        tc.locate_phrase([1, 2], [])


def test_vocab_save_load_round_trip(tmp_path):
    v = tc.build_vocab(["a dog in a park ."])
    p = tmp_path / "vocab.txt"
    v.save(str(p))
    assert tc.Vocab.load(str(p)) == v


def test_vocab_rejects_bad_prefix_and_dupes():
    with pytest.raises(ValueError, match="reserved"):
        tc.Vocab(["a", "b", "c", "d"])
    with pytest.raises(ValueError, match="duplicate"):
        tc.Vocab(list(tc.RESERVED) + ["a", "a"])


def test_validate_seq():
    tc.validate_seq([1, 4, 2], 6)
    with pytest.raises(ValueError, match="out of range"):
        tc.validate_seq([1, 9, 2], 6)
    with pytest.raises(ValueError, match="interior"):
        tc.validate_seq([1, tc.PAD, 2], 6)


@given(st.text(alphabet="abc .,", max_size=40))
def test_words_of_never_empty_tokens(text):
    assert all(w for w in tc.words_of(text))


@given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=8),
       st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=3))
def test_locate_phrase_finds_what_it_claims(seq_w, phrase_w):
    v = tc.build_vocab(["a b c"])
    seq = [v.id(w) for w in seq_w]
    phrase = [v.id(w) for w in phrase_w]
    span = tc.locate_phrase(seq, phrase)
    if span is not None:
        assert seq[span.start : span.end] == phrase
        # earliest occurrence
        for i in range(span.start):
            assert seq[i : i + len(phrase)] != phrase
