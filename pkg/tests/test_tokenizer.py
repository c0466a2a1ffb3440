"""Tokenizer training, round trips, persistence."""

import numpy as np
import pytest

from retrosum.tokenizer import (
    MIN_VOCAB,
    N_SPECIALS,
    Tokenizer,
    TokenizerError,
    train_tokenizer,
)


def test_merge_algorithm_on_two_word_corpus():
    # corpus "aaaa aaaa": byte pair ('a','a') is the most frequent pair, so
    # the first merges build tokens spanning "aa" (and then "aaaa")
    tok = train_tokenizer(["aaaa aaaa"], vocab_size=300)
    a = ord("a") + N_SPECIALS
    assert tok.merges[0] == (a, a)
    spans = {tok._token_bytes[i] for i in tok._token_bytes}
    assert b"aa" in spans or b"aaaa" in spans
    assert len(tok.encode("aaaa")) < 4


def test_empty_corpus_is_domain_error():
    with pytest.raises(TokenizerError):
        train_tokenizer([], vocab_size=300)


def test_vocab_below_reserved_region_is_domain_error():
    with pytest.raises(TokenizerError):
        train_tokenizer(["abc"], vocab_size=MIN_VOCAB - 1)


def test_empty_string_round_trip():
    tok = train_tokenizer(["hello world"], vocab_size=300)
    assert tok.encode("") == []
    assert tok.decode([]) == ""


def test_simple_round_trip():
    tok = train_tokenizer(["the cat sat on the mat"], vocab_size=300)
    assert tok.decode(tok.encode("the cat")) == "the cat"


def test_random_utf8_round_trips_byte_exact():
    tok = train_tokenizer(["training text with some words"], vocab_size=310)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 40))
        codepoints = rng.integers(1, 0x10FFFF, size=n)
        text = "".join(chr(int(c)) for c in codepoints if not 0xD800 <= c <= 0xDFFF)
        assert tok.decode(tok.encode(text)) == text


def test_no_unk_ever_emitted():
    tok = train_tokenizer(["abc"], vocab_size=300)
    ids = tok.encode("совершенно новые слова ☃ \U0001F600")
    assert tok.decode(ids) == "совершенно новые слова ☃ \U0001F600"
    assert all(i >= N_SPECIALS for i in ids)


def test_training_determinism():
    corpus = ["the quick brown fox", "jumps over the lazy dog", "the the the"]
    t1 = train_tokenizer(corpus, vocab_size=320)
    t2 = train_tokenizer(corpus, vocab_size=320)
    assert t1.merges == t2.merges


def test_specials_are_distinct_and_reserved():
    tok = train_tokenizer(["x"], vocab_size=300)
    ids = {tok.pad_id, tok.bos_id, tok.eos_id, tok.sep_id}
    assert len(ids) == 4
    assert all(i < 256 for i in ids)
    assert all(i < N_SPECIALS for i in ids)


def test_save_load_round_trip(tmp_path):
    tok = train_tokenizer(["some corpus with repeated words words words"], vocab_size=330)
    path = tmp_path / "tok.txt"
    tok.save(path)
    loaded = Tokenizer.load(path)
    assert loaded.merges == tok.merges
    assert loaded.vocab_size == tok.vocab_size
    sample = "words and more words"
    assert loaded.encode(sample) == tok.encode(sample)


def test_load_rejects_wrong_version(tmp_path):
    path = tmp_path / "tok.txt"
    path.write_text("retrosum-tokenizer 99\n300\n")
    with pytest.raises(TokenizerError, match="version"):
        Tokenizer.load(path)


def test_merged_tokens_shrink_encoding():
    corpus = ["summarization " * 50]
    tok = train_tokenizer(corpus, vocab_size=280 + 40)
    assert len(tok.encode("summarization")) < len("summarization")
