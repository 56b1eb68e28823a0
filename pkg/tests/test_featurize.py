import logging
from collections import Counter

import numpy as np
from hypothesis import given, strategies as st

from transkb.dataset import WordVectorTable
from transkb.featurize import (NgramVocabulary, build_description_matrix, extract_3grams,
                               featurize_bong, text_3grams, token_indices, tokenize)

words = st.text(alphabet="abcdefghij", min_size=1, max_size=12)


def test_worked_example():
    assert extract_3grams("word") == Counter(["#wo", "wor", "ord", "rd#"])


def test_single_letter():
    assert extract_3grams("a") == Counter(["#a#"])


def test_repeated_pattern():
    assert extract_3grams("abab") == Counter(["#ab", "aba", "bab", "ab#"])


def test_empty_word():
    assert extract_3grams("") == Counter()


@given(words)
def test_gram_count_equals_word_length(w):
    grams = extract_3grams(w)
    assert sum(grams.values()) == len(w)
    assert all(len(g) == 3 for g in grams)


def test_tokenizer():
    assert tokenize("Hello, World! x_y 42") == ["hello", "world", "x", "y", "42"]


def test_bong_single_word():
    vocab = NgramVocabulary()
    x = featurize_bong("word", vocab, mode="train")
    assert len(vocab) == 4
    np.testing.assert_array_equal(x, np.full(4, np.log(2.0)))


def test_bong_empty():
    vocab = NgramVocabulary.build(["word"])
    np.testing.assert_array_equal(featurize_bong("", vocab), np.zeros(4))


def test_bong_repeated_word():
    vocab = NgramVocabulary.build(["word"])
    x = featurize_bong("word word", vocab)
    np.testing.assert_array_equal(x, np.full(4, np.log(3.0)))


def test_bong_is_case_insensitive():
    vocab = NgramVocabulary.build(["word"])
    np.testing.assert_array_equal(featurize_bong("WORD", vocab), featurize_bong("word", vocab))


@given(st.lists(words, max_size=8))
def test_bong_bounds_and_support(tokens):
    text = " ".join(tokens)
    vocab = NgramVocabulary.build([text, "zzz"])
    x = featurize_bong(text, vocab)
    counts = text_3grams(text)
    assert x.max(initial=0.0) <= np.log1p(sum(counts.values())) + 1e-15
    for g, i in vocab.index.items():
        assert (x[i] == 0.0) == (g not in counts)


def test_infer_mode_does_not_mutate(caplog):
    vocab = NgramVocabulary.build(["word"])
    before = dict(vocab.index)
    with caplog.at_level(logging.DEBUG, logger="transkb.featurize"):
        x = featurize_bong("wordy unseen", vocab)
    assert vocab.index == before
    assert x.shape == (4,)
    assert "dropped" in caplog.text


def test_ngram_vocabulary_round_trip():
    vocab = NgramVocabulary.build(["the quick brown fox", "jumps"])
    assert NgramVocabulary.from_lines(vocab.to_lines()).index == vocab.index


WV = WordVectorTable({"cat": 0, "sat": 1}, np.array([[1.0, 0.0], [0.5, 2.0]]))


def test_matrix_single_word():
    m = build_description_matrix("cat", WV, 10)
    np.testing.assert_array_equal(m.matrix, [[1.0], [0.0]])


def test_matrix_unknown_word_is_unk():
    m = build_description_matrix("cat dog", WV, 10)
    np.testing.assert_array_equal(m.matrix, [[1.0, 0.0], [0.0, 0.0]])
    assert m.tokens == ["cat", "dog"]
    assert list(m.indices) == [0, 2]


def test_matrix_columns_are_word_vectors():
    m = build_description_matrix("Sat cat sat", WV, 10)
    for i, tok in enumerate(m.tokens):
        np.testing.assert_array_equal(m.matrix[:, i], WV[tok])


def test_matrix_truncates():
    assert build_description_matrix(" ".join(["cat"] * 700), WV, 617).matrix.shape == (2, 617)


def test_all_oov_and_empty_give_single_unk():
    for text in ("", "dog bird", "!!!"):
        m = build_description_matrix(text, WV, 5)
        np.testing.assert_array_equal(m.matrix, [[0.0], [0.0]])


def test_min_len_pads_with_unk():
    tokens, ids = token_indices("cat sat", WV.index, 617, min_len=16)
    assert tokens == ["cat", "sat"]
    assert list(ids) == [0, 1] + [2] * 14
