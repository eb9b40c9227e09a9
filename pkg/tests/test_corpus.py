import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inctts.corpus import (
    EOS_ID,
    UNK_ID,
    Sentence,
    Vocabulary,
    declination,
    generate_corpus,
    oracle_frames,
    position_vectors,
    read_corpus,
    read_vocab,
    syn_embedding,
    write_corpus,
    write_vocab,
)
from inctts.errors import ConfigError, EmptyInputError, VocabularyError


def test_vocabulary_inverse_and_reserved():
    v = Vocabulary.synthetic(64)
    assert len(v) == 66
    assert v.words[EOS_ID] != v.words[UNK_ID]
    for i, w in enumerate(v.words):
        assert v.indices[w] == i
    assert v.encode(["never-seen"]) == [UNK_ID]
    with pytest.raises(VocabularyError):
        v.decode([999])


def test_sentence_invariants():
    s = Sentence.from_words([3, 4, 5])
    assert s.M == 3 and s.tokens[-1] == EOS_ID
    with pytest.raises(EmptyInputError):
        Sentence.from_words([])
    with pytest.raises(EmptyInputError):
        Sentence((3, EOS_ID, 4, EOS_ID))


def test_generate_corpus_deterministic():
    a, b = generate_corpus(7, sentence_count=50), generate_corpus(7, sentence_count=50)
    assert [s.tokens for s in a.sentences] == [s.tokens for s in b.sentences]
    c = generate_corpus(8, sentence_count=50)
    assert [s.tokens for s in a.sentences] != [s.tokens for s in c.sentences]


def test_generate_corpus_fixed_length():
    c = generate_corpus(0, sentence_count=40, length_range=[5, 5])
    assert all(s.M == 5 for s in c.sentences)


def test_generate_corpus_lengths_in_range():
    c = generate_corpus(3, sentence_count=200, length_range=[4, 9])
    ms = [s.M for s in c.sentences]
    assert min(ms) >= 4 and max(ms) <= 9
    assert all(2 <= w < 66 for s in c.sentences for w in s.words)


@pytest.mark.parametrize("kw", [
    {"vocab_size": 7},
    {"length_range": [3, 8]},
    {"length_range": [6, 5]},
    {"length_range": [4, 31]},
    {"sentence_count": 0},
])
def test_generate_corpus_rejects_degenerate(kw):
    with pytest.raises(ConfigError):
        generate_corpus(0, **kw)


def _stationary_by_iteration(P, iters=5000):
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(iters):
        pi = pi @ P
    return pi


def test_unigram_matches_stationary_distribution():
    c = generate_corpus(1, vocab_size=64, sentence_count=1000)
    P = c.chain.transition
    pi = _stationary_by_iteration(P)
    np.testing.assert_allclose(c.chain.stationary, pi, atol=1e-10)
    counts = np.zeros(64)
    for s in c.sentences:
        for w in s.words:
            counts[w - c.chain.first_word] += 1
    tv = 0.5 * np.abs(counts / counts.sum() - pi).sum()
    assert tv < 0.05


def test_corpus_split():
    c = generate_corpus(0, sentence_count=20)
    train, test = c.split(5)
    assert len(train.sentences) == 15 and len(test.sentences) == 5
    assert train.sentences + test.sentences == c.sentences
    with pytest.raises(ConfigError):
        c.split(20)


def test_plain_text_roundtrip(tmp_path):
    c = generate_corpus(2, sentence_count=30)
    write_corpus(tmp_path / "c.txt", c)
    write_vocab(tmp_path / "v.txt", c.vocab)
    vocab = read_vocab(tmp_path / "v.txt")
    assert vocab.words == c.vocab.words
    back = read_corpus(tmp_path / "c.txt", vocab)
    assert [s.tokens for s in back.sentences] == [s.tokens for s in c.sentences]


def test_plain_text_ingestion_lowercases_and_maps_unk(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("The cat sat\n\nthe DOG sat\nrare words here\n", encoding="utf-8")
    c = read_corpus(p, vocab_size=3)
    assert c.vocab.words[2:] == ["sat", "the", "cat"]
    assert len(c.sentences) == 3
    assert c.vocab.decode(c.sentences[1].words) == ["the", "<unk>", "sat"]
    assert c.sentences[2].words == (UNK_ID,) * 3


def test_plain_text_empty(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("\n \n", encoding="utf-8")
    with pytest.raises(EmptyInputError):
        read_corpus(p)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def _oracle_reference(words, K_f, D, seed):
    M = len(words)
    rows = []
    for n, w in enumerate(words, start=1):
        table = np.random.default_rng([seed, 0x53594E, w]).uniform(-1.0, 1.0, size=D)
        decl = 1.0 - 0.5 * (n - 1) / max(M - 1, 1)
        pos = np.random.default_rng([seed, 0x504F53]).uniform(-0.1, 0.1, size=(K_f, D))
        for j in range(K_f):
            rows.append(table * decl + pos[j])
    return np.array(rows)


def test_oracle_single_word():
    s = Sentence.from_words([9])
    ft = oracle_frames(s, 4, 16, 0)
    np.testing.assert_array_equal(ft.frames, syn_embedding(0, 9, 16) + position_vectors(0, 4, 16))


def test_oracle_last_word_half_declination():
    for M in range(1, 12):
        assert declination(M, M) == (1.0 if M == 1 else 0.5)
    s = Sentence.from_words([4, 5, 6, 7])
    ft = oracle_frames(s, 3, 8, 2)
    np.testing.assert_array_equal(ft.frames[-3:], syn_embedding(2, 7, 8) * 0.5
                                  + position_vectors(2, 3, 8))


@given(st.lists(st.integers(2, 65), min_size=1, max_size=12), st.integers(1, 5),
       st.integers(2, 20), st.integers(0, 1000))
def test_oracle_matches_formula(words, K_f, D, seed):
    ft = oracle_frames(Sentence.from_words(words), K_f, D, seed)
    M = len(words)
    assert ft.frames.shape == (M * K_f, D)
    np.testing.assert_allclose(ft.frames, _oracle_reference(words, K_f, D, seed), atol=1e-15)
    assert np.all(np.abs(ft.frames) <= 2.0)
    expected_flags = np.tile(np.eye(K_f)[-1], M)
    np.testing.assert_array_equal(ft.stop_flags, expected_flags)
    assert np.all(np.abs(position_vectors(seed, K_f, D)) <= 0.1)


def test_oracle_future_dependent():
    prefix = [5, 6, 7, 8]
    a = oracle_frames(Sentence.from_words(prefix + [9]), 4, 16, 0)
    b = oracle_frames(Sentence.from_words(prefix + [9, 10, 11]), 4, 16, 0)
    assert not np.allclose(a.frames[:16], b.frames[:16])
    # the first word is undeclined regardless of length
    np.testing.assert_array_equal(a.frames[:4], b.frames[:4])


def test_oracle_errors():
    s = Sentence.from_words([3, 70])
    with pytest.raises(VocabularyError):
        oracle_frames(s, 4, 16, 0, vocab_size=66)
    with pytest.raises(ConfigError):
        oracle_frames(s, 0, 16)
    with pytest.raises(ConfigError):
        oracle_frames(s, 4, 1)


def test_segment_flags():
    ft = oracle_frames(Sentence.from_words([3, 4, 5]), 4, 8, 0)
    frames, flags = ft.segment(1, 2)
    np.testing.assert_array_equal(frames, ft.frames[4:12])
    np.testing.assert_array_equal(flags, [0, 0, 0, 0, 0, 0, 0, 1])
