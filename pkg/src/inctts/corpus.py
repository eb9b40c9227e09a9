"""Synthetic corpora, plain-text ingestion and the frame-target oracle.

The oracle stands in for recorded speech. Frame ``j`` of word ``n`` in an
``M``-word sentence is::

    frame(n, j) = SynEmb(w_n) * decl(n, M) + posvec(j)
    decl(n, M)  = 1 - 0.5 * (n - 1) / max(M - 1, 1)

The declination factor makes every frame depend on the total sentence
length, so a synthesizer that only sees a prefix cannot reproduce it
exactly without some estimate of what is still to come.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EmptyInputError, VocabularyError

EOS = "</s>"
UNK = "<unk>"
EOS_ID = 0
UNK_ID = 1

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(i: int) -> str:
    syl = [c + v for c in _CONSONANTS for v in _VOWELS]
    n = len(syl)
    a, b = divmod(i, n)
    word = syl[b] + syl[(b * 29 + a) % n]
    return word + str(a // n) if a >= n else word


@dataclass
class Vocabulary:
    words: list[str]
    indices: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.words[:2] != [EOS, UNK]:
            raise ConfigError("vocabulary must start with the reserved EOS and UNK entries")
        if len(set(self.words)) != len(self.words):
            raise ConfigError("vocabulary has duplicate words")
        self.indices = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        return cls([EOS, UNK] + [w for w in words if w not in (EOS, UNK)])

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocabulary":
        return cls.from_words(_pseudo_word(i) for i in range(vocab_size))

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.indices.get(w, UNK_ID) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        try:
            return [self.words[i] for i in ids]
        except IndexError as exc:
            raise VocabularyError(f"word id out of range for vocabulary of {len(self)}") from exc

    def check(self, ids: Iterable[int]) -> None:
        for i in ids:
            if not 0 <= i < len(self.words):
                raise VocabularyError(f"unknown word id {i}")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[int, ...]

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(toks) < 2 or toks[-1] != EOS_ID or EOS_ID in toks[:-1]:
            raise EmptyInputError("a sentence is >= 1 word followed by exactly one final EOS")

    @classmethod
    def from_words(cls, ids: Sequence[int]) -> "Sentence":
        return cls(tuple(ids) + (EOS_ID,))

    @property
    def words(self) -> tuple[int, ...]:
        return self.tokens[:-1]

    @property
    def M(self) -> int:
        return len(self.tokens) - 1


@dataclass
class MarkovChain:
    transition: np.ndarray  # [V, V] row-stochastic over word ids
    first_word: int  # offset of the first regular word id

    @property
    def stationary(self) -> np.ndarray:
        return stationary_distribution(self.transition)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(P.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, k])
    pi = np.abs(pi)
    return pi / pi.sum()


def build_chain(seed: int, vocab_size: int, successors: int = 6, smoothing: float = 0.1):
    """Sparse random first-order chain over ``vocab_size`` regular words.

    Each word favours a handful of successors; ``smoothing`` mixes in a
    uniform distribution so the chain is irreducible and aperiodic.
    """
    rng = np.random.default_rng([seed, 0x636861696E])
    k = min(successors, vocab_size)
    P = np.zeros((vocab_size, vocab_size))
    for i in range(vocab_size):
        nxt = rng.choice(vocab_size, size=k, replace=False)
        P[i, nxt] = rng.dirichlet(np.ones(k))
    P = (1.0 - smoothing) * P + smoothing / vocab_size
    return MarkovChain(P, first_word=2)


@dataclass
class Corpus:
    vocab: Vocabulary
    sentences: list[Sentence]
    chain: MarkovChain | None = None

    def split(self, test_count: int) -> tuple["Corpus", "Corpus"]:
        if not 0 < test_count < len(self.sentences):
            raise ConfigError(f"test split {test_count} leaves an empty side")
        cut = len(self.sentences) - test_count
        return (
            Corpus(self.vocab, self.sentences[:cut], self.chain),
            Corpus(self.vocab, self.sentences[cut:], self.chain),
        )


def generate_corpus(
    seed: int, vocab_size: int = 64, sentence_count: int = 1000, length_range=(4, 12)
) -> Corpus:
    """Sample sentences from a seeded Markov chain.

    The first word is drawn from the stationary distribution, so every
    position is marginally stationary. Lengths are uniform over
    ``length_range`` (inclusive) and independent of content.
    """
    lo, hi = length_range
    if vocab_size < 8:
        raise ConfigError(f"vocab_size must be >= 8, got {vocab_size}")
    if not 4 <= lo <= hi <= 30:
        raise ConfigError(f"length_range must satisfy 4 <= lo <= hi <= 30, got {length_range}")
    if sentence_count < 1:
        raise ConfigError("sentence_count must be >= 1")
    vocab = Vocabulary.synthetic(vocab_size)
    chain = build_chain(seed, vocab_size)
    P, pi = chain.transition, chain.stationary
    cum = np.cumsum(P, axis=1)
    cum_pi = np.cumsum(pi)
    rng = np.random.default_rng([seed, 0x73656E74])
    sentences = []
    for _ in range(sentence_count):
        M = int(rng.integers(lo, hi + 1))
        u = rng.random(M)
        w = min(int(np.searchsorted(cum_pi, u[0], side="right")), vocab_size - 1)
        ids = [w]
        for m in range(1, M):
            w = min(int(np.searchsorted(cum[w], u[m], side="right")), vocab_size - 1)
            ids.append(w)
        sentences.append(Sentence.from_words([i + chain.first_word for i in ids]))
    return Corpus(vocab, sentences, chain)


def read_corpus(path, vocab: Vocabulary | None = None, vocab_size: int | None = None) -> Corpus:
    """Ingest a plain-text corpus: one sentence per line, whitespace tokens.

    Text is lowercased. Without an explicit ``vocab`` one is built from the
    ``vocab_size`` most frequent words (ties broken alphabetically); every
    other word maps to UNK.
    """
    lines = [ln.lower().split() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise EmptyInputError(f"no sentences in {path}")
    if vocab is None:
        counts = Counter(w for ln in lines for w in ln if w not in (EOS, UNK))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        vocab = Vocabulary.from_words(ranked[:vocab_size] if vocab_size else ranked)
    return Corpus(vocab, [Sentence.from_words(vocab.encode(ln)) for ln in lines])


def write_corpus(path, corpus: Corpus) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(" ".join(corpus.vocab.decode(s.words)) + "\n" for s in corpus.sentences)
    path.write_text(text, encoding="utf-8")


def write_vocab(path, vocab: Vocabulary) -> None:
    Path(path).write_text("".join(w + "\n" for w in vocab.words[2:]), encoding="utf-8")


def read_vocab(path) -> Vocabulary:
    return Vocabulary.from_words(Path(path).read_text(encoding="utf-8").split())


# ---------------------------------------------------------------------------
# Frame oracle
# ---------------------------------------------------------------------------


@dataclass
class FrameTarget:
    frames: np.ndarray  # [M * K_f, D]
    stop_flags: np.ndarray  # [M * K_f]; 1.0 on each word's final frame
    K_f: int

    def segment(self, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Frames of words ``start .. start+count-1`` (0-based) with a
        segment-level stop target: 1 only on the segment's final frame."""
        a, b = start * self.K_f, (start + count) * self.K_f
        frames = self.frames[a:b]
        flags = np.zeros(b - a)
        flags[-1] = 1.0
        return frames, flags


def declination(n: int, M: int) -> float:
    return 1.0 - 0.5 * (n - 1) / max(M - 1, 1)


@lru_cache(maxsize=None)
def _syn_row(seed: int, word: int, D: int) -> np.ndarray:
    row = np.random.default_rng([seed, 0x53594E, word]).uniform(-1.0, 1.0, size=D)
    row.flags.writeable = False
    return row


@lru_cache(maxsize=None)
def position_vectors(seed: int, K_f: int, D: int) -> np.ndarray:
    pv = np.random.default_rng([seed, 0x504F53]).uniform(-0.1, 0.1, size=(K_f, D))
    pv.flags.writeable = False
    return pv


def syn_embedding(seed: int, word: int, D: int) -> np.ndarray:
    return _syn_row(int(seed), int(word), int(D))


def oracle_frames(
    sentence: Sentence, K_f: int = 4, D: int = 16, seed: int = 0, vocab_size: int | None = None
) -> FrameTarget:
    if K_f < 1 or D < 2:
        raise ConfigError(f"oracle needs K_f >= 1 and D >= 2, got K_f={K_f}, D={D}")
    words = sentence.words
    if vocab_size is not None:
        bad = [w for w in words if not 0 <= w < vocab_size]
        if bad:
            raise VocabularyError(f"unknown word id {bad[0]}")
    elif min(words) < 0:
        raise VocabularyError(f"unknown word id {min(words)}")
    M = len(words)
    pv = position_vectors(int(seed), K_f, D)
    frames = np.empty((M * K_f, D))
    for n, w in enumerate(words, start=1):
        frames[(n - 1) * K_f : n * K_f] = syn_embedding(seed, w, D) * declination(n, M) + pv
    flags = np.zeros(M * K_f)
    flags[K_f - 1 :: K_f] = 1.0
    return FrameTarget(frames, flags, K_f)
