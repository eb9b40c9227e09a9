"""Trained artifacts shared across test modules, built once per session.

Each builder records its wall-clock cost in ``TIMINGS`` so the acceptance
tests can report stage runtimes.
"""

import time
from functools import lru_cache

from inctts.corpus import generate_corpus
from inctts.distill import DistillConfig, train_student
from inctts.lm import LMTrainConfig, SamplerConfig, train_lm
from inctts.tts import TeacherDims, TeacherTrainConfig, train_teacher

TEST_SENTENCES = 100
LM_ITERS = 400
TEACHER_PHASE1 = 1200
TEACHER_PHASE2 = 240
TEACHER_BATCH = 32
STUDENT_ITERS = 600

TIMINGS: dict[tuple, float] = {}


def _timed(key, fn):
    t0 = time.perf_counter()
    out = fn()
    TIMINGS[key] = time.perf_counter() - t0
    return out


@lru_cache(maxsize=None)
def corpus(seed: int):
    c = generate_corpus(seed)
    train, test = c.split(TEST_SENTENCES)
    return c, train.sentences, test.sentences


@lru_cache(maxsize=None)
def lm(seed: int):
    c, train, _ = corpus(seed)
    return _timed(("lm", seed), lambda: train_lm(
        train, len(c.vocab), LMTrainConfig(iters=LM_ITERS, seed=seed)).model)


@lru_cache(maxsize=None)
def teacher(seed: int):
    c, train, _ = corpus(seed)
    model = lm(seed)
    cfg = TeacherTrainConfig(phase1_iters=TEACHER_PHASE1, phase2_iters=TEACHER_PHASE2,
                             batch=TEACHER_BATCH, seed=seed)
    return _timed(("teacher", seed), lambda: train_teacher(
        train, TeacherDims(vocab_size=len(c.vocab)), cfg, model, SamplerConfig()))


@lru_cache(maxsize=None)
def student(seed: int, mode: str = "pseudo", size: str = "small", iters: int = STUDENT_ITERS,
            lam: float = 1.0):
    _, train, _ = corpus(seed)
    t = teacher(seed).model
    model = lm(seed) if mode == "pseudo" else None
    cfg = DistillConfig(lam=lam, size=size, iters=iters, seed=seed)
    return _timed(("student", seed, mode, size, iters, lam),
                  lambda: train_student(t, model, train, cfg, mode=mode))
