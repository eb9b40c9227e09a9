"""Deterministic seed splitting: one global seed, independent per-stage streams."""

from __future__ import annotations

import zlib

import numpy as np

STAGES = ("corpus", "oracle", "lm", "teacher", "distill", "synth", "bench", "eval")


def stage_seed(global_seed: int, stage: str, *extra: int) -> int:
    """Stable 63-bit seed for ``stage``; independent of Python hash salting."""
    key = [int(global_seed), zlib.crc32(stage.encode())] + [int(e) for e in extra]
    return int(np.random.SeedSequence(key).generate_state(2, np.uint64)[0] >> np.uint64(1))


def stage_rng(global_seed: int, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stage_seed(global_seed, stage, *extra))
