"""Evaluation: embedding similarity curves, latency traces and frame-domain
quality per policy."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .corpus import Sentence, oracle_frames
from .distill import StudentNet, WordEmbeddingTable, build_window_set, teacher_targets
from .errors import EmptyInputError, UndefinedSimilarityError
from .lm import LanguageModel, SamplerConfig
from .pipeline import Models, PipelineConfig, Policy, incremental_synthesize, segment_sentence
from .tts import TeacherModel

log = logging.getLogger(__name__)

MIN_BUCKET = 10


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _row_cosines(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return np.clip(np.einsum("bi,bi->b", A, B) / (na * nb), -1.0, 1.0)


# ---------------------------------------------------------------------------
# Similarity curves
# ---------------------------------------------------------------------------


@dataclass
class SimilarityCurve:
    steps: list[int]
    mean: list[float]
    std: list[float]
    count: list[int]
    mode: str = "pseudo"

    def as_rows(self):
        return [
            {"t": t, "mean": m, "std": s, "count": c}
            for t, m, s, c in zip(self.steps, self.mean, self.std, self.count)
        ]


def step_windows(sentences: Sequence[Sentence], N: int):
    """``(sentence_index, start, width)`` for every synthesis step, plus its ``t``."""
    windows, steps = [], []
    for si, s in enumerate(sentences):
        for seg in segment_sentence(s, N):
            windows.append((si, seg.start, len(seg.words)))
            steps.append(seg.t)
    return windows, np.array(steps)


def bucket_curve(values: np.ndarray, steps: np.ndarray, mode: str,
                 min_count: int = MIN_BUCKET) -> SimilarityCurve:
    """Per-step mean and std; buckets with fewer than ``min_count`` samples are dropped."""
    curve = SimilarityCurve([], [], [], [], mode)
    for t in np.unique(steps):
        v = values[steps == t]
        if len(v) < min_count:
            continue
        curve.steps.append(int(t))
        curve.mean.append(float(v.mean()))
        curve.std.append(float(v.std()))
        curve.count.append(len(v))
    return curve


def similarity_curve(student: StudentNet, table: WordEmbeddingTable, teacher: TeacherModel,
                     lm: LanguageModel | None, sentences: Sequence[Sentence], mode: str = "pseudo",
                     N: int = 2, sampler: SamplerConfig | None = None, seed: int = 0,
                     min_count: int = MIN_BUCKET, chunk: int = 256,
                     predict: Callable | None = None) -> SimilarityCurve:
    """Cosine similarity between student and teacher context embeddings per step.

    ``mode="pseudo"`` scores against teacher embeddings from LM-sampled
    lookahead; ``mode="truth"`` against embeddings from the true next
    ``sampler.max_len`` words. ``predict(observed_list) -> [B, ctx]``
    overrides the student (used to inject reference predictors).
    """
    if not sentences:
        raise EmptyInputError("similarity_curve needs a nonempty test set")
    sampler = sampler or SamplerConfig()
    windows, steps = step_windows(sentences, N)
    ws = build_window_set(teacher, sentences, windows, sampler.max_len, False)
    rng = np.random.default_rng(seed)
    sims = np.empty(len(windows))
    for a in range(0, len(windows), chunk):
        idx = np.arange(a, min(a + chunk, len(windows)))
        e_t = teacher_targets(teacher, ws, idx, mode, lm, sampler, rng)
        obs = [ws.observed[i] for i in idx]
        e_s = predict(obs) if predict is not None else student.predict_batch(table, obs, cached=True)[0]
        sims[idx] = _row_cosines(e_s, e_t)
    return bucket_curve(sims, steps, mode, min_count)


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


@dataclass
class LatencyTrace:
    steps: list[int]
    context_s: list[float]  # cumulative, mean over sentences reaching step t
    decode_s: list[float]
    cumulative_s: list[float]
    words: list[float]  # mean words emitted by step t
    total_s: float  # mean per-sentence total
    wpm: float
    run_totals: list[float] = field(default_factory=list)


def words_per_minute(words: float, seconds: float) -> float:
    if seconds <= 0:
        raise ValueError("elapsed time must be positive")
    return words / (seconds / 60.0)


def timer_resolution_ok(min_resolution: float = 1e-6) -> bool:
    return time.get_clock_info("perf_counter").resolution <= min_resolution


def _trace_one_run(policy: Policy, sentences, models: Models, cfg: PipelineConfig, seed: int):
    """Per-sentence step timings (seconds) for one pass over ``sentences``."""
    pcfg = PipelineConfig(cfg.N, cfg.delta, policy, cfg.max_frames)
    runs = []
    for k, s in enumerate(sentences):
        res = incremental_synthesize(s, pcfg, models, seed=seed + k)
        ctx = np.cumsum([r.context_ms for r in res.timings]) / 1e3
        dec = np.cumsum([r.decode_ms for r in res.timings]) / 1e3
        runs.append((ctx, dec))
    return runs


def latency_benchmark(policies: Sequence[Policy | str], sentences: Sequence[Sentence],
                      models: Models, cfg: PipelineConfig | None = None, repetitions: int = 5,
                      seed: int = 0, warmup: int = 1) -> tuple[dict[str, LatencyTrace], list[str]]:
    """Median-over-repetitions cumulative latency per policy.

    Runs with BLAS limited to one thread. Returns ``(traces, warnings)``.
    """
    if not sentences:
        raise EmptyInputError("latency_benchmark needs a nonempty test set")
    cfg = cfg or PipelineConfig()
    warnings = []
    if not timer_resolution_ok():
        warnings.append("timer resolution coarser than 1 microsecond")
    policies = [Policy.parse(p) if isinstance(p, str) else p for p in policies]
    n_steps = max(len(segment_sentence(s, cfg.N)) for s in sentences)
    words_by_step = np.zeros(n_steps)
    reach = np.zeros(n_steps)
    for s in sentences:
        segs = segment_sentence(s, cfg.N)
        for seg in segs:
            words_by_step[seg.t - 1] += seg.start + len(seg.words)
            reach[seg.t - 1] += 1
    total_words = sum(s.M for s in sentences)
    out = {}
    with threadpool_limits(limits=1):
        for pol in policies:
            for _ in range(warmup):
                _trace_one_run(pol, sentences[:2], models, cfg, seed)
            ctx_reps, dec_reps, totals = [], [], []
            for _ in range(repetitions):
                runs = _trace_one_run(pol, sentences, models, cfg, seed)
                ctx_sum, dec_sum = np.zeros(n_steps), np.zeros(n_steps)
                for ctx, dec in runs:
                    ctx_sum[: len(ctx)] += ctx
                    dec_sum[: len(dec)] += dec
                ctx_reps.append(ctx_sum / reach)
                dec_reps.append(dec_sum / reach)
                totals.append(sum(c[-1] + d[-1] for c, d in runs))
            ctx_med = np.median(ctx_reps, axis=0)
            dec_med = np.median(dec_reps, axis=0)
            total = float(np.median(totals))
            out[str(pol)] = LatencyTrace(
                steps=list(range(1, n_steps + 1)),
                context_s=ctx_med.tolist(),
                decode_s=dec_med.tolist(),
                cumulative_s=(ctx_med + dec_med).tolist(),
                words=(words_by_step / reach).tolist(),
                total_s=total / len(sentences),
                wpm=words_per_minute(total_words, total),
                run_totals=[t / len(sentences) for t in totals],
            )
    return out, warnings


# ---------------------------------------------------------------------------
# Quality
# ---------------------------------------------------------------------------


@dataclass
class QualityResult:
    mse: float  # mean of per-sentence MSE
    sentence_mse: list[float]
    stop_accuracy: float
    runaway: int


def segment_aligned_mse(pred_segments: Sequence[np.ndarray], target, N: int) -> tuple[float, list[int]]:
    """Frame MSE of per-segment predictions against an oracle ``FrameTarget``.

    Each predicted segment is truncated or zero-padded to its oracle length
    (a missing frame costs its squared magnitude). Pad frames added by
    concatenation are not scored. Returns ``(mse, oracle_lengths)``.
    """
    M = target.frames.shape[0] // target.K_f
    sq, count, lengths = 0.0, 0, []
    for k, seg in enumerate(pred_segments):
        start = k * N
        ref, _ = target.segment(start, min(N, M - start))
        F = ref.shape[0]
        lengths.append(F)
        seg = np.asarray(seg)
        aligned = np.zeros_like(ref)
        n = min(F, seg.shape[0])
        aligned[:n] = seg[:n]
        sq += float(((aligned - ref) ** 2).sum())
        count += ref.size
    return sq / count, lengths


def quality_report(policies: Sequence[Policy | str], sentences: Sequence[Sentence],
                   models: Models, cfg: PipelineConfig | None = None, K_f: int = 4,
                   oracle_seed: int = 0, seed: int = 0) -> dict[str, QualityResult]:
    """Free-running incremental synthesis per policy scored against the oracle."""
    if not sentences:
        raise EmptyInputError("quality_report needs a nonempty test set")
    cfg = cfg or PipelineConfig()
    D = models.teacher.dims.frame_dim
    targets = [oracle_frames(s, K_f, D, oracle_seed) for s in sentences]
    out = {}
    for pol in policies:
        pol = Policy.parse(pol) if isinstance(pol, str) else pol
        pcfg = PipelineConfig(cfg.N, cfg.delta, pol, cfg.max_frames)
        mses, hits, segs, runaway = [], 0, 0, 0
        for k, (s, tgt) in enumerate(zip(sentences, targets)):
            res = incremental_synthesize(s, pcfg, models, timer=lambda: 0.0, seed=seed + k)
            mse, lengths = segment_aligned_mse([p.frames for p in res.segments], tgt, cfg.N)
            mses.append(mse)
            for piece, F in zip(res.segments, lengths):
                hits += abs(len(piece) - F) <= 1
                segs += 1
                runaway += piece.runaway
        out[str(pol)] = QualityResult(float(np.mean(mses)), mses, hits / segs, runaway)
    return out
