"""Incremental synthesis: segment the text, resolve a context embedding per
step under a policy, decode each segment and join the pieces."""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Sentence
from .distill import StudentNet, WordEmbeddingTable, student_predict
from .errors import ConfigError, EmptyInputError, InctTSError
from .lm import LanguageModel, SamplerConfig, sample_lookahead
from .tts import FrameSegment, TeacherModel

POLICY_NAMES = ("independent", "unicontext", "lookahead", "teacher_lm", "student")


@dataclass(frozen=True)
class Policy:
    """``name`` in :data:`POLICY_NAMES`; ``k`` is the lookahead width
    (``None`` for ``lookahead_full``, which sees every remaining word)."""

    name: str
    k: int | None = None

    @classmethod
    def parse(cls, text: str) -> "Policy":
        text = text.strip()
        if text.startswith("lookahead_"):
            arg = text[len("lookahead_") :]
            if arg == "full":
                return cls("lookahead")
            try:
                k = int(arg)
            except ValueError:
                raise ConfigError(f"bad lookahead width in policy {text!r}") from None
            if k < 1:
                raise ConfigError(f"lookahead width must be >= 1, got {k}")
            return cls("lookahead", k)
        if text not in POLICY_NAMES or text == "lookahead":
            raise ConfigError(
                f"unknown policy {text!r}; choose from independent, unicontext, "
                "lookahead_<k>, lookahead_full, teacher_lm, student"
            )
        return cls(text)

    def __str__(self) -> str:
        if self.name == "lookahead":
            return "lookahead_full" if self.k is None else f"lookahead_{self.k}"
        return self.name

    @property
    def causal(self) -> bool:
        return self.name != "lookahead"


@dataclass
class PipelineConfig:
    N: int = 2
    delta: int = 1
    policy: Policy | str = "student"
    max_frames: int = 24

    def __post_init__(self):
        if isinstance(self.policy, str):
            self.policy = Policy.parse(self.policy)
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.max_frames < 1:
            raise ConfigError(f"max_frames must be >= 1, got {self.max_frames}")


@dataclass(frozen=True)
class Segment:
    t: int  # 1-based step index
    start: int  # index of the first word in the sentence
    words: tuple[int, ...]


def segment_sentence(s: Sentence | Sequence[int], N: int) -> list[Segment]:
    """Consecutive ``N``-word chunks (the last may be shorter); EOS excluded."""
    if N < 1:
        raise ConfigError(f"N must be >= 1, got {N}")
    words = tuple(s.words) if isinstance(s, Sentence) else tuple(s)
    if not words:
        raise EmptyInputError("cannot segment an empty sentence")
    return [Segment(k // N + 1, k, words[k : k + N]) for k in range(0, len(words), N)]


def make_training_windows(s: Sentence | Sequence[int], window: int = 3, hop: int = 1):
    """``(observed, current, future)`` word triples from a sliding window.

    ``observed`` holds every word before the window and ``future`` every
    word after it. A sentence shorter than ``window`` yields one window
    covering all of it.
    """
    if window < 1 or hop < 1:
        raise ConfigError("window and hop must be >= 1")
    words = tuple(s.words) if isinstance(s, Sentence) else tuple(s)
    if not words:
        return []
    starts = range(0, max(len(words) - window, 0) + 1, hop)
    return [(words[:a], words[a : a + window], words[a + window :]) for a in starts]


# ---------------------------------------------------------------------------
# Context resolution
# ---------------------------------------------------------------------------


@dataclass
class Models:
    teacher: TeacherModel
    lm: LanguageModel | None = None
    student: StudentNet | None = None
    table: WordEmbeddingTable | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


def require(models: Models, policy: Policy) -> None:
    if models.teacher is None:
        raise ConfigError("every policy needs the teacher model")
    if policy.name == "teacher_lm" and models.lm is None:
        raise ConfigError("policy teacher_lm needs a language model")
    if policy.name == "student" and (models.student is None or models.table is None):
        raise ConfigError("policy student needs a trained student and its word table")


def resolve_context(policy: Policy, observed: Sequence[int], current_len: int,
                    true_future: Sequence[int], models: Models,
                    rng: np.random.Generator | None = None):
    """Context embedding for the step whose segment is ``observed[-current_len:]``.

    Returns ``None`` for the independent policy (zero conditioning).
    ``true_future`` is read only by lookahead policies.
    """
    require(models, policy)
    if policy.name == "independent":
        return None
    if policy.name == "student":
        return student_predict(models.student, models.table, observed)
    teacher = models.teacher
    past = list(observed[: len(observed) - current_len])
    if policy.name == "unicontext":
        future: list[int] = []
    elif policy.name == "lookahead":
        future = list(true_future if policy.k is None else true_future[: policy.k])
    else:  # teacher_lm
        rng = np.random.default_rng(models.sampler.seed) if rng is None else rng
        future = sample_lookahead(models.lm, list(observed), models.sampler, rng)
    return teacher.context_batch([past], [future])[0]


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


@dataclass
class StepTiming:
    t: int
    context_ms: float
    decode_ms: float
    cumulative_ms: float


@dataclass
class SynthesisResult:
    segments: list[FrameSegment]
    frames: np.ndarray
    timings: list[StepTiming]
    policy: str
    delta: int

    @property
    def runaway(self) -> list[bool]:
        return [seg.runaway for seg in self.segments]


def step_rng(seed: int, t: int) -> np.random.Generator:
    """Sampling stream for step ``t``, independent of what earlier steps drew."""
    return np.random.default_rng([seed, t])


def incremental_synthesize(s: Sentence | Sequence[int], cfg: PipelineConfig, models: Models,
                           timer: Callable[[], float] = time.perf_counter,
                           seed: int | None = None) -> SynthesisResult:
    words = list(s.words) if isinstance(s, Sentence) else list(s)
    policy = cfg.policy
    require(models, policy)
    seed = models.sampler.seed if seed is None else seed
    segs = segment_sentence(words, cfg.N)
    out, timings = [], []
    total = 0.0
    for seg in segs:
        end = seg.start + len(seg.words)
        t0 = timer()
        e = resolve_context(policy, words[:end], len(seg.words), words[end:], models,
                            step_rng(seed, seg.t))
        t1 = timer()
        piece = models.teacher.decode_segment(models.teacher.encode(seg.words), e, cfg.max_frames)
        t2 = timer()
        ctx_ms, dec_ms = (t1 - t0) * 1e3, (t2 - t1) * 1e3
        total += ctx_ms + dec_ms
        timings.append(StepTiming(seg.t, ctx_ms, dec_ms, total))
        out.append(piece)
    frames = concat_with_padding([p.frames for p in out], cfg.delta)
    return SynthesisResult(out, frames, timings, str(policy), cfg.delta)


def concat_with_padding(segments: Sequence[np.ndarray], delta: int) -> np.ndarray:
    """Append ``delta`` copies of each segment's last frame, then concatenate."""
    if delta < 0:
        raise ConfigError(f"delta must be >= 0, got {delta}")
    if len(segments) == 0:
        raise EmptyInputError("no segments to concatenate")
    parts = []
    for seg in segments:
        seg = np.asarray(seg, dtype=np.float64)
        if seg.ndim != 2 or seg.shape[0] == 0:
            raise EmptyInputError("every segment needs at least one frame")
        parts.append(seg)
        if delta:
            parts.append(np.repeat(seg[-1:], delta, axis=0))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_FRAMES_MAGIC = b"INCTTSFR"


def write_frames(path: str | Path, frames: np.ndarray, delta: int, policy: str) -> None:
    """Flat little-endian float64 matrix behind a small header."""
    frames = np.ascontiguousarray(frames, dtype="<f8")
    name = policy.encode("utf-8")
    header = _FRAMES_MAGIC + struct.pack("<IIIIH", 1, frames.shape[0], frames.shape[1], delta,
                                         len(name)) + name
    Path(path).write_bytes(header + frames.tobytes())


def read_frames(path: str | Path):
    """Returns ``(frames, delta, policy)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _FRAMES_MAGIC:
        raise InctTSError(f"{path}: not a frames file")
    version, F, D, delta, n = struct.unpack_from("<IIIIH", raw, 8)
    if version != 1:
        raise InctTSError(f"{path}: unsupported frames version {version}")
    off = 8 + struct.calcsize("<IIIIH")
    policy = raw[off : off + n].decode("utf-8")
    data = np.frombuffer(raw, dtype="<f8", offset=off + n)
    if data.size != F * D:
        raise InctTSError(f"{path}: truncated frame data")
    return data.reshape(F, D).astype(np.float64), delta, policy


def write_timings(path: str | Path, timings: Sequence[StepTiming]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "context_ms", "decode_ms", "cumulative_ms"])
        for r in timings:
            w.writerow([r.t, f"{r.context_ms:.6f}", f"{r.decode_ms:.6f}", f"{r.cumulative_ms:.6f}"])


def expected_length(frame_counts: Sequence[int], delta: int) -> int:
    return sum(f + delta for f in frame_counts)
