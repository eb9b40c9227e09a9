"""Student context predictor and teacher-student training.

The student reads only the observed words. A frozen random word-vector
table feeds a single BLSTM layer; the backward state at the first word and
the forward state at the last word are concatenated and mapped through
dense -> ReLU -> dense to a context embedding of the teacher's width.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import UNK_ID, Sentence, oracle_frames
from .errors import ConfigError, EmptyInputError, TrainingError
from .lm import LanguageModel, SamplerConfig, prefix_states, sample_continuations
from .nn_core import (
    AdamState,
    ParameterStore,
    adam_step,
    bce_stop_loss,
    bce_stop_loss_backward,
    lstm_backward,
    lstm_forward,
    mse_loss,
    mse_loss_backward,
)
from .nn_core.functional import gather_time, lengths_to_mask, relu, relu_backward, reverse_index
from .nn_core.layers import (
    accumulate_linear,
    accumulate_lstm,
    add_blstm,
    add_linear,
    linear_params,
    lstm_params,
    pad_ids,
)
from .tts import CONTEXT_DIM, TeacherModel

log = logging.getLogger(__name__)

WORD_VECTOR_DIM = 300

# size class -> (BLSTM hidden per direction, first dense width)
SIZE_CLASSES = {"small": (100, 200), "medium": (300, 600), "large": (500, 1000)}


@dataclass
class WordEmbeddingTable:
    table: np.ndarray  # [V, 300]
    frozen: bool = True

    @classmethod
    def random(cls, vocab_size: int, seed: int, dim: int = WORD_VECTOR_DIM):
        rng = np.random.default_rng([seed, 0x46415354])
        return cls(rng.uniform(-1.0, 1.0, size=(vocab_size, dim)))

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        ids = np.where((ids >= 0) & (ids < self.table.shape[0]), ids, UNK_ID)
        return self.table[ids]


class StudentNet:
    def __init__(self, size: str = "medium", seed: int = 0, input_dim: int = WORD_VECTOR_DIM,
                 out_dim: int = CONTEXT_DIM, store: ParameterStore | None = None):
        if size not in SIZE_CLASSES:
            raise ConfigError(f"unknown student size {size!r}; choose from {sorted(SIZE_CLASSES)}")
        self.size = size
        self.hidden, self.dense = SIZE_CLASSES[size]
        self.input_dim, self.out_dim = input_dim, out_dim
        if store is None:
            rng = np.random.default_rng(seed)
            store = ParameterStore()
            add_blstm(store, "student.blstm", input_dim, self.hidden, rng)
            add_linear(store, "student.fc1", 2 * self.hidden, self.dense, rng)
            add_linear(store, "student.fc2", self.dense, out_dim, rng)
        self.store = store
        self._proj = None

    @classmethod
    def from_store(cls, store: ParameterStore, meta: dict) -> "StudentNet":
        return cls(meta["size"], input_dim=meta.get("input_dim", WORD_VECTOR_DIM),
                   out_dim=meta.get("out_dim", CONTEXT_DIM), store=store)

    def _projections(self, table: np.ndarray, cached: bool):
        """``table @ Wx`` for both directions, reused while table and weights are unchanged."""
        pf = lstm_params(self.store, "student.blstm.fwd")
        pb = lstm_params(self.store, "student.blstm.bwd")
        if not cached:
            return pf, pb, table @ pf.Wx, table @ pb.Wx
        # in-place optimizer updates keep array identity, so the sums catch them
        key = (id(table), id(pf.Wx), id(pb.Wx), float(pf.Wx.sum()), float(pb.Wx.sum()))
        if self._proj is None or self._proj[0] != key:
            self._proj = (key, table @ pf.Wx, table @ pb.Wx)
        return pf, pb, self._proj[1], self._proj[2]

    def forward(self, table: np.ndarray, ids: np.ndarray, lengths: np.ndarray,
                cached: bool = False):
        """Word ids ``[T, B]`` -> ``(e [B, out_dim], cache)``.

        Equivalent to a BLSTM over ``table[ids]``; the input projections are
        taken once per table row instead of once per position. ``cached``
        keeps the projected table between calls (inference).
        """
        T, B = ids.shape
        mask = lengths_to_mask(lengths, T)
        ids_rev = gather_time(ids, reverse_index(lengths, T))
        pf, pb, proj_f, proj_b = self._projections(table, cached)
        _, (f_last, _), cf = lstm_forward(proj_f[ids], mask, pf, projected=True)
        _, (b_first, _), cb = lstm_forward(proj_b[ids_rev], mask, pb, projected=True)
        z = np.concatenate([b_first, f_last], axis=1)
        W1, b1 = linear_params(self.store, "student.fc1")
        W2, b2 = linear_params(self.store, "student.fc2")
        a1 = z @ W1 + b1
        r1 = relu(a1)
        e = r1 @ W2 + b2
        return e, (table, ids, ids_rev, cf, cb, z, a1, r1)

    def backward(self, de: np.ndarray, cache) -> None:
        table, ids, ids_rev, cf, cb, z, a1, r1 = cache
        W1, _ = linear_params(self.store, "student.fc1")
        W2, _ = linear_params(self.store, "student.fc2")
        accumulate_linear(self.store, "student.fc2", r1.T @ de, de.sum(axis=0))
        da1 = relu_backward(de @ W2.T, a1)
        accumulate_linear(self.store, "student.fc1", z.T @ da1, da1.sum(axis=0))
        dz = da1 @ W1.T
        H = self.hidden
        for name, lcache, tok, d_last in (("fwd", cf, ids, dz[:, H:]), ("bwd", cb, ids_rev, dz[:, :H])):
            back = lstm_backward(None, d_last, None, lcache)
            # padded positions carry zero gradient; scatter only real rows into the table
            real = lcache.mask.reshape(-1) > 0
            rows = tok.reshape(-1)[real]
            onehot = np.zeros((rows.size, table.shape[0]))
            onehot[np.arange(rows.size), rows] = 1.0
            dproj = onehot.T @ back.dxs.reshape(-1, 4 * H)[real]
            _, dWh, db = back.param_grads
            accumulate_lstm(self.store, f"student.blstm.{name}", (table.T @ dproj, dWh, db))

    def predict_batch(self, table: WordEmbeddingTable, observed: Sequence[Sequence[int]],
                      cached: bool = False):
        if any(len(o) == 0 for o in observed):
            raise EmptyInputError("student input needs at least one observed word")
        ids, lengths = pad_ids(observed)
        V = table.table.shape[0]
        ids = np.where((ids >= 0) & (ids < V), ids, UNK_ID)
        return self.forward(table.table, ids, lengths, cached)


def student_parameter_count(size: str, input_dim: int = WORD_VECTOR_DIM,
                            out_dim: int = CONTEXT_DIM) -> int:
    """Closed-form parameter count (one gate bias vector per LSTM direction)."""
    H, D1 = SIZE_CLASSES[size]
    lstm = input_dim * 4 * H + H * 4 * H + 4 * H
    return 2 * lstm + (2 * H * D1 + D1) + (D1 * out_dim + out_dim)


def student_predict(net: StudentNet, table: WordEmbeddingTable, observed: Sequence[int]):
    e, _ = net.predict_batch(table, [list(observed)], cached=True)
    return e[0]


def distil_loss(e_s, e_t) -> float:
    """Squared Euclidean distance, averaged over the batch for 2-D inputs."""
    e_s, e_t = np.asarray(e_s, np.float64), np.asarray(e_t, np.float64)
    d = e_s - e_t
    if d.ndim == 1:
        return float(d @ d)
    return float((d * d).sum() / d.shape[0])


def distil_loss_backward(e_s, e_t) -> np.ndarray:
    d = 2.0 * (e_s - e_t)
    return d if d.ndim == 1 else d / d.shape[0]


def combined_loss(l_target: float, l_distil: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return l_distil
    if lam == 0.0:
        return l_target
    return (1.0 - lam) * l_target + lam * l_distil


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    lam: float = 1.0
    size: str = "medium"
    iters: int = 2000
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    segment_words: int = 2
    K_f: int = 4
    oracle_seed: int = 0
    table_seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.size not in SIZE_CLASSES:
            raise ConfigError(f"unknown student size {self.size!r}")


def distill_windows(sentences: Sequence[Sentence], N: int):
    """``(sentence_index, start, width)`` windows matching inference segmentation.

    Every ``N``-word window at hop 1, plus each sentence's short final
    segment when ``M`` is not a multiple of ``N``.
    """
    out = []
    for si, s in enumerate(sentences):
        for start in range(0, s.M - N + 1):
            out.append((si, start, N))
        r = s.M % N
        if r or s.M < N:
            out.append((si, s.M - (r or s.M), r or s.M))
    return out


@dataclass
class WindowSet:
    """Per-window data that depends only on frozen teacher parts."""

    observed: list[list[int]]
    s_past: np.ndarray  # [W, enc_hidden] pooled past encodings
    truth_future: list[list[int]]
    hbar: np.ndarray | None = None  # [W, enc_hidden] pooled current-segment encodings
    seg_frames: list[np.ndarray] | None = None
    seg_flags: list[np.ndarray] | None = None
    lm_cache: tuple | None = None  # (logits, h, c) after each observed prefix


def _pooled_chunks(teacher: TeacherModel, seqs, chunk: int = 512) -> np.ndarray:
    parts = [teacher.pooled(seqs[a : a + chunk]) for a in range(0, len(seqs), chunk)]
    return np.concatenate(parts, axis=0)


def build_window_set(teacher: TeacherModel, sentences, windows, lookahead: int,
                     with_targets: bool, K_f: int = 4, oracle_seed: int = 0) -> WindowSet:
    past, observed, truth = [], [], []
    for si, start, width in windows:
        words = list(sentences[si].words)
        past.append(words[:start])
        observed.append(words[: start + width])
        truth.append(words[start + width : start + width + lookahead])
    ws = WindowSet(observed, _pooled_chunks(teacher, past), truth)
    if with_targets:
        ws.hbar = _pooled_chunks(teacher, [o[st:] for o, (_, st, _) in zip(observed, windows)])
        ws.seg_frames, ws.seg_flags = [], []
        cache = {}
        for si, start, width in windows:
            if si not in cache:
                cache[si] = oracle_frames(sentences[si], K_f, teacher.dims.frame_dim, oracle_seed)
            f, fl = cache[si].segment(start, width)
            ws.seg_frames.append(f)
            ws.seg_flags.append(fl)
    return ws


def teacher_targets(teacher: TeacherModel, ws: WindowSet, idx, mode: str,
                    lm: LanguageModel | None, sampler: SamplerConfig,
                    rng: np.random.Generator | None) -> np.ndarray:
    """Teacher context embeddings ``[B, ctx]`` for windows ``idx``."""
    if mode == "pseudo":
        if ws.lm_cache is None:
            ws.lm_cache = prefix_states(lm, ws.observed)
        logits, h, c = ws.lm_cache
        state = [(h[k, idx], c[k, idx]) for k in range(h.shape[0])]
        future = sample_continuations(lm, logits[idx], state, sampler, rng)
    elif mode == "truth":
        future = [ws.truth_future[i] for i in idx]
    else:
        raise ConfigError(f"unknown distillation mode {mode!r}")
    e, _ = teacher.context_from_summaries(ws.s_past[idx], teacher.pooled(future))
    return e


def _collate_segments(ws: WindowSet, idx):
    F = max(ws.seg_frames[i].shape[0] for i in idx)
    D = ws.seg_frames[idx[0]].shape[1]
    frames, flags, mask = np.zeros((len(idx), F, D)), np.zeros((len(idx), F)), np.zeros((len(idx), F))
    for b, i in enumerate(idx):
        n = ws.seg_frames[i].shape[0]
        frames[b, :n], flags[b, :n], mask[b, :n] = ws.seg_frames[i], ws.seg_flags[i], 1.0
    return frames, flags, mask


def student_objective(student: StudentNet, table: WordEmbeddingTable, teacher: TeacherModel,
                      ws: WindowSet, idx, e_t: np.ndarray, lam: float, backward: bool = False,
                      with_target: bool | None = None):
    """Combined objective on windows ``idx`` given teacher targets ``e_t``.

    The target loss decodes each window's segment teacher-forced from the
    student's embedding through the teacher's decoder; gradients reach the
    student only, through that embedding. Returns
    ``(combined, l_distil, l_target)`` with ``l_target`` NaN when skipped.
    """
    e_s, cache = student.predict_batch(table, [ws.observed[i] for i in idx])
    l_d = distil_loss(e_s, e_t)
    de = lam * distil_loss_backward(e_s, e_t) if lam > 0 else np.zeros_like(e_s)
    need_target = lam < 1.0 if with_target is None else (with_target or lam < 1.0)
    l_t = float("nan")
    if need_target:
        frames, flags, mask = _collate_segments(ws, idx)
        pf, ps, dcache = teacher.decode_teacher_forced(e_s, ws.hbar[idx], frames, mask)
        l_t = mse_loss(pf, frames, mask) + bce_stop_loss(ps, flags, mask)
        if backward and lam < 1.0:
            d_frames = (1.0 - lam) * mse_loss_backward(pf, frames, mask)
            d_stops = (1.0 - lam) * bce_stop_loss_backward(ps, flags, mask)
            de_t, _ = teacher.decode_backward(d_frames, d_stops, dcache)
            de = de + de_t
    total = combined_loss(l_t if lam < 1.0 else 0.0, l_d, lam)
    if backward:
        student.backward(de, cache)
    return total, l_d, l_t


@dataclass
class StudentTrainResult:
    student: StudentNet
    table: WordEmbeddingTable
    progress: list[tuple[int, float, float, float]] = field(default_factory=list)
    frozen_ok: bool = True


def frozen_copy(teacher: TeacherModel) -> TeacherModel:
    t = TeacherModel(teacher.dims, store=teacher.store.copy())
    t.store.freeze()
    return t


def initial_student(teacher: TeacherModel, cfg: DistillConfig,
                    rng: np.random.Generator | None = None):
    """The untrained student and word table that ``train_student`` starts from."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    student = StudentNet(cfg.size, seed=int(rng.integers(2**31)), out_dim=teacher.dims.ctx)
    return student, WordEmbeddingTable.random(teacher.dims.vocab_size, cfg.table_seed)


def train_student(teacher: TeacherModel, lm: LanguageModel | None, sentences: Sequence[Sentence],
                  cfg: DistillConfig, sampler: SamplerConfig | None = None,
                  mode: str = "pseudo") -> StudentTrainResult:
    """Distil the teacher's context network into a :class:`StudentNet`.

    ``mode="pseudo"`` targets use lookahead sampled from ``lm``;
    ``mode="truth"`` targets use the true next ``sampler.max_len`` words.
    Encoder, context network and decoder stay fixed throughout.
    """
    if teacher is None:
        raise ConfigError("distillation needs a trained teacher")
    if mode == "pseudo" and lm is None:
        raise ConfigError("pseudo-lookahead distillation needs a language model")
    sampler = sampler or SamplerConfig()
    before = teacher.store.snapshot()
    frozen = frozen_copy(teacher)
    rng = np.random.default_rng(cfg.seed)
    student, table = initial_student(teacher, cfg, rng)
    windows = distill_windows(sentences, cfg.segment_words)
    if not windows:
        raise EmptyInputError("no distillation windows")
    ws = build_window_set(frozen, sentences, windows, sampler.max_len, cfg.lam < 1.0,
                          cfg.K_f, cfg.oracle_seed)
    fixed_targets = None
    if mode == "truth" or sampler.greedy:
        # deterministic targets: one pass up front instead of one per batch
        fixed_targets = np.concatenate([
            teacher_targets(frozen, ws, np.arange(a, min(a + 512, len(windows))), mode,
                            lm, sampler, None)
            for a in range(0, len(windows), 512)
        ])
    obs_len = np.array([len(o) for o in ws.observed])
    sample_rng = np.random.default_rng(rng.integers(2**63))
    opt = AdamState(lr=cfg.lr)
    result = StudentTrainResult(student, table)
    order, pos = rng.permutation(len(windows)), 0
    for it in range(cfg.iters):
        if pos + cfg.batch > len(order):
            order, pos = rng.permutation(len(windows)), 0
        idx = order[pos : pos + cfg.batch]
        pos += cfg.batch
        # longest prefixes first: the recurrent kernels then skip padding without reordering
        idx = idx[np.argsort(-obs_len[idx], kind="stable")]
        if fixed_targets is not None:
            e_t = fixed_targets[idx]
        else:
            e_t = teacher_targets(frozen, ws, idx, mode, lm, sampler, sample_rng)
        student.store.zero_grad()
        log_now = cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iters - 1)
        total, l_d, l_t = student_objective(
            student, table, frozen, ws, idx, e_t, cfg.lam, backward=True,
            with_target=bool(log_now) and ws.hbar is not None,
        )
        if not np.isfinite(total):
            raise TrainingError("distillation loss diverged", it)
        adam_step(student.store, opt)
        if log_now:
            result.progress.append((it, l_d, l_t, total))
            log.info("distill iter %d l_distil %.5f l_target %.5f", it, l_d, l_t)
    result.frozen_ok = all(
        np.array_equal(before[n], teacher.store[n]) and np.array_equal(before[n], frozen.store[n])
        for n in before
    )
    return result


def train_student_without_lm(teacher: TeacherModel, sentences, cfg: DistillConfig,
                             sampler: SamplerConfig | None = None) -> StudentTrainResult:
    return train_student(teacher, None, sentences, cfg, sampler, mode="truth")


def heldout_distil_loss(student: StudentNet, table: WordEmbeddingTable, teacher: TeacherModel,
                        lm: LanguageModel | None, sentences, N: int, sampler: SamplerConfig,
                        mode: str = "pseudo", seed: int = 0, chunk: int = 256) -> float:
    """Mean distillation loss over all windows of ``sentences`` (fixed sampling seed)."""
    windows = distill_windows(sentences, N)
    ws = build_window_set(teacher, sentences, windows, sampler.max_len, False)
    rng = np.random.default_rng(seed)
    total = 0.0
    for a in range(0, len(windows), chunk):
        idx = np.arange(a, min(a + chunk, len(windows)))
        e_t = teacher_targets(teacher, ws, idx, mode, lm, sampler, rng)
        e_s, _ = student.predict_batch(table, [ws.observed[i] for i in idx])
        total += distil_loss(e_s, e_t) * len(idx)
    return total / len(windows)


def student_store(student: StudentNet, table: WordEmbeddingTable) -> ParameterStore:
    """Checkpointable store: student parameters plus the frozen word table."""
    store = ParameterStore()
    for name, p in student.store.items():
        store.add(name, p.value, p.trainable)
    store.add("word_table", table.table, trainable=False)
    return store


def student_from_store(store: ParameterStore, meta: dict):
    """Inverse of :func:`student_store`; returns ``(StudentNet, WordEmbeddingTable)``."""
    own = ParameterStore()
    for name, p in store.items():
        if name != "word_table":
            own.add(name, p.value, p.trainable)
    return StudentNet.from_store(own, meta), WordEmbeddingTable(store["word_table"].copy())
