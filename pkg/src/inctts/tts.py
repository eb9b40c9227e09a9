"""Teacher-side synthesis model.

Three parts share one :class:`ParameterStore`:

* encoder: word embedding followed by one BLSTM layer;
* context network: mean-pooled past and lookahead summaries are projected
  to a query that attends over a bank of learned style tokens; the
  attention-weighted token sum is the 256-d context embedding;
* decoder: an LSTM that emits one frame and one stop logit per step, fed
  the previous frame and conditioned on the context embedding and the
  mean-pooled encoding of the current segment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import FrameTarget, Sentence, oracle_frames
from .errors import ConfigError, DimensionError, EmptyInputError, TrainingError, VocabularyError
from .nn_core import (
    AdamState,
    ParameterStore,
    adam_step,
    bce_stop_loss,
    bce_stop_loss_backward,
    blstm_backward,
    blstm_forward,
    lstm_backward,
    lstm_forward,
    masked_mean,
    masked_mean_backward,
    mse_loss,
    mse_loss_backward,
    sigmoid,
    token_attention,
    token_attention_backward,
)
from .nn_core.functional import LSTMParams, _gates, lengths_to_mask
from .nn_core.layers import (
    accumulate_linear,
    accumulate_lstm,
    add_blstm,
    add_linear,
    add_lstm,
    linear_params,
    lstm_params,
    pad_ids,
)

log = logging.getLogger(__name__)

CONTEXT_DIM = 256


@dataclass
class TeacherDims:
    vocab_size: int
    emb: int = 64
    enc_hidden: int = 128  # BLSTM output width (both directions)
    ctx: int = CONTEXT_DIM
    tokens: int = 10
    dec_hidden: int = 256
    frame_dim: int = 16

    def __post_init__(self):
        if self.enc_hidden % 2:
            raise ConfigError("enc_hidden must be even (two BLSTM directions)")
        if self.tokens < 1:
            raise ConfigError("token bank needs at least one token")


@dataclass
class EncoderState:
    hidden: np.ndarray  # [len, enc_hidden]

    def __len__(self) -> int:
        return self.hidden.shape[0]

    def summary(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(self.hidden.shape[1])
        return self.hidden.mean(axis=0)


@dataclass
class TokenBank:
    tokens: np.ndarray  # [T, ctx]
    Wq: np.ndarray  # [2 * enc_hidden, ctx]
    bq: np.ndarray  # [ctx]


@dataclass
class FrameSegment:
    frames: np.ndarray  # [F, D]
    stop_logits: np.ndarray  # [F]
    runaway: bool = False

    def __len__(self) -> int:
        return self.frames.shape[0]


def context_embed(h_past: EncoderState | None, h_future: EncoderState | None,
                  bank: TokenBank, enc_hidden: int | None = None) -> np.ndarray:
    """Attention-weighted token mixture for one example; missing sides pool to zeros."""
    width = enc_hidden or bank.Wq.shape[0] // 2
    parts = []
    for h in (h_past, h_future):
        parts.append(np.zeros(width) if h is None or len(h) == 0 else h.summary())
    q = np.concatenate(parts)[None] @ bank.Wq + bank.bq
    e, _ = token_attention(q, bank.tokens)
    return e[0]


@dataclass
class EncodeCache:
    ids: np.ndarray
    mask: np.ndarray
    blstm: object


@dataclass
class DecodeCache:
    lstm: object
    hs: np.ndarray
    cond: np.ndarray


class TeacherModel:
    def __init__(self, dims: TeacherDims, seed: int = 0, store: ParameterStore | None = None):
        self.dims = dims
        if store is None:
            rng = np.random.default_rng(seed)
            d = dims
            store = ParameterStore()
            store.add("enc.emb", rng.uniform(-0.5, 0.5, size=(d.vocab_size, d.emb)))
            add_blstm(store, "enc.blstm", d.emb, d.enc_hidden // 2, rng)
            add_linear(store, "ctx.query", 2 * d.enc_hidden, d.ctx, rng)
            store.add("ctx.tokens", rng.uniform(-0.5, 0.5, size=(d.tokens, d.ctx)))
            add_lstm(store, "dec.lstm", d.frame_dim + d.ctx + d.enc_hidden, d.dec_hidden, rng)
            add_linear(store, "dec.frame", d.dec_hidden, d.frame_dim, rng)
            add_linear(store, "dec.stop", d.dec_hidden, 1, rng)
        self.store = store

    @classmethod
    def from_store(cls, store: ParameterStore, meta: dict) -> "TeacherModel":
        return cls(TeacherDims(**meta["dims"]), store=store)

    @property
    def bank(self) -> TokenBank:
        W, b = linear_params(self.store, "ctx.query")
        return TokenBank(self.store["ctx.tokens"], W, b)

    # -- encoder --------------------------------------------------------------

    def _check_ids(self, seqs):
        V = self.dims.vocab_size
        for s in seqs:
            for w in s:
                if not 0 <= w < V:
                    raise VocabularyError(f"unknown word id {w}")

    def encode_batch(self, seqs: Sequence[Sequence[int]]):
        """Encode a batch (rows may be empty). Returns ``(states [T,B,H], mask, cache)``."""
        self._check_ids(seqs)
        ids, lengths = pad_ids(seqs)
        T = ids.shape[0]
        x = self.store["enc.emb"][ids]
        out, cache = blstm_forward(
            x, lstm_params(self.store, "enc.blstm.fwd"), lstm_params(self.store, "enc.blstm.bwd"),
            lengths,
        )
        mask = lengths_to_mask(lengths, T)
        return out.states, mask, EncodeCache(ids, mask, cache)

    def encode_batch_backward(self, d_states, cache: EncodeCache) -> None:
        want = self.store.wants_grad("enc.blstm.fwd.Wx")
        dx, gf, gb = blstm_backward(d_states, None, None, cache.blstm, want)
        accumulate_lstm(self.store, "enc.blstm.fwd", gf)
        accumulate_lstm(self.store, "enc.blstm.bwd", gb)
        if self.store.wants_grad("enc.emb"):
            demb = np.zeros_like(self.store["enc.emb"])
            np.add.at(demb, cache.ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
            self.store.accumulate("enc.emb", demb)

    def encode(self, words: Sequence[int]) -> EncoderState:
        if len(words) == 0:
            raise EmptyInputError("encode needs a nonempty word sequence")
        states, _, _ = self.encode_batch([list(words)])
        return EncoderState(states[:, 0, :])

    def pooled(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        """Mean-pooled encodings ``[B, enc_hidden]``; empty rows give zeros."""
        if all(len(s) == 0 for s in seqs):
            return np.zeros((len(seqs), self.dims.enc_hidden))
        states, mask, _ = self.encode_batch(seqs)
        return masked_mean(states, mask)

    # -- context network --------------------------------------------------------

    def context_from_summaries(self, s_past, s_future):
        """Returns ``(e [B, ctx], cache)``."""
        W, b = linear_params(self.store, "ctx.query")
        s = np.concatenate([s_past, s_future], axis=1)
        q = s @ W + b
        e, weights = token_attention(q, self.store["ctx.tokens"])
        return e, (s, q, weights)

    def context_backward(self, de, cache):
        """Returns ``(d_s_past, d_s_future)``."""
        s, q, weights = cache
        W, _ = linear_params(self.store, "ctx.query")
        dq, dtok = token_attention_backward(de, q, self.store["ctx.tokens"], weights)
        if self.store.wants_grad("ctx.tokens"):
            self.store.accumulate("ctx.tokens", dtok)
        accumulate_linear(self.store, "ctx.query", s.T @ dq, dq.sum(axis=0))
        ds = dq @ W.T
        H = self.dims.enc_hidden
        return ds[:, :H], ds[:, H:]

    def context_embed(self, h_past: EncoderState | None, h_future: EncoderState | None):
        return context_embed(h_past, h_future, self.bank, self.dims.enc_hidden)

    def context_batch(self, past: Sequence[Sequence[int]], future: Sequence[Sequence[int]]):
        """Context embeddings ``[B, ctx]`` for batched (past, lookahead) word lists."""
        e, _ = self.context_from_summaries(self.pooled(past), self.pooled(future))
        return e

    # -- decoder ----------------------------------------------------------------

    def _dec_split(self):
        D = self.dims.frame_dim
        Wx, Wh, b = lstm_params(self.store, "dec.lstm")
        return Wx[:D], Wx[D:], Wh, b

    def decode_teacher_forced(self, e, hbar, target_frames, frame_mask):
        """Teacher-forced decoding. ``target_frames [B, F, D]``.

        Returns ``(frames [B, F, D], stop_logits [B, F], cache)``.
        """
        B, F, D = target_frames.shape
        Wx_f, Wx_c, Wh, b = self._dec_split()
        cond = np.concatenate([e, hbar], axis=1)
        prev = np.zeros((F, B, D))
        prev[1:] = target_frames[:, :-1].transpose(1, 0, 2)
        hs, _, lcache = lstm_forward(
            prev, frame_mask.T, LSTMParams(Wx_f, Wh, b), gate_bias=cond @ Wx_c
        )
        Wf, bf = linear_params(self.store, "dec.frame")
        Ws, bs = linear_params(self.store, "dec.stop")
        flat = hs.reshape(F * B, -1)
        frames = (flat @ Wf + bf).reshape(F, B, D).transpose(1, 0, 2)
        stops = (flat @ Ws + bs).reshape(F, B).T
        return frames, stops, DecodeCache(lcache, hs, cond)

    def decode_backward(self, d_frames, d_stops, cache: DecodeCache):
        """Returns ``(de, dhbar)``."""
        B, F, D = d_frames.shape
        Wx_f, Wx_c, Wh, b = self._dec_split()
        Wf, _ = linear_params(self.store, "dec.frame")
        Ws, _ = linear_params(self.store, "dec.stop")
        flat = cache.hs.reshape(F * B, -1)
        df = d_frames.transpose(1, 0, 2).reshape(F * B, D)
        ds = d_stops.T.reshape(F * B, 1)
        accumulate_linear(self.store, "dec.frame", flat.T @ df, df.sum(axis=0))
        accumulate_linear(self.store, "dec.stop", flat.T @ ds, ds.sum(axis=0))
        dhs = (df @ Wf.T + ds @ Ws.T).reshape(F, B, -1)
        want = self.store.wants_grad("dec.lstm.Wx")
        back = lstm_backward(dhs, None, None, cache.lstm, want)
        dcond = back.d_gate_bias @ Wx_c.T
        if want:
            dWx_f, dWh, db = back.param_grads
            dWx = np.concatenate([dWx_f, cache.cond.T @ back.d_gate_bias], axis=0)
            accumulate_lstm(self.store, "dec.lstm", (dWx, dWh, db))
        C = self.dims.ctx
        return dcond[:, :C], dcond[:, C:]

    def decode_segment(self, h_current: EncoderState, e: np.ndarray | None,
                       max_frames: int) -> FrameSegment:
        """Free-running decode; halts after the first frame whose stop
        probability exceeds 0.5, or at ``max_frames`` (flagged as runaway)."""
        if len(h_current) == 0:
            raise EmptyInputError("decode_segment needs a nonempty current segment")
        if max_frames < 1:
            raise ConfigError("max_frames must be >= 1")
        e = np.zeros(self.dims.ctx) if e is None else np.asarray(e)
        if e.shape != (self.dims.ctx,):
            raise DimensionError(f"context embedding must have shape ({self.dims.ctx},)")
        Wx_f, Wx_c, Wh, b = self._dec_split()
        Wf, bf = linear_params(self.store, "dec.frame")
        Ws, bs = linear_params(self.store, "dec.stop")
        H = self.dims.dec_hidden
        bias = np.concatenate([e, h_current.summary()])[None] @ Wx_c + b
        h = np.zeros((1, H))
        c = np.zeros((1, H))
        prev = np.zeros((1, self.dims.frame_dim))
        frames, stops = [], []
        stopped = False
        for _ in range(max_frames):
            i, f, g, o = _gates(prev @ Wx_f + h @ Wh + bias, H)
            c = f * c + i * g
            h = o * np.tanh(c)
            prev = h @ Wf + bf
            stop = (h @ Ws + bs)[0, 0]
            frames.append(prev[0])
            stops.append(stop)
            if sigmoid(stop) > 0.5:
                stopped = True
                break
        return FrameSegment(np.array(frames), np.array(stops), runaway=not stopped)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def target_loss(pred: FrameSegment, target_frames, stop_flags) -> float:
    """Frame MSE plus stop-flag BCE, equally weighted (teacher-forced lengths)."""
    target_frames = np.asarray(target_frames)
    if len(pred) != target_frames.shape[0] or len(stop_flags) != len(pred):
        raise DimensionError(
            f"target_loss: {len(pred)} predicted frames vs {target_frames.shape[0]} targets"
        )
    return mse_loss(pred.frames, target_frames) + bce_stop_loss(pred.stop_logits, stop_flags)


@dataclass
class TeacherBatch:
    past: list[list[int]]
    current: list[list[int]]
    future: list[list[int]]
    frames: np.ndarray  # [B, F, D]
    flags: np.ndarray  # [B, F]
    mask: np.ndarray  # [B, F]


def make_teacher_batch(examples, targets: dict, future_override=None) -> TeacherBatch:
    """Collate ``(sentence_index, start, width)`` examples.

    ``targets`` maps sentence index to ``(Sentence, FrameTarget)``.
    """
    past, current, future, segs = [], [], [], []
    for k, (si, start, width) in enumerate(examples):
        sent, ft = targets[si]
        words = list(sent.words)
        past.append(words[:start])
        current.append(words[start : start + width])
        future.append(words[start + width :] if future_override is None else future_override[k])
        segs.append(ft.segment(start, width))
    F = max(f.shape[0] for f, _ in segs)
    D = segs[0][0].shape[1]
    B = len(examples)
    frames, flags, mask = np.zeros((B, F, D)), np.zeros((B, F)), np.zeros((B, F))
    for b, (f, s) in enumerate(segs):
        n = f.shape[0]
        frames[b, :n], flags[b, :n], mask[b, :n] = f, s, 1.0
    return TeacherBatch(past, current, future, frames, flags, mask)


def _encode_three(model: TeacherModel, batch: TeacherBatch):
    """Encode past, future and current rows in one BLSTM call."""
    B = len(batch.past)
    states, mask, cache = model.encode_batch(batch.past + batch.future + batch.current)
    pooled = masked_mean(states, mask)
    return pooled[:B], pooled[B : 2 * B], pooled[2 * B :], (states, mask, cache)


def teacher_loss(model: TeacherModel, batch: TeacherBatch, backward: bool = False,
                 e_override=None):
    """Masked target loss of the full teacher on a batch.

    With ``backward`` the gradients of every trainable parameter are
    accumulated. ``e_override`` replaces the context network output (used
    for zero-context ablations). Returns ``(loss, parts)``.
    """
    B = len(batch.past)
    s_past, s_fut, hbar, enc = _encode_three(model, batch)
    if e_override is None:
        e, ctx_cache = model.context_from_summaries(s_past, s_fut)
    else:
        e, ctx_cache = e_override, None
    frames, stops, dcache = model.decode_teacher_forced(e, hbar, batch.frames, batch.mask)
    l_mse = mse_loss(frames, batch.frames, batch.mask)
    l_bce = bce_stop_loss(stops, batch.flags, batch.mask)
    loss = l_mse + l_bce
    if backward:
        d_frames = mse_loss_backward(frames, batch.frames, batch.mask)
        d_stops = bce_stop_loss_backward(stops, batch.flags, batch.mask)
        de, dhbar = model.decode_backward(d_frames, d_stops, dcache)
        if ctx_cache is not None:
            ds_past, ds_fut = model.context_backward(de, ctx_cache)
        else:
            ds_past = ds_fut = np.zeros_like(s_past)
        states, mask, cache = enc
        d_pooled = np.concatenate([ds_past, ds_fut, dhbar], axis=0)
        model.encode_batch_backward(masked_mean_backward(d_pooled, mask), cache)
    return loss, {"mse": l_mse, "bce": l_bce}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TeacherTrainConfig:
    phase1_iters: int = 2000
    phase2_iters: int = 400
    lr: float = 1e-3
    batch: int = 64
    window_sizes: tuple[int, ...] = (1, 2, 3)
    hop: int = 1
    seed: int = 0
    K_f: int = 4
    oracle_seed: int = 0
    log_every: int = 0


@dataclass
class TeacherTrainResult:
    model: TeacherModel
    losses: list[float] = field(default_factory=list)
    phase1_len: int = 0


def enumerate_windows(sentences: Sequence[Sentence], window_sizes, hop: int = 1):
    """All ``(sentence_index, start, width)`` training windows."""
    out = []
    for si, s in enumerate(sentences):
        for w in window_sizes:
            for start in range(0, max(s.M - w, 0) + 1, hop):
                if start + w <= s.M:
                    out.append((si, start, w))
    return out


def _batches(n: int, size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for a in range(0, n - size + 1 if n >= size else 1, size):
            yield order[a : a + size]


def train_teacher(sentences: Sequence[Sentence], dims: TeacherDims, cfg: TeacherTrainConfig,
                  lm=None, sampler=None, model: TeacherModel | None = None) -> TeacherTrainResult:
    """Two-phase teacher training.

    Phase 1 trains encoder, context network and decoder jointly with the
    true following words as lookahead. Phase 2 continues with lookahead
    sampled from ``lm`` instead.
    """
    from .lm import sample_lookahead_batch

    if cfg.phase2_iters and lm is None:
        raise ConfigError("teacher phase 2 needs a trained language model")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = TeacherModel(dims, seed=int(rng.integers(2**31)))
    targets = {
        i: (s, oracle_frames(s, cfg.K_f, dims.frame_dim, cfg.oracle_seed, dims.vocab_size))
        for i, s in enumerate(sentences)
    }
    windows = enumerate_windows(sentences, cfg.window_sizes, cfg.hop)
    if not windows:
        raise EmptyInputError("no training windows")
    opt = AdamState(lr=cfg.lr)
    result = TeacherTrainResult(model, phase1_len=cfg.phase1_iters)
    batches = _batches(len(windows), cfg.batch, rng)
    sample_rng = np.random.default_rng(rng.integers(2**63))
    for it in range(cfg.phase1_iters + cfg.phase2_iters):
        ex = [windows[i] for i in next(batches)]
        override = None
        if it >= cfg.phase1_iters:
            observed = [list(targets[si][0].words[: st + w]) for si, st, w in ex]
            override = sample_lookahead_batch(lm, observed, sampler, sample_rng)
        batch = make_teacher_batch(ex, targets, override)
        model.store.zero_grad()
        loss, _ = teacher_loss(model, batch, backward=True)
        if not np.isfinite(loss):
            raise TrainingError("teacher loss diverged", it)
        if any(p.trainable for _, p in model.store.items()):
            adam_step(model.store, opt)
        result.losses.append(loss)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("teacher iter %d loss %.5f", it, loss)
    return result
