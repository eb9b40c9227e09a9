"""Word-level LSTM language model and pseudo-lookahead sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import EOS_ID, Sentence
from .errors import ConfigError, EmptyInputError, TrainingError
from .nn_core import AdamState, ParameterStore, adam_step, cross_entropy, lstm_backward, lstm_forward
from .nn_core.functional import LSTMParams, _gates, lengths_to_mask, softmax
from .nn_core.layers import (
    accumulate_linear,
    accumulate_lstm,
    add_linear,
    add_lstm,
    linear_params,
    lstm_params,
    pad_ids,
)

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    max_len: int = 5
    temperature: float = 1.0
    seed: int = 0
    greedy: bool = True  # argmax decoding; False samples with ``temperature``

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError(f"sampler max_len must be >= 1, got {self.max_len}")
        if not self.greedy and not self.temperature > 0:
            raise ConfigError(f"sampler temperature must be > 0, got {self.temperature}")


class LanguageModel:
    """Embedding -> stacked LSTM -> vocabulary projection.

    Token sequences are conditioned on a leading EOS, which doubles as the
    beginning-of-sentence symbol.
    """

    def __init__(self, vocab_size: int, emb: int = 64, hidden: int = 128, layers: int = 1,
                 seed: int = 0, store: ParameterStore | None = None):
        self.vocab_size, self.emb, self.hidden, self.layers = vocab_size, emb, hidden, layers
        if store is None:
            rng = np.random.default_rng(seed)
            store = ParameterStore()
            store.add("lm.emb", rng.uniform(-0.1, 0.1, size=(vocab_size, emb)))
            for k in range(layers):
                add_lstm(store, f"lm.lstm{k}", emb if k == 0 else hidden, hidden, rng)
            add_linear(store, "lm.out", hidden, vocab_size, rng)
        self.store = store

    @property
    def config(self) -> dict:
        return {"vocab_size": self.vocab_size, "emb": self.emb, "hidden": self.hidden,
                "layers": self.layers}

    @classmethod
    def from_store(cls, store: ParameterStore, meta: dict) -> "LanguageModel":
        return cls(meta["vocab_size"], meta["emb"], meta["hidden"], meta["layers"], store=store)

    def _lstm(self, k: int) -> LSTMParams:
        return lstm_params(self.store, f"lm.lstm{k}")

    # -- training -----------------------------------------------------------

    def loss(self, sentences: Sequence[Sentence], backward: bool = False) -> float:
        inputs = [(EOS_ID,) + s.words for s in sentences]
        targets = [s.tokens for s in sentences]
        ids, lengths = pad_ids(inputs)
        tgt, _ = pad_ids(targets)
        T, B = ids.shape
        mask = lengths_to_mask(lengths, T)
        x = self.store["lm.emb"][ids]
        caches = []
        for k in range(self.layers):
            x, _, cache = lstm_forward(x, mask, self._lstm(k))
            caches.append(cache)
        W, b = linear_params(self.store, "lm.out")
        hs = x.reshape(T * B, -1)
        loss, dlogits = cross_entropy(hs @ W + b, tgt.reshape(-1), mask.reshape(-1))
        if not backward:
            return loss
        accumulate_linear(self.store, "lm.out", hs.T @ dlogits, dlogits.sum(axis=0))
        dx = (dlogits @ W.T).reshape(T, B, -1)
        for k in range(self.layers - 1, -1, -1):
            dx, grads, *_ = lstm_backward(dx, None, None, caches[k])
            accumulate_lstm(self.store, f"lm.lstm{k}", grads)
        demb = np.zeros_like(self.store["lm.emb"])
        np.add.at(demb, ids.reshape(-1), dx.reshape(T * B, -1))
        self.store.accumulate("lm.emb", demb)
        return loss

    # -- inference ------------------------------------------------------------

    def initial_state(self, batch: int):
        z = np.zeros((batch, self.hidden))
        return [(z, z) for _ in range(self.layers)]

    def step(self, tokens: np.ndarray, state):
        """Advance one token for each row; returns ``(logits [B, V], state)``."""
        x = self.store["lm.emb"][tokens]
        new_state = []
        for k in range(self.layers):
            Wx, Wh, b = self._lstm(k)
            h, c = state[k]
            i, f, g, o = _gates(x @ Wx + h @ Wh + b, self.hidden)
            c = f * c + i * g
            h = o * np.tanh(c)
            new_state.append((h, c))
            x = h
        W, b = linear_params(self.store, "lm.out")
        return x @ W + b, new_state

    def run_prefix(self, prefixes: Sequence[Sequence[int]]):
        """Consume ``EOS + prefix`` per row. Returns next-token logits and state."""
        ids, lengths = pad_ids([(EOS_ID,) + tuple(p) for p in prefixes])
        T, B = ids.shape
        mask = lengths_to_mask(lengths, T)
        state = self.initial_state(B)
        logits = None
        for t in range(T):
            step_logits, new_state = self.step(ids[t], state)
            m = mask[t][:, None]
            state = [
                (m * h1 + (1 - m) * h0, m * c1 + (1 - m) * c0)
                for (h1, c1), (h0, c0) in zip(new_state, state)
            ]
            logits = step_logits if logits is None else m * step_logits + (1 - m) * logits
        return logits, state

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        """Next-token logits after ``prefix`` (recomputed from scratch)."""
        return self.run_prefix([prefix])[0][0]

    def next_distribution(self, prefix: Sequence[int]) -> np.ndarray:
        return softmax(self.next_logits(prefix))


class CostInflatedLM(LanguageModel):
    """A language model with the base model's exact predictions but extra cost.

    Ballast LSTM layers of width ``base.hidden * width_multiplier`` run
    alongside the base model and feed the logits through an all-zero
    projection, so sampled tokens are unchanged while each step costs what a
    much larger model would. Used only for latency benchmarking.
    """

    def __init__(self, base: LanguageModel, extra_layers: int = 4, width_multiplier: int = 8,
                 seed: int = 0):
        self.base = base
        self.vocab_size, self.emb, self.hidden = base.vocab_size, base.emb, base.hidden
        self.layers = base.layers
        self.extra_layers = extra_layers
        self.ballast_width = base.hidden * width_multiplier
        rng = np.random.default_rng(seed)
        self.store = base.store
        self.ballast = ParameterStore()
        for k in range(extra_layers):
            add_lstm(self.ballast, f"ballast{k}", base.emb if k == 0 else self.ballast_width,
                     self.ballast_width, rng)
        self.ballast.add("ballast.out", np.zeros((self.ballast_width, base.vocab_size)))

    def initial_state(self, batch: int):
        z = np.zeros((batch, self.ballast_width))
        return (self.base.initial_state(batch), [(z, z) for _ in range(self.extra_layers)])

    def step(self, tokens, state):
        base_state, ballast_state = state
        logits, base_state = self.base.step(tokens, base_state)
        x = self.base.store["lm.emb"][tokens]
        new_ballast = []
        for k in range(self.extra_layers):
            Wx, Wh, b = lstm_params(self.ballast, f"ballast{k}")
            h, c = ballast_state[k]
            i, f, g, o = _gates(x @ Wx + h @ Wh + b, self.ballast_width)
            c = f * c + i * g
            h = o * np.tanh(c)
            new_ballast.append((h, c))
            x = h
        return logits + x @ self.ballast["ballast.out"], (base_state, new_ballast)

    def run_prefix(self, prefixes):
        if len(prefixes) != 1:
            raise ValueError("CostInflatedLM runs one prefix at a time")
        state = self.initial_state(1)
        logits = None
        for tok in (EOS_ID,) + tuple(prefixes[0]):
            logits, state = self.step(np.array([tok]), state)
        return logits, state


def _choose(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.greedy:
        return np.argmax(logits, axis=1)
    p = softmax(logits / cfg.temperature)
    cum = np.cumsum(p, axis=1)
    u = rng.random(len(p))[:, None] * cum[:, -1:]
    return np.minimum((cum <= u).sum(axis=1), p.shape[1] - 1)


def sample_lookahead_batch(lm: LanguageModel, observed: Sequence[Sequence[int]],
                           cfg: SamplerConfig, rng: np.random.Generator) -> list[list[int]]:
    """Ancestral sampling of up to ``cfg.max_len`` words after each prefix.

    A row stops as soon as EOS is drawn; EOS itself is never returned.
    """
    if any(len(o) == 0 for o in observed):
        raise EmptyInputError("sample_lookahead needs a nonempty observed prefix")
    logits, state = lm.run_prefix(observed)
    return sample_continuations(lm, logits, state, cfg, rng)


def sample_continuations(lm: LanguageModel, logits: np.ndarray, state, cfg: SamplerConfig,
                         rng: np.random.Generator) -> list[list[int]]:
    """Sample from precomputed next-token ``logits [B, V]`` and LM ``state``."""
    B = logits.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    for step in range(cfg.max_len):
        tok = _choose(logits, cfg, rng)
        alive &= tok != EOS_ID
        for b in np.flatnonzero(alive):
            out[b].append(int(tok[b]))
        if not alive.any() or step == cfg.max_len - 1:
            break
        logits, state = lm.step(np.where(alive, tok, EOS_ID), state)
    return out


def prefix_states(lm: LanguageModel, prefixes: Sequence[Sequence[int]], chunk: int = 512):
    """LM logits and per-layer ``(h, c)`` after each prefix, row-stacked."""
    logits, hs, cs = [], [], []
    for a in range(0, len(prefixes), chunk):
        lg, st = lm.run_prefix(prefixes[a : a + chunk])
        logits.append(lg)
        hs.append(np.stack([h for h, _ in st]))
        cs.append(np.stack([c for _, c in st]))
    return np.concatenate(logits), np.concatenate(hs, axis=1), np.concatenate(cs, axis=1)


def sample_lookahead(lm: LanguageModel, observed: Sequence[int], cfg: SamplerConfig,
                     rng: np.random.Generator | None = None) -> list[int]:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return sample_lookahead_batch(lm, [observed], cfg, rng)[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class LMTrainConfig:
    emb: int = 64
    hidden: int = 128
    iters: int = 400
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    log_every: int = 0


@dataclass
class LMTrainResult:
    model: LanguageModel
    losses: list[float] = field(default_factory=list)


def lm_cross_entropy(lm: LanguageModel, sentences: Sequence[Sentence], batch: int = 256) -> float:
    """Token-weighted mean cross-entropy (nats) over ``sentences``."""
    total = count = 0.0
    for a in range(0, len(sentences), batch):
        chunk = sentences[a : a + batch]
        n = sum(len(s.tokens) for s in chunk)
        total += lm.loss(chunk) * n
        count += n
    return total / count


def train_lm(sentences: Sequence[Sentence], vocab_size: int, cfg: LMTrainConfig) -> LMTrainResult:
    if not sentences:
        raise EmptyInputError("train_lm needs a nonempty corpus")
    rng = np.random.default_rng(cfg.seed)
    lm = LanguageModel(vocab_size, cfg.emb, cfg.hidden, seed=int(rng.integers(2**31)))
    opt = AdamState(lr=cfg.lr)
    result = LMTrainResult(lm)
    order = rng.permutation(len(sentences))
    pos = 0
    for it in range(cfg.iters):
        if pos + cfg.batch > len(order):
            order, pos = rng.permutation(len(sentences)), 0
        idx = order[pos : pos + cfg.batch]
        pos += cfg.batch
        lm.store.zero_grad()
        loss = lm.loss([sentences[i] for i in idx], backward=True)
        if not np.isfinite(loss):
            raise TrainingError("language-model loss diverged", it)
        adam_step(lm.store, opt)
        result.losses.append(loss)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("lm iter %d loss %.4f", it, loss)
    return result
