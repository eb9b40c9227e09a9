"""Helpers that register layer parameters under a name prefix."""

from __future__ import annotations

import numpy as np

from .functional import LSTMParams
from .params import ParameterStore, glorot_uniform, recurrent_uniform


def add_linear(store: ParameterStore, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    store.add(f"{prefix}.W", glorot_uniform(rng, fan_in, fan_out))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def add_lstm(store: ParameterStore, prefix: str, n_in: int, hidden: int, rng) -> None:
    store.add(f"{prefix}.Wx", recurrent_uniform(rng, (n_in, 4 * hidden)))
    store.add(f"{prefix}.Wh", recurrent_uniform(rng, (hidden, 4 * hidden)))
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # forget-gate bias
    store.add(f"{prefix}.b", b)


def add_blstm(store: ParameterStore, prefix: str, n_in: int, hidden: int, rng) -> None:
    add_lstm(store, f"{prefix}.fwd", n_in, hidden, rng)
    add_lstm(store, f"{prefix}.bwd", n_in, hidden, rng)


def lstm_params(store: ParameterStore, prefix: str) -> LSTMParams:
    return LSTMParams(store[f"{prefix}.Wx"], store[f"{prefix}.Wh"], store[f"{prefix}.b"])


def linear_params(store: ParameterStore, prefix: str):
    return store[f"{prefix}.W"], store[f"{prefix}.b"]


def accumulate(store: ParameterStore, prefix: str, suffixes, grads) -> None:
    if grads is None:
        return
    for suffix, g in zip(suffixes, grads):
        name = f"{prefix}.{suffix}"
        if store.wants_grad(name):
            store.accumulate(name, g)


def accumulate_lstm(store: ParameterStore, prefix: str, grads) -> None:
    accumulate(store, prefix, ("Wx", "Wh", "b"), grads)


def accumulate_linear(store: ParameterStore, prefix: str, dW, db) -> None:
    accumulate(store, prefix, ("W", "b"), (dW, db))


def needs_grads(store: ParameterStore, prefix: str) -> bool:
    return any(p.trainable for n, p in store.items() if n.startswith(prefix + "."))


def pad_ids(seqs, pad: int = 0):
    """Right-pad id sequences into a time-major ``[T, B]`` array plus lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = max(int(lengths.max()) if len(seqs) else 0, 1)
    ids = np.full((T, len(seqs)), pad, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[: len(s), b] = s
    return ids, lengths
