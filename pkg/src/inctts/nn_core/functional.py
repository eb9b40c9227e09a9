"""Differentiable numeric kernels with hand-written backward passes.

Conventions: batch-major 2-D activations ``[B, F]`` and time-major 3-D
sequences ``[T, B, F]``. LSTM gate blocks are packed as ``[i | f | o | g]``
along the last axis of ``Wx [I, 4H]``, ``Wh [H, 4H]`` and ``b [4H]``.
Variable-length batches are right-padded; ``mask[t, b]`` is 1.0 for real
steps. On padded steps the recurrent state is carried through unchanged, so
the final state of a row is its state at its last real step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ..errors import DimensionError, EmptyInputError, NumericError


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0.0)


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``y = x W + b`` row-wise.

    Uses a fixed-order reduction (no BLAS), so every output row is bitwise
    identical whether it is computed alone or inside a larger batch. The
    batched training kernels below use BLAS matmul for throughput instead.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"x must be 2-D [B, I], got shape {x.shape}")
    if W.ndim != 2 or W.shape[0] != x.shape[1]:
        raise DimensionError(f"W has shape {W.shape}, expected ({x.shape[1]}, O)")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"b has shape {b.shape}, expected ({W.shape[1]},)")
    return np.einsum("bi,io->bo", x, W) + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns ``(dx, dW, db)``."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


class LSTMParams(NamedTuple):
    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]


_GATE_SCALE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gate_scale(H: int):
    if H not in _GATE_SCALE:
        scale = np.ones(4 * H)
        scale[: 3 * H] = 0.5
        shift = np.zeros(4 * H)
        shift[: 3 * H] = 0.5
        _GATE_SCALE[H] = (scale, shift)
    return _GATE_SCALE[H]


def _activate(z: np.ndarray, H: int) -> np.ndarray:
    """In place: sigmoid on the ``i, f, o`` blocks, tanh on ``g``.

    ``σ(x) = (1 + tanh(x / 2)) / 2``, so one tanh pass over whole rows
    covers all four blocks.
    """
    scale, shift = _gate_scale(H)
    z *= scale
    np.tanh(z, out=z)
    z *= scale
    z += shift
    return z


def _gates(z: np.ndarray, H: int):
    a = _activate(np.array(z, dtype=np.float64), H)
    return a[:, :H], a[:, H : 2 * H], a[:, 3 * H :], a[:, 2 * H : 3 * H]


def lstm_cell_step(x_t, h_prev, c_prev, params: LSTMParams):
    """One LSTM step. Returns ``(h_t, c_t)``.

    ``i = σ(z_i)``, ``f = σ(z_f)``, ``o = σ(z_o)``, ``g = tanh(z_g)`` with
    ``z = x_t Wx + h_prev Wh + b``; ``c_t = f c_prev + i g``,
    ``h_t = o tanh(c_t)``.
    """
    Wx, Wh, b = params
    H = Wh.shape[0]
    if Wx.shape[1] != 4 * H or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(
            f"gate parameters do not conform: Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}"
        )
    if x_t.shape[-1] != Wx.shape[0]:
        raise DimensionError(f"x_t has width {x_t.shape[-1]}, Wx expects {Wx.shape[0]}")
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise DimensionError(f"state width must be {H}")
    for name, arr in (("x_t", x_t), ("h_prev", h_prev), ("c_prev", c_prev)):
        _check_finite(name, arr)
    i, f, g, o = _gates(x_t @ Wx + h_prev @ Wh + b, H)
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


@dataclass
class LSTMCache:
    xs: np.ndarray
    mask: np.ndarray
    params: LSTMParams
    act: np.ndarray  # [T, B, 4H] activated gates (rows >= active[t] unused)
    c_prev: np.ndarray
    tanh_c: np.ndarray
    h_prev: np.ndarray
    active: np.ndarray  # [T] number of leading real rows
    order: np.ndarray | None  # row permutation applied internally, if any
    has_gate_bias: bool = False
    projected: bool = False


class LSTMBackward(NamedTuple):
    dxs: np.ndarray | None
    param_grads: tuple | None  # (dWx, dWh, db)
    dh0: np.ndarray
    dc0: np.ndarray
    d_gate_bias: np.ndarray | None


def _row_order(mask: np.ndarray):
    """Permutation making every step's real rows a leading block, or None.

    Requires right-padded rows (real steps form a prefix in time). Returns
    ``(order or None, active [T])``.
    """
    lengths = mask.sum(axis=0).astype(np.int64)
    T = mask.shape[0]
    if not np.array_equal(mask, lengths_to_mask(lengths, T)):
        raise DimensionError("mask rows must be right-padded (real steps first)")
    order = None
    if np.any(np.diff(lengths) > 0):
        order = np.argsort(-lengths, kind="stable")
        lengths = lengths[order]
    active = (lengths[None, :] > np.arange(T)[:, None]).sum(axis=1)
    return order, active


def _active_rows(active: np.ndarray, B: int):
    """Flat ``t * B + b`` indices of real rows, or None when nothing is padded."""
    if np.all(active == B):
        return None
    return np.concatenate([t * B + np.arange(n) for t, n in enumerate(active)])


def lstm_forward(xs, mask, params: LSTMParams, h0=None, c0=None, gate_bias=None,
                 projected: bool = False):
    """Run a masked LSTM over ``xs [T, B, I]``.

    With ``projected=True``, ``xs [T, B, 4H]`` already holds the input
    projection ``x Wx`` (``Wx`` is then ignored); useful when inputs come
    from a small table whose projection can be computed once per call.
    ``mask`` must be right-padded. ``gate_bias [B, 4H]`` is an optional
    per-row input added to the gate pre-activations at every step (constant
    conditioning). Returns ``(hs [T, B, H], (h_T, c_T), cache)``; ``hs[t]``
    is the carried state after step ``t``. Rows are processed longest
    first so that padded steps cost nothing.
    """
    Wx, Wh, b = params
    T, B, _ = xs.shape
    H = Wh.shape[0]
    if mask is None:
        mask = np.ones((T, B))
    order, active = _row_order(mask)
    h = np.zeros((B, H)) if h0 is None else np.array(h0, dtype=np.float64)
    c = np.zeros((B, H)) if c0 is None else np.array(c0, dtype=np.float64)
    if order is not None:
        xs, h, c = xs[:, order], h[order], c[order]
        gate_bias = None if gate_bias is None else gate_bias[order]
    if projected:
        if xs.shape[2] != 4 * H:
            raise DimensionError(f"projected inputs must have width {4 * H}")
        act = xs + b
    else:
        act = (xs.reshape(T * B, -1) @ Wx).reshape(T, B, 4 * H)
        act += b
    if gate_bias is not None:
        act += gate_bias[None]
    c_prev, tanh_c, h_prev, hs = (np.empty((T, B, H)) for _ in range(4))
    for t in range(T):
        n = active[t]
        c_prev[t], h_prev[t] = c, h
        if n == 0:
            hs[t] = h
            continue
        a = act[t, :n]
        a += h[:n] @ Wh
        _activate(a, H)
        c_new = a[:, H : 2 * H] * c[:n]
        c_new += a[:, :H] * a[:, 3 * H :]
        tc = np.tanh(c_new, out=tanh_c[t, :n])
        h_new = a[:, 2 * H : 3 * H] * tc
        if n == B:
            h, c = h_new, c_new
        else:
            h, c = h.copy(), c.copy()
            h[:n], c[:n] = h_new, c_new
        hs[t] = h
    cache = LSTMCache(None if projected else xs, mask, params, act, c_prev, tanh_c, h_prev,
                      active, order, gate_bias is not None, projected)
    if order is not None:
        inv = np.argsort(order)
        hs, h, c = hs[:, inv], h[inv], c[inv]
    return hs, (h, c), cache


def lstm_backward(dhs, dh_T, dc_T, cache: LSTMCache, need_param_grads: bool = True,
                  need_input_grads: bool = True):
    """Backprop through :func:`lstm_forward`.

    Parameter gradients are ``None`` when ``need_param_grads`` is false and
    input gradients are ``None`` when ``need_input_grads`` is false. For a
    projected forward pass the input gradient is the gate pre-activation
    gradient and ``dWx`` is ``None``.
    """
    Wx, Wh, _ = cache.params
    T, B, H4 = cache.act.shape
    H = H4 // 4
    order = cache.order
    dh = np.zeros((B, H)) if dh_T is None else np.array(dh_T, dtype=np.float64)
    dc = np.zeros((B, H)) if dc_T is None else np.array(dc_T, dtype=np.float64)
    if order is not None:
        dh, dc = dh[order], dc[order]
        if dhs is not None:
            dhs = dhs[:, order]
    dz = np.zeros((T, B, 4 * H))
    for t in range(T - 1, -1, -1):
        if dhs is not None:
            dh = dh + dhs[t]
        n = cache.active[t]
        if n == 0:
            continue
        a = cache.act[t, :n]
        i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        tc = cache.tanh_c[t, :n]
        dhn = dh[:n]
        dc_new = dhn * o
        dc_new *= 1.0 - tc * tc
        dc_new += dc[:n]
        d = dz[t, :n]
        np.multiply(dc_new * g, i * (1.0 - i), out=d[:, :H])
        np.multiply(dc_new * cache.c_prev[t, :n], f * (1.0 - f), out=d[:, H : 2 * H])
        np.multiply(dhn * tc, o * (1.0 - o), out=d[:, 2 * H : 3 * H])
        np.multiply(dc_new * i, 1.0 - g * g, out=d[:, 3 * H :])
        if n == B:
            dh = d @ Wh.T
            dc = dc_new * f
        else:
            dh, dc = dh.copy(), dc.copy()
            dh[:n] = d @ Wh.T
            dc[:n] = dc_new * f
    dz2 = dz.reshape(T * B, 4 * H)
    if not need_input_grads:
        dxs = None
    elif cache.projected:
        dxs = dz
    else:
        dxs = (dz2 @ Wx.T).reshape(T, B, -1)
    grads = None
    if need_param_grads:
        # padded rows have zero dz; restrict the weight products to real rows
        rows = _active_rows(cache.active, B)
        dz_r = dz2 if rows is None else dz2[rows]
        dWx = None
        if not cache.projected:
            xs2 = cache.xs.reshape(T * B, -1)
            dWx = (xs2 if rows is None else xs2[rows]).T @ dz_r
        hp2 = cache.h_prev.reshape(T * B, H)
        dWh = (hp2 if rows is None else hp2[rows]).T @ dz_r
        grads = (dWx, dWh, dz_r.sum(axis=0))
    d_gate_bias = dz.sum(axis=0) if cache.has_gate_bias else None
    if order is not None:
        inv = np.argsort(order)
        dh, dc = dh[inv], dc[inv]
        if dxs is not None:
            dxs = dxs[:, inv]
        if d_gate_bias is not None:
            d_gate_bias = d_gate_bias[inv]
    return LSTMBackward(dxs, grads, dh, dc, d_gate_bias)


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Index ``[T, B]`` reversing each row's real prefix, identity on padding.

    The mapping is an involution, so the same index undoes itself.
    """
    t = np.arange(T)[:, None]
    lengths = np.asarray(lengths)[None, :]
    return np.where(t < lengths, lengths - 1 - t, t)


def gather_time(xs: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return xs[idx, np.arange(xs.shape[1])[None, :]]


def lengths_to_mask(lengths, T: int) -> np.ndarray:
    return (np.arange(T)[:, None] < np.asarray(lengths)[None, :]).astype(np.float64)


class BLSTMOutput(NamedTuple):
    states: np.ndarray  # [T, B, 2H]: forward ‖ backward state at each position
    fwd_last: np.ndarray  # [B, H]: forward state at each row's last real step
    bwd_first: np.ndarray  # [B, H]: backward state at position 0


@dataclass
class BLSTMCache:
    fwd: LSTMCache
    bwd: LSTMCache
    rev: np.ndarray
    H: int


def blstm_forward(x_seq, fwd: LSTMParams, bwd: LSTMParams, lengths=None):
    """Bidirectional LSTM over ``x_seq`` (``[T, B, I]`` or a list of ``[B, I]``)."""
    if isinstance(x_seq, (list, tuple)):
        if not x_seq:
            raise EmptyInputError("blstm_forward needs a nonempty sequence")
        x_seq = np.stack(x_seq)
    if x_seq.shape[0] == 0:
        raise EmptyInputError("blstm_forward needs a nonempty sequence")
    _check_finite("x_seq", x_seq)
    T, B, _ = x_seq.shape
    if lengths is None:
        lengths = np.full(B, T)
    mask = lengths_to_mask(lengths, T)
    rev = reverse_index(lengths, T)
    hf, (f_last, _), cf = lstm_forward(x_seq, mask, fwd)
    hb_rev, (b_first, _), cb = lstm_forward(gather_time(x_seq, rev), mask, bwd)
    states = np.concatenate([hf, gather_time(hb_rev, rev)], axis=-1)
    return BLSTMOutput(states, f_last, b_first), BLSTMCache(cf, cb, rev, fwd.hidden)


def blstm_backward(d_states, d_fwd_last, d_bwd_first, cache: BLSTMCache, need_param_grads=True,
                   need_input_grads=True):
    """Returns ``(dx_seq or None, fwd_grads, bwd_grads)``."""
    H = cache.H
    dhf = dhb_rev = None
    if d_states is not None:
        dhf = d_states[..., :H]
        dhb_rev = gather_time(d_states[..., H:], cache.rev)
    dxf, gf, *_ = lstm_backward(dhf, d_fwd_last, None, cache.fwd, need_param_grads,
                                need_input_grads)
    dxb_rev, gb, *_ = lstm_backward(dhb_rev, d_bwd_first, None, cache.bwd, need_param_grads,
                                    need_input_grads)
    if not need_input_grads:
        return None, gf, gb
    return dxf + gather_time(dxb_rev, cache.rev), gf, gb


# ---------------------------------------------------------------------------
# Pooling, attention
# ---------------------------------------------------------------------------


def masked_mean(states: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over real steps; rows with no real steps pool to zeros."""
    count = np.maximum(mask.sum(axis=0), 1.0)[:, None]
    return (states * mask[..., None]).sum(axis=0) / count


def masked_mean_backward(d_pooled: np.ndarray, mask: np.ndarray) -> np.ndarray:
    count = np.maximum(mask.sum(axis=0), 1.0)[:, None]
    return mask[..., None] * (d_pooled / count)[None]


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def token_attention(q: np.ndarray, tokens: np.ndarray):
    """Dot-product attention of queries ``[B, d]`` over a bank ``[T, d]``.

    Returns ``(output [B, d], weights [B, T])``; output rows are convex
    combinations of bank rows.
    """
    scale = 1.0 / np.sqrt(tokens.shape[1])
    weights = softmax((q @ tokens.T) * scale)
    return weights @ tokens, weights


def token_attention_backward(d_out, q, tokens, weights):
    """Returns ``(dq, dtokens)``."""
    scale = 1.0 / np.sqrt(tokens.shape[1])
    dw = d_out @ tokens.T
    dscores = weights * (dw - (dw * weights).sum(axis=1, keepdims=True)) * scale
    dq = dscores @ tokens
    dtokens = weights.T @ d_out + dscores.T @ q
    return dq, dtokens


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _frame_mask(pred_shape: Sequence[int], mask):
    """Broadcast a per-frame mask to the loss tensor and return element count."""
    if mask is None:
        return None, float(np.prod(pred_shape))
    mask = np.asarray(mask, dtype=np.float64)
    extra = len(pred_shape) - mask.ndim
    m = mask.reshape(mask.shape + (1,) * extra)
    per = float(np.prod(pred_shape[mask.ndim :])) if extra else 1.0
    return m, max(float(mask.sum()) * per, 1.0)


def mse_loss(pred, target, mask=None) -> float:
    """Mean squared difference over (masked) elements."""
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    m, n = _frame_mask(pred.shape, mask)
    d = pred - target
    sq = d * d if m is None else d * d * m
    return float(sq.sum() / n)


def mse_loss_backward(pred, target, mask=None) -> np.ndarray:
    m, n = _frame_mask(pred.shape, mask)
    d = 2.0 * (pred - target) / n
    return d if m is None else d * m


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_stop_loss(logits, flags, mask=None) -> float:
    """Mean binary cross-entropy of stop logits against 0/1 flags."""
    logits, flags = np.asarray(logits, np.float64), np.asarray(flags, np.float64)
    if logits.shape != flags.shape:
        raise DimensionError(f"bce_stop_loss: logits {logits.shape} vs flags {flags.shape}")
    m, n = _frame_mask(logits.shape, mask)
    terms = _softplus(logits) - flags * logits
    if m is not None:
        terms = terms * m
    return float(terms.sum() / n)


def bce_stop_loss_backward(logits, flags, mask=None) -> np.ndarray:
    m, n = _frame_mask(logits.shape, mask)
    d = (sigmoid(logits) - flags) / n
    return d if m is None else d * m


def cross_entropy(logits, targets, mask=None):
    """Mean token cross-entropy. Returns ``(loss, dlogits)``."""
    logp = log_softmax(logits)
    N = logits.shape[0]
    nll = -logp[np.arange(N), targets]
    m = np.ones(N) if mask is None else np.asarray(mask, np.float64)
    n = max(m.sum(), 1.0)
    loss = float((nll * m).sum() / n)
    d = np.exp(logp)
    d[np.arange(N), targets] -= 1.0
    return loss, d * (m / n)[:, None]
