from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import IncompleteBackwardError
from .params import ParameterStore

_CHUNK = 16384

try:  # optional fused kernel; same operation order as the numpy path
    import numba

    @numba.njit(cache=True)
    def _fused_update(p, g, m, v, b1, b2, c1, c2, step_size, inv_sqrt_corr2, eps):
        for k in range(p.size):
            t = g[k] * c1
            m[k] = m[k] * b1 + t
            t = g[k] * g[k]
            t = t * c2
            v[k] = v[k] * b2 + t
            d = np.sqrt(v[k]) * inv_sqrt_corr2 + eps
            u = m[k] / d
            u = u * step_size
            p[k] = p[k] - u

except ImportError:  # pragma: no cover - exercised only without numba
    _fused_update = None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState, fused: bool | None = None) -> None:
    """Apply one bias-corrected Adam update in place.

    Frozen entries are skipped. Every trainable entry must have received a
    gradient since the last ``zero_grad``. ``fused`` selects the compiled
    kernel (default: whenever numba is importable); both paths are bitwise
    identical.
    """
    fused = _fused_update is not None if fused is None else fused
    if fused and _fused_update is None:
        raise RuntimeError("fused Adam requested but numba is not installed")
    missing = [n for n, p in store.items() if p.trainable and not p.has_grad]
    if missing:
        raise IncompleteBackwardError(f"no gradient for trainable parameters: {missing}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1**t)
    inv_sqrt_corr2 = 1.0 / np.sqrt(1.0 - b2**t)
    buf = np.empty((2, _CHUNK))
    for name, p in store.items():
        if not p.trainable:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        flat_p, flat_g = p.value.reshape(-1), p.grad.reshape(-1)
        flat_m, flat_v = m.reshape(-1), v.reshape(-1)
        if fused:
            _fused_update(flat_p, flat_g, flat_m, flat_v, b1, b2, 1.0 - b1, 1.0 - b2,
                          step_size, inv_sqrt_corr2, state.eps)
            continue
        # cache-sized blocks: each block's dozen passes stay in L2
        for a in range(0, flat_p.size, _CHUNK):
            sl = slice(a, a + _CHUNK)
            pm, pv, g = flat_m[sl], flat_v[sl], flat_g[sl]
            t, u = buf[0, : g.size], buf[1, : g.size]
            pm *= b1
            np.multiply(g, 1.0 - b1, out=t)
            pm += t
            pv *= b2
            np.multiply(g, g, out=t)
            t *= 1.0 - b2
            pv += t
            # lr * m_hat / (sqrt(v_hat) + eps)
            np.sqrt(pv, out=t)
            t *= inv_sqrt_corr2
            t += state.eps
            np.divide(pm, t, out=u)
            u *= step_size
            flat_p[sl] -= u
