from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .params import ParameterStore

FD_STEP = 1e-5
# Gradients below this magnitude are compared in absolute terms; central
# differences cannot resolve relative error much beneath it.
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def grad_check(
    closure: Callable[[], float],
    stores: ParameterStore | Iterable[ParameterStore],
    max_coords: int | None = 16,
    rng: np.random.Generator | None = None,
    step: float = FD_STEP,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure`` must evaluate the loss and accumulate analytic gradients into
    the stores. It is called once for the analytic pass and twice per checked
    coordinate. Only trainable entries are checked; ``max_coords`` bounds the
    number of randomly chosen coordinates per entry (``None`` checks all).
    """
    if isinstance(stores, ParameterStore):
        stores = [stores]
    stores = list(stores)
    rng = rng or np.random.default_rng(0)
    wanted = set(names) if names is not None else None

    for s in stores:
        s.zero_grad()
    closure()
    analytic = {
        (k, name): p.grad.copy()
        for k, s in enumerate(stores)
        for name, p in s.items()
        if p.trainable and (wanted is None or name in wanted)
    }

    report = GradCheckReport(0.0, None)
    for (k, name), grad in analytic.items():
        p = stores[k].entries[name]
        flat = p.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(
            n, size=max_coords, replace=False
        )
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = closure()
            flat[idx] = orig - step
            f_minus = closure()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, relative_error(grad.reshape(-1)[idx], numeric))
            report.checked += 1
        label = name if len(stores) == 1 else f"{k}:{name}"
        report.per_param[label] = worst
        if worst >= report.max_rel_error:
            report.max_rel_error, report.worst_param = worst, label
    for s in stores:
        s.zero_grad()
    return report
