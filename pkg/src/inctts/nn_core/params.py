"""Named parameter storage with paired gradient accumulators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..errors import DimensionError

DTYPE = np.float64


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True
    has_grad: bool = False


@dataclass
class ParameterStore:
    """Ordered map ``name -> Param``.

    Insertion order is preserved and used everywhere parameters are
    iterated (checkpoint layout, optimizer updates), so results never depend
    on hash ordering.
    """

    entries: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value, dtype=DTYPE)
        self.entries[name] = Param(value, np.zeros_like(value), trainable)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def trainable(self, name: str) -> bool:
        return self.entries[name].trainable

    def set_trainable(self, trainable: bool, prefix: str = "") -> None:
        for name, p in self.entries.items():
            if name.startswith(prefix):
                p.trainable = trainable

    def freeze(self, prefix: str = "") -> None:
        self.set_trainable(False, prefix)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        p = self.entries[name]
        if grad.shape != p.value.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {grad.shape}, expected {p.value.shape}"
            )
        p.grad += grad
        p.has_grad = True

    def wants_grad(self, name: str) -> bool:
        return self.entries[name].trainable

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.grad.fill(0.0)
            p.has_grad = False

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(
            p.value.size for p in self.entries.values() if p.trainable or not trainable_only
        )

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self.entries.items():
            out.add(name, p.value.copy(), p.trainable)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.entries.items()}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def recurrent_uniform(rng: np.random.Generator, shape, scale: float = 0.08) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)
