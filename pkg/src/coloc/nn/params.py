"""Named parameter collections for the trainable models."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class ParamSet:
    """Ordered map name -> parameter Tensor, each with a same-shaped grad slot."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def load_values(self, values: dict[str, np.ndarray]):
        """Overwrite parameter data in place; shapes must match exactly."""
        missing = set(self._params) ^ set(values)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._params[name].data.shape:
                raise ShapeError(
                    f"parameter {name!r}: expected shape {self._params[name].data.shape}, got {arr.shape}"
                )
            self._params[name].data = arr.copy()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in), the seeded default for all weights."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
