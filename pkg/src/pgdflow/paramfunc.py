"""Scalar parameter functions written as a product of one-dimensional factors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Factor = Optional[Callable[[np.ndarray], np.ndarray]]


def _const_one(x):
    return np.ones_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ParamFunction:
    """scale * prod_j factors[j](mu_j); a None factor means the function does not depend on mu_j."""

    factors: tuple[Factor, ...]
    scale: float = 1.0

    @staticmethod
    def const(n_params: int, value: float = 1.0) -> "ParamFunction":
        return ParamFunction((None,) * n_params, float(value))

    @staticmethod
    def of(n_params: int, j: int, fn: Callable, scale: float = 1.0) -> "ParamFunction":
        f = [None] * n_params
        f[j] = fn
        return ParamFunction(tuple(f), scale)

    @property
    def n_params(self) -> int:
        return len(self.factors)

    def factor_values(self, j: int, x) -> np.ndarray:
        """Values of the j-th one-dimensional factor (without scale)."""
        fn = self.factors[j]
        x = np.asarray(x, dtype=float)
        return _const_one(x) if fn is None else np.broadcast_to(np.asarray(fn(x), dtype=float), x.shape).copy()

    def __call__(self, mu) -> float | np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.ndim == 1 and self.n_params and mu.shape[0] == self.n_params:
            val = self.scale
            for j in range(self.n_params):
                val = val * float(self.factor_values(j, mu[j]))
            return float(val)
        if mu.ndim == 1 and self.n_params == 0:
            return float(self.scale)
        mu = np.atleast_2d(mu)
        val = np.full(mu.shape[0], self.scale)
        for j in range(self.n_params):
            val = val * self.factor_values(j, mu[:, j])
        return val

    def __mul__(self, other: "ParamFunction") -> "ParamFunction":
        if other.n_params != self.n_params:
            raise ValueError("parameter count mismatch")
        fs = []
        for a, b in zip(self.factors, other.factors):
            if a is None:
                fs.append(b)
            elif b is None:
                fs.append(a)
            else:
                fs.append(lambda x, a=a, b=b: np.asarray(a(x)) * np.asarray(b(x)))
        return ParamFunction(tuple(fs), self.scale * other.scale)

    def scaled(self, c: float) -> "ParamFunction":
        return ParamFunction(self.factors, self.scale * c)

    def freeze(self, j: int, value: float) -> "ParamFunction":
        """Fix parameter j at value and drop it from the parameter list."""
        c = float(self.factor_values(j, value))
        return ParamFunction(self.factors[:j] + self.factors[j + 1:], self.scale * c)

    def extend(self, before: int = 0, after: int = 0) -> "ParamFunction":
        """Embed in a larger parameter space with independent extra parameters."""
        return ParamFunction((None,) * before + self.factors + (None,) * after, self.scale)
