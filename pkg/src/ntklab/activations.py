"""Smooth scalar activations with certified derivative bounds.

Every activation exposes closed-form first and second derivatives together
with the suprema ``K1 = sup |s'|`` and ``K2 = sup |s''|`` that the convergence
bounds are stated in terms of.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

KINDS = ("sigmoid", "tanh", "swish", "softplus", "identity")


@lru_cache(maxsize=None)
def _swish_k1() -> float:
    # s'' vanishes where 2 + u (1 - 2 sigmoid(u)) = 0; the positive root is the argmax of s'.
    root = brentq(lambda u: 2.0 + u * (1.0 - 2.0 * expit(u)), 1.0, 5.0, xtol=1e-15)
    s = expit(root)
    return float(s + root * s * (1.0 - s))


def certified_bounds(kind: str, temperature: float = 1.0) -> tuple[float, float]:
    """Return the tight suprema ``(K1, K2)`` of ``|s'|`` and ``|s''|``.

    >>> certified_bounds("identity")
    (1.0, 0.0)
    """
    if kind == "identity":
        return 1.0, 0.0
    if kind == "sigmoid":
        return 0.25, 1.0 / (6.0 * math.sqrt(3.0))
    if kind == "tanh":
        return 1.0, 4.0 / (3.0 * math.sqrt(3.0))
    if kind == "swish":
        return _swish_k1(), 0.5
    if kind == "softplus":
        return 1.0, temperature / 4.0
    raise ValueError(f"unsupported activation kind {kind!r}")


@dataclass(frozen=True)
class ActivationSpec:
    """A C^2 activation ``s`` and its derivative bounds.

    ``softplus`` is the smooth ReLU surrogate ``log(1 + exp(t u)) / t`` with
    temperature ``t``; the other kinds ignore ``temperature``.
    """

    kind: str
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported activation kind {self.kind!r}; expected one of {KINDS}")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValueError(f"temperature must be positive and finite, got {self.temperature}")

    @classmethod
    def parse(cls, name: str) -> "ActivationSpec":
        """Parse the config-file spelling: ``sigmoid | tanh | swish | softplus:<t> | identity``.

        ``softplus_relu:<t>`` is accepted as an alias of ``softplus:<t>``.
        """
        name = name.strip().lower()
        if name.startswith("softplus_relu"):
            name = "softplus" + name[len("softplus_relu"):]
        if name.startswith("softplus"):
            _, _, t = name.partition(":")
            return cls("softplus", float(t) if t else 1.0)
        return cls(name)

    @property
    def name(self) -> str:
        if self.kind == "softplus":
            return f"softplus:{self.temperature:g}"
        return self.kind

    @property
    def K1(self) -> float:
        return certified_bounds(self.kind, self.temperature)[0]

    @property
    def K2(self) -> float:
        return certified_bounds(self.kind, self.temperature)[1]

    @property
    def convex_zero_at_origin(self) -> bool:
        """Whether ``s`` is convex with ``s(0) = 0`` (needed by the dimension-free bound)."""
        return self.kind == "identity"

    def value(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "identity":
            return u.copy()
        if self.kind == "sigmoid":
            return expit(u)
        if self.kind == "tanh":
            return np.tanh(u)
        if self.kind == "swish":
            return u * expit(u)
        t = self.temperature
        return np.logaddexp(0.0, t * u) / t

    def d1(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "identity":
            return np.ones_like(u)
        if self.kind == "sigmoid":
            s = expit(u)
            return s * (1.0 - s)
        if self.kind == "tanh":
            t = np.tanh(u)
            return 1.0 - t * t
        if self.kind == "swish":
            s = expit(u)
            return s + u * s * (1.0 - s)
        return expit(self.temperature * u)

    def d2(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "identity":
            return np.zeros_like(u)
        if self.kind == "sigmoid":
            s = expit(u)
            return s * (1.0 - s) * (1.0 - 2.0 * s)
        if self.kind == "tanh":
            t = np.tanh(u)
            return -2.0 * t * (1.0 - t * t)
        if self.kind == "swish":
            s = expit(u)
            return s * (1.0 - s) * (2.0 + u * (1.0 - 2.0 * s))
        t = self.temperature
        s = expit(t * u)
        return t * s * (1.0 - s)

    def value_and_d1(self, u):
        """``(s(u), s'(u))`` sharing the transcendental evaluations."""
        u = np.asarray(u, dtype=float)
        if self.kind == "tanh":
            t = np.tanh(u)
            d = np.multiply(t, t)
            np.subtract(1.0, d, out=d)
            return t, d
        if self.kind == "sigmoid":
            s = expit(u)
            d = np.subtract(1.0, s)
            d *= s
            return s, d
        if self.kind == "swish":
            s = expit(u)
            return u * s, s + u * s * (1.0 - s)
        return self.value(u), self.d1(u)

    def __call__(self, u):
        return self.value(u)


def evaluate(spec: ActivationSpec, u):
    """Return ``(s(u), s'(u), s''(u))``; rejects non-finite input."""
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("activation input must be finite")
    out = spec.value(arr), spec.d1(arr), spec.d2(arr)
    if arr.ndim == 0:
        return tuple(float(o) for o in out)
    return out
