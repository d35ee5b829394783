"""Two-layer network, symmetric initialization and logistic empirical risk.

The network is ``f(x) = m^-beta * sum_r a_r s(theta_r . x)`` with fixed output
signs ``a_r`` and trainable input weights ``theta_r``.  Only the input layer
is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .activations import ActivationSpec

LOG2 = math.log(2.0)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled examples with ``||x_i|| <= 1`` and ``y_i in {-1, +1}``."""

    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(self.x, dtype=float)))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.shape[0] < 1:
            raise DatasetError("dataset must contain at least one example")
        if x.shape[0] != y.shape[0]:
            raise DatasetError(f"x has {x.shape[0]} rows but y has {y.shape[0]} labels")
        if not np.all(np.isfinite(x)):
            raise DatasetError("non-finite feature value")
        bad = ~np.isin(y, (-1.0, 1.0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DatasetError(f"label {y[i]!r} at row {i} is not in {{-1, 1}}")
        norms = np.linalg.norm(x, axis=1)
        if norms.max() > 1.0 + 1e-9:
            i = int(norms.argmax())
            raise DatasetError(f"row {i} has norm {norms[i]:.6g} > 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)


@dataclass(frozen=True)
class InitDistribution:
    """Initialization law for a hidden unit, with its sub-Gaussian tail constants.

    ``P[||theta|| >= t] <= A exp(-b t^2)`` holds for the stored ``A`` and ``b``.
    """

    kind: str
    scale: float
    d: int
    A: float
    b: float

    @classmethod
    def gaussian(cls, d: int, scale: float = 1.0) -> "InitDistribution":
        # Chernoff on chi-square: E exp(lam ||g||^2) = (1 - 2 lam)^(-d/2); pick lam so that factor is 2.
        lam = 0.5 * (1.0 - 2.0 ** (-2.0 / d))
        return cls("gaussian", float(scale), int(d), 2.0, lam / scale**2)

    @classmethod
    def uniform_ball(cls, d: int, radius: float = 1.0) -> "InitDistribution":
        # Support is the ball, so A e^{-b t^2} >= 1 for t <= radius suffices.
        return cls("uniform_ball", float(radius), int(d), 2.0, LOG2 / radius**2)

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.scale * rng.standard_normal((k, self.d))
        if self.kind == "uniform_ball":
            g = rng.standard_normal((k, self.d))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            r = rng.random(k) ** (1.0 / self.d)
            return self.scale * g * r[:, None]
        raise ValueError(f"unknown init distribution {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "d": self.d, "A": self.A, "b": self.b}


@dataclass(frozen=True, eq=False)
class NetParams:
    theta: np.ndarray
    signs: np.ndarray
    beta: float
    activation: ActivationSpec

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 2:
            raise ValueError("theta must be an m x d matrix")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "signs", np.asarray(self.signs, dtype=float))

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    @property
    def scale(self) -> float:
        """Output scale ``m^-beta``."""
        return self.m ** (-self.beta)

    def with_theta(self, theta) -> "NetParams":
        return replace(self, theta=np.asarray(theta, dtype=float))


def init_symmetric(m: int, d: int, dist: InitDistribution, seed: int,
                   beta: float = 0.0, activation: ActivationSpec | None = None) -> NetParams:
    """Paired initialization: rows ``r`` and ``r + m/2`` share weights, opposite signs.

    The first ``m/2`` rows are drawn i.i.d. from ``dist`` with
    ``np.random.default_rng(seed)``, in the same stream order that
    :func:`ntklab.tangent.draw_samples` uses, so kernels can share samples.
    """
    if m < 2 or m % 2:
        raise ValueError(f"symmetric initialization needs an even width >= 2, got m={m}")
    if dist.d != d:
        raise ValueError(f"init distribution has d={dist.d}, expected {d}")
    half = dist.sample(np.random.default_rng(seed), m // 2)
    theta = np.vstack([half, half])
    signs = np.concatenate([np.ones(m // 2), -np.ones(m // 2)])
    return NetParams(theta, signs, beta, activation or ActivationSpec("tanh"))


def _signed_sum(act: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """``act @ signs``, summing each sign group separately.

    Under the paired layout both halves are reduced identically, so the
    output at a symmetric initialization is exactly zero.
    """
    h = signs.size // 2
    if signs.size % 2 == 0 and np.all(signs[:h] == 1) and np.all(signs[h:] == -1):
        return act[:, :h].sum(axis=1) - act[:, h:].sum(axis=1)
    pos = signs > 0
    return act[:, pos].sum(axis=1) - act[:, ~pos].sum(axis=1)


def _check_dim(params: NetParams, x: np.ndarray):
    if x.shape[-1] != params.d:
        raise ValueError(f"input dimension {x.shape[-1]} does not match parameter dimension {params.d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")


def forward(params: NetParams, x):
    """Network output for one input (``(d,)`` -> float) or a batch (``(n, d)`` -> ``(n,)``)."""
    x = np.asarray(x, dtype=float)
    _check_dim(params, x)
    z = np.atleast_2d(x) @ params.theta.T
    out = params.scale * _signed_sum(params.activation.value(z), params.signs)
    return float(out[0]) if x.ndim == 1 else out


def param_gradient_f(params: NetParams, x) -> np.ndarray:
    """``d f(x) / d theta``: row ``r`` is ``a_r m^-beta s'(theta_r . x) x``."""
    x = np.asarray(x, dtype=float)
    _check_dim(params, x)
    coef = params.scale * params.signs * params.activation.d1(params.theta @ x)
    return coef[:, None] * x[None, :]


def logistic_loss(v):
    """``log(1 + exp(-v))`` evaluated without overflow."""
    v = np.asarray(v, dtype=float)
    return np.maximum(-v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def logistic_dloss(f, y):
    """``d/df log(1 + exp(-y f)) = -y / (1 + exp(y f))``."""
    return -y * expit(-y * f)


class State(NamedTuple):
    """Quantities shared by the loss, its gradients and the diagnostics."""

    f: np.ndarray        # (n,) network outputs
    margins: np.ndarray  # (n,) y_i f(x_i)
    dloss: np.ndarray    # (n,) functional gradient entries
    loss: float
    grad: np.ndarray     # (m, d) gradient of the empirical risk


def evaluate_state(params: NetParams, data: Dataset, with_grad: bool = True) -> State:
    _check_dim(params, data.x)
    z = data.x @ params.theta.T
    if with_grad:
        act, dact = params.activation.value_and_d1(z)
    else:
        act = params.activation.value(z)
    f = params.scale * _signed_sum(act, params.signs)
    margins = data.y * f
    dloss = logistic_dloss(f, data.y)
    loss = float(np.mean(logistic_loss(margins)))
    grad = None
    if with_grad:
        # row r: (1/n) sum_i dloss_i a_r m^-beta s'(z_ir) x_i
        dact *= dloss[:, None]      # in place: large temporaries dominate the step cost
        w = dact
        grad = (params.scale / data.n) * params.signs[:, None] * (w.T @ data.x)
    return State(f, margins, dloss, loss, grad)


def empirical_loss(params: NetParams, data: Dataset) -> float:
    return evaluate_state(params, data, with_grad=False).loss


def loss_gradient(params: NetParams, data: Dataset) -> np.ndarray:
    return evaluate_state(params, data).grad


def functional_gradient(params: NetParams, data: Dataset) -> np.ndarray:
    return evaluate_state(params, data, with_grad=False).dloss


def functional_gradient_l1(params: NetParams, data: Dataset) -> float:
    """Mean absolute functional gradient, i.e. the mean of ``|y - 2 p(Y=1|x) + 1| / 2``."""
    return float(np.mean(np.abs(functional_gradient(params, data))))


def conditional_probability(params: NetParams, x) -> np.ndarray:
    """Model probability ``p(Y = 1 | x) = sigmoid(f(x))``."""
    return expit(forward(params, x))


def margin_fraction(params: NetParams, data: Dataset, gamma: float = 0.0) -> float:
    """Fraction of examples with ``y f(x) <= gamma``; ties at zero count as errors."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    margins = data.y * forward(params, data.x)
    return float(np.mean(margins <= gamma))


def norm_21(delta: np.ndarray) -> float:
    """``sum_r ||delta_r||_2``."""
    return float(np.linalg.norm(delta, axis=1).sum())
