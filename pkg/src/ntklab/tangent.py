"""Neural tangent kernels and their Gram matrices.

The population kernel ``k(x, x') = E_theta[s'(theta.x) s'(theta.x') x.x']`` is
estimated by Monte Carlo.  Gram matrices reuse one sample stream for every
pair (common random numbers), which keeps them symmetric and PSD.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .activations import ActivationSpec
from .model import Dataset, InitDistribution, NetParams, param_gradient_f


def draw_samples(dist: InitDistribution, samples: int, seed: int) -> np.ndarray:
    """``samples`` i.i.d. draws from ``dist``, matching :func:`ntklab.model.init_symmetric`'s stream."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    return dist.sample(np.random.default_rng(seed), samples)


def _as_vec(x, d=None) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if d is not None and x.size != d:
        raise ValueError(f"expected a {d}-vector, got length {x.size}")
    return x


def ntk_mc_samples(x, xp, dist: InitDistribution, samples: int, seed: int,
                   activation: ActivationSpec) -> np.ndarray:
    """Per-sample kernel terms ``s'(theta_s.x) s'(theta_s.xp) x.xp``."""
    x, xp = _as_vec(x, dist.d), _as_vec(xp, dist.d)
    thetas = draw_samples(dist, samples, seed)
    return activation.d1(thetas @ x) * activation.d1(thetas @ xp) * float(x @ xp)


def ntk_mc(x, xp, dist: InitDistribution, samples: int, seed: int,
           activation: ActivationSpec) -> float:
    """Monte Carlo estimate of the population tangent kernel at ``(x, xp)``."""
    x, xp = _as_vec(x, dist.d), _as_vec(xp, dist.d)
    thetas = draw_samples(dist, samples, seed)
    # average the activation factor first so that s' == 1 gives exactly x.xp
    return float(np.mean(activation.d1(thetas @ x) * activation.d1(thetas @ xp)) * float(x @ xp))


def empirical_ntk(params: NetParams, x, xp) -> float:
    """Finite-width kernel ``grad_theta f(x) . grad_theta f(xp)``."""
    return float(np.sum(param_gradient_f(params, x) * param_gradient_f(params, xp)))


class TangentKernel:
    """Kernel ``k(x, x') = c * mean_s s'(theta_s.x) s'(theta_s.x') x.x'`` over fixed samples.

    With the MC draws this is the estimate of the population kernel.  With the
    rows of a parameter matrix and ``c = m^(1 - 2 beta)`` it is exactly the
    finite-width kernel of those parameters.
    """

    def __init__(self, thetas: np.ndarray, activation: ActivationSpec, factor: float = 1.0):
        self.thetas = np.asarray(thetas, dtype=float)
        self.activation = activation
        self.factor = float(factor)
        # duplicated rows (paired initialization) carry no extra information
        self.effective_samples = int(np.unique(self.thetas, axis=0).shape[0])

    @classmethod
    def monte_carlo(cls, dist: InitDistribution, samples: int, seed: int,
                    activation: ActivationSpec) -> "TangentKernel":
        return cls(draw_samples(dist, samples, seed), activation)

    @classmethod
    def empirical(cls, params: NetParams, scaled: bool = False) -> "TangentKernel":
        """Finite-width kernel of ``params``; ``scaled`` multiplies by ``m^(2 beta - 1)``."""
        m = params.m
        factor = 1.0 if scaled else m ** (1.0 - 2.0 * params.beta)
        return cls(params.theta, params.activation, factor)

    def features(self, X) -> np.ndarray:
        return self.activation.d1(np.atleast_2d(X) @ self.thetas.T)

    def __call__(self, x, xp) -> float:
        return float(self.matrix(np.vstack([_as_vec(x), _as_vec(xp)]))[0, 1])

    def matrix(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        D = self.features(X)
        return self.factor * (D @ D.T / D.shape[1]) * (X @ X.T)

    def stderr(self, X) -> np.ndarray:
        """Entrywise standard error of :meth:`matrix` as a sample mean over the distinct thetas."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        D = self.features(X)
        S = D.shape[1]
        G = X @ X.T
        mean = D @ D.T / S
        second = (D * D) @ (D * D).T / S
        k = self.effective_samples
        var = np.maximum(second - mean * mean, 0.0) * (k / max(k - 1, 1))
        return self.factor * np.sqrt(var / k) * np.abs(G)


@dataclass
class GramMatrix:
    h: np.ndarray
    kind: str
    info: dict = field(default_factory=dict)
    stderr: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.h.shape[0]

    def to_csv(self, path) -> None:
        np.savetxt(path, self.h, delimiter=",", fmt="%.17g")


def gram(data: Dataset | np.ndarray, source, kind: str = "custom", info: dict | None = None) -> GramMatrix:
    """Assemble the symmetric Gram matrix of a kernel over the examples.

    ``source`` is either a :class:`TangentKernel` (assembled in one shot) or
    any callable ``k(x, xp) -> float`` evaluated pairwise.
    """
    X = data.x if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=float))
    n = X.shape[0]
    if n < 1:
        raise ValueError("need at least one example")
    stderr = None
    if isinstance(source, TangentKernel):
        h = source.matrix(X)
        stderr = source.stderr(X)
    else:
        h = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                h[i, j] = h[j, i] = source(X[i], X[j])
    h = 0.5 * (h + h.T)
    return GramMatrix(h, kind, dict(info or {}), stderr)


def ntk_gram(data: Dataset, dist: InitDistribution, samples: int, seed: int,
             activation: ActivationSpec) -> GramMatrix:
    kernel = TangentKernel.monte_carlo(dist, samples, seed, activation)
    return gram(data, kernel, "ntk_mc", {"samples": samples, "seed": seed})


def empirical_gram(data: Dataset, params: NetParams, scaled: bool = True) -> GramMatrix:
    return gram(data, TangentKernel.empirical(params, scaled), "empirical", {"scaled": scaled, "m": params.m})


def min_eigenvalue(g: GramMatrix | np.ndarray) -> float:
    h = g.h if isinstance(g, GramMatrix) else np.asarray(g, dtype=float)
    if not np.all(np.isfinite(h)):
        raise ValueError("Gram matrix has non-finite entries")
    return float(scipy.linalg.eigvalsh(h, subset_by_index=[0, 0])[0])


def cone_positivity_ratio(g: GramMatrix | np.ndarray, y, trials: int = 1000, seed: int = 0,
                          return_argmin: bool = False):
    """Smallest ``xi' H xi / ||xi||^2`` over ``xi = (alpha_i y_i)``, ``alpha >= 0``.

    Samples ``alpha ~ Exp(1)`` i.i.d. ``trials`` times and always includes the
    ``n`` axis rays ``xi = y_i e_i``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    h = g.h if isinstance(g, GramMatrix) else np.asarray(g, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    alphas = np.random.default_rng(seed).exponential(1.0, size=(trials, y.size))
    alphas = np.vstack([np.eye(y.size), alphas])
    xi = alphas * y
    ratios = np.einsum("ti,ij,tj->t", xi, h, xi) / np.einsum("ti,ti->t", xi, xi)
    k = int(np.argmin(ratios))
    if return_argmin:
        return float(ratios[k]), xi[k]
    return float(ratios[k])


def quadratic_form_stderr(thetas: np.ndarray, activation: ActivationSpec, X, xi) -> float:
    """MC standard error of ``xi' H xi / ||xi||^2`` when ``H`` averages over ``thetas``."""
    X = np.atleast_2d(X)
    xi = np.asarray(xi, dtype=float)
    D = activation.d1(X @ thetas.T)                  # n x S
    per_sample = (xi[:, None] * D).T @ X             # S x d: sum_i xi_i s'_is x_i
    q = np.einsum("sd,sd->s", per_sample, per_sample) / float(xi @ xi)
    return float(q.std(ddof=1) / np.sqrt(q.size)) if q.size > 1 else 0.0


class Witness:
    """Separating direction ``v(theta)`` built from an invertible Gram matrix.

    ``v(theta) = lambda0 / (n K1) * sum_j s'(theta.x_j) x_j w_j`` with
    ``w = H^-1 y``; the prefactor keeps ``||v(theta)|| <= 1`` for every theta.
    """

    def __init__(self, w: np.ndarray, X: np.ndarray, lambda0: float, K1: float,
                 activation: ActivationSpec):
        self.w = w
        self.X = X
        self.lambda0 = lambda0
        self.K1 = K1
        self.activation = activation
        self.prefactor = lambda0 / (X.shape[0] * K1)

    @property
    def guaranteed_margin(self) -> float:
        return self.prefactor

    def __call__(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        T = np.atleast_2d(theta)
        D = self.activation.d1(T @ self.X.T)          # k x n
        v = self.prefactor * (D * self.w) @ self.X
        return v[0] if single else v

    def margins(self, thetas: np.ndarray, y) -> np.ndarray:
        """Per-example ``y_i mean_s s'(theta_s.x_i) x_i . v(theta_s)``."""
        V = self(thetas)                                    # S x d
        D = self.activation.d1(self.X @ thetas.T)           # n x S
        return np.asarray(y) * np.mean(D * (self.X @ V.T), axis=1)


def witness_from_gram(g: GramMatrix, data: Dataset, dist: InitDistribution | None = None,
                      K1: float | None = None, activation: ActivationSpec | None = None) -> Witness:
    """Turn Gram positivity into a separating witness with margin ``lambda0 / (n K1)``."""
    lam = min_eigenvalue(g)
    if lam <= 1e-10:
        raise ValueError(f"Gram matrix is singular (min eigenvalue {lam:.3g}); "
                         "positivity gives no separating witness")
    activation = activation or ActivationSpec("identity")
    K1 = activation.K1 if K1 is None else K1
    w = scipy.linalg.solve(g.h, data.y, assume_a="pos")
    return Witness(w, data.x, lam, K1, activation)
