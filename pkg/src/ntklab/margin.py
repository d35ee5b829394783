"""Finite-width tangent separability margin.

For an initialization ``theta_1..theta_m`` the margin of a direction field
``V = (v_r)`` with ``||v_r|| <= 1`` is

    rho(V) = min_i  y_i / m * sum_r s'(theta_r . x_i) x_i . v_r

and :func:`estimate_margin` maximizes it.  The problem is a concave max-min
over a product of balls; it is solved by projected gradient ascent on an
annealed log-sum-exp smoothing of the min.  Any feasible ``V`` certifies a
lower bound, and every simplex weighting of the examples gives an upper
bound (by minimax), so each certificate also carries a duality gap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .model import Dataset, NetParams


@dataclass
class MarginCertificate:
    v: np.ndarray
    rho_hat: float
    iterations: int
    converged: bool
    rho_upper: float = math.inf

    @property
    def m(self) -> int:
        return self.v.shape[0]

    @property
    def separable(self) -> bool:
        return self.rho_hat > 0

    @property
    def v_norm_max(self) -> float:
        return float(np.linalg.norm(self.v, axis=1).max())

    def to_dict(self) -> dict:
        return {
            "rho_hat": self.rho_hat,
            "rho_upper": self.rho_upper,
            "m": self.m,
            "iterations": self.iterations,
            "converged": self.converged,
            "v_norm_max": self.v_norm_max,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def dump_v(self, path) -> None:
        np.savetxt(path, self.v, delimiter=",", fmt="%.17g")


def _tangent_scales(params0: NetParams, data: Dataset) -> np.ndarray:
    """``y_i s'(theta_r . x_i) / m`` as an ``n x m`` matrix."""
    S = params0.activation.d1(data.x @ params0.theta.T)
    return S * (data.y[:, None] / params0.m)


def per_example_margins(params0: NetParams, data: Dataset, v: np.ndarray) -> np.ndarray:
    """``y_i / m * sum_r s'(theta_r . x_i) x_i . v_r`` for each example."""
    W = _tangent_scales(params0, data)
    return np.einsum("ir,ir->i", W, data.x @ v.T)


def project_rows(v: np.ndarray) -> np.ndarray:
    """Rescale rows with norm above one onto the unit sphere."""
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(norms, 1.0)


def certificate_from_directions(params0: NetParams, data: Dataset, v) -> MarginCertificate:
    """Certificate for a fixed direction field, e.g. ``v_r = v(theta_r)`` for a witness function."""
    v = project_rows(np.asarray(v, dtype=float))
    rho = float(per_example_margins(params0, data, v).min())
    return MarginCertificate(v, rho, 0, True)


def estimate_margin(params0: NetParams, data: Dataset, max_iters: int = 3000, tol: float = 1e-7,
                    tau0: float = 1.0, tau_min: float = 1e-5, halve_every: int = 50,
                    working_set: int = 1000) -> MarginCertificate:
    """Maximize the finite-width tangent margin over per-neuron unit-ball directions.

    Returns the best feasible direction field found; ``rho_hat <= 0`` means the
    data were not separated.  ``converged`` is set once the temperature has
    reached ``tau_min`` and an ascent step gains less than ``tol`` (or the
    duality gap closes below ``tol``).

    Datasets larger than ``working_set`` are solved on a growing subset of the
    lowest-margin examples until the subset solution also certifies the full
    set; the subset's dual bound remains a valid upper bound.
    """
    if data.n < 1:
        raise ValueError("empty dataset")
    opts = dict(max_iters=max_iters, tol=tol, tau0=tau0, tau_min=tau_min, halve_every=halve_every)
    if data.n <= working_set:
        return _solve(_tangent_scales(params0, data), data.x, params0.m, **opts)

    V = _best_response(params0, data)
    margins = per_example_margins_chunked(params0, data, V)
    active = np.sort(np.argsort(margins, kind="stable")[:working_set])
    total_iters = 0
    for _ in range(20):
        sub = data.subset(active)
        cert = _solve(_tangent_scales(params0, sub), sub.x, params0.m, **opts)
        total_iters += cert.iterations
        margins = per_example_margins_chunked(params0, data, cert.v)
        rho_full = float(margins.min())
        if rho_full >= cert.rho_hat - tol:
            break
        outside = np.setdiff1d(np.flatnonzero(margins < cert.rho_hat - tol), active)
        worst = outside[np.argsort(margins[outside], kind="stable")[: max(working_set // 4, 1)]]
        active = np.union1d(active, worst)
    return MarginCertificate(cert.v, rho_full, total_iters, cert.converged and rho_full >= cert.rho_hat - tol,
                             cert.rho_upper)


def per_example_margins_chunked(params0: NetParams, data: Dataset, v: np.ndarray,
                                chunk: int = 2048) -> np.ndarray:
    out = np.empty(data.n)
    for start in range(0, data.n, chunk):
        sl = slice(start, start + chunk)
        out[sl] = per_example_margins(params0, data.subset(sl), v)
    return out


def _best_response(params0: NetParams, data: Dataset, chunk: int = 2048) -> np.ndarray:
    """Unit directions maximizing the uniformly weighted margin."""
    G = np.zeros_like(params0.theta)
    for start in range(0, data.n, chunk):
        sub = data.subset(slice(start, start + chunk))
        G += _tangent_scales(params0, sub).T @ sub.x
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    return np.divide(G, norms, out=np.zeros_like(G), where=norms > 0)


def _solve(W: np.ndarray, X: np.ndarray, m: int, max_iters: int, tol: float, tau0: float,
           tau_min: float, halve_every: int) -> MarginCertificate:
    def margins_of(V):
        return np.einsum("ir,ir->i", W, X @ V.T)

    def smooth(V, tau):
        s = margins_of(V)
        return -tau * logsumexp(-s / tau), s

    def ascent_dir(s, tau):
        p = softmax(-s / tau)
        return (W * p[:, None]).T @ X           # m x d, gradient of the smoothed min

    # warm start at the best response to uniform example weights
    G0 = W.T @ X
    norms = np.linalg.norm(G0, axis=1, keepdims=True)
    V = np.divide(G0, norms, out=np.zeros_like(G0), where=norms > 0)
    best_V, best_rho = V, float(margins_of(V).min())
    upper = math.inf
    tau = tau0
    step = float(m)
    converged = False
    it = 0
    value, s = smooth(V, tau)
    for it in range(1, max_iters + 1):
        if it % halve_every == 0 and tau > tau_min:
            tau = max(tau / 2.0, tau_min)
            value, s = smooth(V, tau)
        G = ascent_dir(s, tau)
        upper = min(upper, float(np.linalg.norm(G, axis=1).sum()))
        while True:
            V_new = project_rows(V + step * G)
            diff = V_new - V
            new_value, s_new = smooth(V_new, tau)
            if new_value >= value + np.sum(G * diff) - np.sum(diff * diff) / (2.0 * step) - 1e-15:
                break
            step *= 0.5
            if step < 1e-12:
                break
        gain = new_value - value
        V, value, s = V_new, new_value, s_new
        hard = float(s.min())
        if hard > best_rho:
            best_V, best_rho = V, hard
        step *= 1.25
        if upper - best_rho <= tol or (tau <= tau_min and 0 <= gain < tol):
            converged = True
            break
    return MarginCertificate(best_V.copy(), best_rho, it, converged, upper)


@dataclass
class HalfMarginReport:
    values: np.ndarray
    passed: np.ndarray
    threshold: float

    @property
    def all_pass(self) -> bool:
        return bool(self.passed.all())

    @property
    def pass_rate(self) -> float:
        return float(self.passed.mean())

    @property
    def min_value(self) -> float:
        return float(self.values.min())


def verify_half_margin(cert: MarginCertificate, params0: NetParams, data: Dataset,
                       rho: float) -> HalfMarginReport:
    """Check ``y_i / m * sum_r s'(theta_r.x_i) x_i . v_r >= rho / 2`` for every example."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    values = per_example_margins(params0, data, cert.v)
    return HalfMarginReport(values, values >= rho / 2.0, rho / 2.0)


def min_width_for_margin(rho: float, K1: float, n: int, delta: float) -> int:
    """Smallest even ``m >= (16 K1^2 / rho^2) log(2n / delta)``."""
    if not rho > 0:
        raise ValueError(f"margin must be positive, got {rho}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    m = math.ceil(16.0 * K1**2 / rho**2 * math.log(2.0 * n / delta))
    m = max(m, 2)
    return m + (m % 2)
