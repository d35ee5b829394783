"""Full-batch gradient descent with trajectory logging and step-size budgets."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .margin import MarginCertificate
from .model import LOG2, Dataset, NetParams, evaluate_state, forward, norm_21

DIVERGENCE_LOSS = 10.0 * LOG2

# cheap per-iteration quantities, recorded at every step
STEP_COLUMNS = ("loss", "grad_param_sq", "grad_l1", "dist_init", "dist_init_21", "train_err")


class DivergenceError(RuntimeError):
    """Raised when the loss becomes non-finite or exceeds the divergence guard."""

    def __init__(self, message: str, log: "TrajectoryLog"):
        super().__init__(message)
        self.log = log


@dataclass
class GDConfig:
    eta: float
    T: int
    beta: float = 0.0
    m: int = 0
    seed: int = 0
    log_every: int = 1
    gammas: tuple = ()

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValueError(f"eta must be finite and non-negative, got {self.eta}")
        if self.T < 0 or int(self.T) != self.T:
            raise ValueError(f"T must be a non-negative integer, got {self.T}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        self.T = int(self.T)


@dataclass
class TrajectoryLog:
    """Per-step scalars for ``t = 0..T`` plus heavier metrics at logged steps.

    ``steps[name][t]`` holds the cheap quantities for every iterate.  Logged
    rows (``t = 0``, every ``log_every`` steps, and ``t = T``) also carry the
    margin fractions at each configured gamma and the held-out error.
    """

    gammas: tuple
    steps: dict = field(default_factory=lambda: {k: [] for k in STEP_COLUMNS})
    rows: list = field(default_factory=list)
    theta0: np.ndarray | None = None
    final: NetParams | None = None

    @property
    def T(self) -> int:
        return len(self.steps["loss"]) - 1

    def series(self, name: str) -> np.ndarray:
        return np.asarray(self.steps[name], dtype=float)

    def logged(self, name: str) -> np.ndarray:
        return np.asarray([row[name] for row in self.rows], dtype=float)

    @property
    def columns(self) -> list[str]:
        cols = ["t", *STEP_COLUMNS]
        cols += [f"margin_frac_{g:g}" for g in self.gammas]
        cols += ["test_err"]
        return cols

    def mean_over_run(self, name: str) -> float:
        """Average of a per-step series over ``t = 0..T-1``."""
        s = self.series(name)
        return float(s[:-1].mean()) if s.size > 1 else float(s[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = _row_writer(fh, self.columns)
            for row in self.rows:
                writer(row)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _row_writer(fh, columns):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)

    def write(row):
        w.writerow([_fmt(row.get(c)) for c in columns])
        fh.flush()

    return write


def gd_run(params0: NetParams, data: Dataset, cfg: GDConfig, heldout: Dataset | None = None,
           sink=None) -> TrajectoryLog:
    """Run exactly ``cfg.T`` plain gradient descent updates from ``params0``.

    ``sink`` is an optional text stream receiving logged rows as CSV while the
    run progresses.  Raises :class:`DivergenceError` (carrying the partial
    log) if the loss becomes non-finite or exceeds ``10 log 2``.
    """
    if cfg.m and cfg.m != params0.m:
        raise ValueError(f"config width m={cfg.m} does not match parameters (m={params0.m})")
    if abs(cfg.beta - params0.beta) > 0:
        raise ValueError(f"config beta={cfg.beta} does not match parameters (beta={params0.beta})")
    gammas = tuple(float(g) for g in cfg.gammas)
    log = TrajectoryLog(gammas, theta0=params0.theta.copy())
    writer = _row_writer(sink, log.columns) if sink is not None else None
    theta0 = params0.theta
    params = params0
    for t in range(cfg.T + 1):
        st = evaluate_state(params, data, with_grad=True)
        delta = params.theta - theta0
        rec = {
            "loss": st.loss,
            "grad_param_sq": float(np.sum(st.grad * st.grad)),
            "grad_l1": float(np.mean(np.abs(st.dloss))),
            "dist_init": float(np.linalg.norm(delta)),
            "dist_init_21": norm_21(delta),
            "train_err": float(np.mean(st.margins <= 0)),
        }
        for k, v in rec.items():
            log.steps[k].append(v)
        if not math.isfinite(st.loss) or st.loss > DIVERGENCE_LOSS:
            log.final = params
            raise DivergenceError(
                f"loss {st.loss:.6g} at t={t} exceeds the divergence guard {DIVERGENCE_LOSS:.6g}", log)
        if t == 0 or t == cfg.T or t % cfg.log_every == 0:
            row = {"t": t, **rec}
            for g in gammas:
                row[f"margin_frac_{g:g}"] = float(np.mean(st.margins <= g))
            row["test_err"] = (float(np.mean(heldout.y * forward(params, heldout.x) <= 0))
                               if heldout is not None else math.nan)
            log.rows.append(row)
            if writer:
                writer(row)
        if t < cfg.T:
            params = params.with_theta(params.theta - cfg.eta * st.grad)
    log.final = params
    return log


def smoothness_constant(m: int, beta: float, K1: float, K2: float) -> float:
    """Lipschitz constant ``M = (K1^2 + K2) / (4 m^(2 beta - 1))`` of the risk gradient."""
    return (K1**2 + K2) / (4.0 * m ** (2.0 * beta - 1.0))


@dataclass(frozen=True)
class Budget:
    eta_max: float
    T_max: int | None   # None when K2 = 0: no iteration cap

    @property
    def unbounded(self) -> bool:
        return self.T_max is None


def theorem2_budget(m: int, beta: float, rho: float, K1: float, K2: float) -> Budget:
    """Largest admissible step and iteration count for the global-convergence guarantee."""
    if not rho > 0:
        raise ValueError(f"margin must be positive, got {rho}")
    eta = min(m**beta, 4.0 * m ** (2.0 * beta - 1.0) / (K1**2 + K2))
    if K2 == 0:
        return Budget(eta, None)
    T = math.floor(m * rho**2 / (32.0 * eta * K2**2 * LOG2))
    return Budget(eta, T)


def _ceil_even(x: float) -> int:
    m = max(2, math.ceil(x))
    return m + (m % 2)


@dataclass(frozen=True)
class Setting:
    variant: str
    m: int
    T: int
    eta: float
    n: int
    beta: float
    multipliers: dict


def corollary_setting(variant: str, epsilon: float, rho: float, beta: float = 0.0,
                      c_m: float = 1.0, c_T: float = 1.0, c_eta: float = 1.0,
                      c_n: float = 1.0) -> Setting:
    """Concrete ``(m, T, eta, n)`` from the rate orders with explicit multipliers.

    ``cor3``: ``m = c_m (rho eps)^(-1/(1-beta))``, ``T = c_T rho^-2 eps^-2``,
    ``eta = c_eta m^(2 beta - 1)``, ``n = c_n rho^-2 eps^-4``.

    ``cor6`` (forces ``beta = 0``): ``m = c_m rho^-2 eps^-1.5 log(1/eps)``,
    ``T = c_T rho^-2 eps^-1 log^2(1/eps)``, ``eta = c_eta / m``,
    ``n = c_n eps^-2``.

    ``m`` is rounded up to an even integer, ``T`` and ``n`` up to integers;
    logarithmic factors in ``n`` are dropped.
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not rho > 0:
        raise ValueError(f"margin must be positive, got {rho}")
    mult = {"c_m": c_m, "c_T": c_T, "c_eta": c_eta, "c_n": c_n}
    if variant == "cor3":
        if not 0 <= beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        m = _ceil_even(c_m * (rho * epsilon) ** (-1.0 / (1.0 - beta)))
        T = math.ceil(c_T / (rho**2 * epsilon**2))
        eta = c_eta * m ** (2.0 * beta - 1.0)
        n = math.ceil(c_n / (rho**2 * epsilon**4))
    elif variant == "cor6":
        beta = 0.0
        L = math.log(1.0 / epsilon)
        m = _ceil_even(c_m * epsilon**-1.5 * L / rho**2)
        T = math.ceil(c_T * L**2 / (rho**2 * epsilon))
        eta = c_eta / m
        n = math.ceil(c_n / epsilon**2)
    else:
        raise ValueError(f"unknown corollary variant {variant!r}")
    return Setting(variant, m, T, eta, n, beta, mult)


def build_reference_point(params0: NetParams, cert: MarginCertificate, alpha: float) -> NetParams:
    """``theta*_r = theta0_r + alpha a_r v_r``, the comparator of the loss-rate argument."""
    K2 = params0.activation.K2
    if alpha < 0 or (K2 > 0 and alpha > cert.rho_hat / (4.0 * K2)):
        warnings.warn(f"alpha={alpha:.6g} lies outside (0, rho_hat/(4 K2)]; "
                      "reference-point guarantees do not apply", stacklevel=2)
    tau = alpha * params0.signs[:, None] * cert.v
    return params0.with_theta(params0.theta + tau)
