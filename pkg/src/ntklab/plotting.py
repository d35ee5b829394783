"""Report figures.  Rendered with the Agg backend and without PNG metadata so
repeated runs produce byte-identical files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)


def plot_trajectory(log, path, rhs: float | None = None) -> None:
    """Loss, squared L1 functional gradient and training error against ``t``."""
    t = np.arange(log.T + 1)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
        axes[0].plot(t, log.series("loss"), lw=1.2)
        axes[0].axhline(np.log(2.0), color="0.5", ls=":", lw=0.8)
        axes[0].set(xlabel="iteration", ylabel="empirical risk")
        g2 = log.series("grad_l1") ** 2
        running = np.cumsum(g2) / np.arange(1, g2.size + 1)
        axes[1].loglog(t[1:], g2[1:], lw=1.0, label="squared L1 gradient")
        axes[1].loglog(t[1:], running[:-1], lw=1.2, label="running mean")
        if rhs is not None and np.isfinite(rhs):
            axes[1].axhline(rhs, color="C3", ls="--", lw=0.8, label="bound at T")
        axes[1].set(xlabel="iteration")
        axes[1].legend(frameon=False)
        axes[2].plot(t, log.series("train_err"), lw=1.0, label="train error")
        axes[2].plot(t, 2.0 * log.series("grad_l1"), lw=1.0, ls="--", label="2 x L1 gradient")
        rows_t = [r["t"] for r in log.rows]
        test = log.logged("test_err")
        if np.isfinite(test).any():
            axes[2].plot(rows_t, test, "o", ms=2, label="held-out error")
        axes[2].set(xlabel="iteration", ylim=(-0.02, 1.02))
        axes[2].legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_bounds(reports, path) -> None:
    """Measured over theoretical side for each finite bound (below 1 means it holds)."""
    rows = [r for r in reports if np.isfinite(r.lhs) and np.isfinite(r.rhs) and r.rhs > 0 and r.lhs >= 0]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 0.35 * max(len(rows), 2) + 1.0))
        if rows:
            ratio = np.array([max(r.lhs / r.rhs, 1e-12) for r in rows])
            colors = ["C2" if r.holds else "C3" for r in rows]
            y = np.arange(len(rows))
            ax.barh(y, ratio, color=colors)
            ax.set_yticks(y, [r.bound_id for r in rows])
            ax.set_xscale("log")
            ax.axvline(1.0, color="k", lw=0.8)
        ax.set_xlabel("measured / bound")
        fig.tight_layout()
        _save(fig, path)


def plot_sweep(values, series: dict, path, xlabel: str, fit_slope: float | None = None) -> None:
    """Log-log plot of sweep summaries against the swept field."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        x = np.asarray(values, dtype=float)
        for name, ys in series.items():
            ys = np.asarray(ys, dtype=float)
            ok = np.isfinite(ys) & (ys > 0)
            if ok.any():
                ax.loglog(x[ok], ys[ok], "o-", ms=3, label=name)
        ax.set_xlabel(xlabel)
        if fit_slope is not None and np.isfinite(fit_slope):
            ax.set_title(f"fitted slope {fit_slope:.3f}")
        if series:
            ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_gram(h, path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(h, cmap="viridis")
        ax.grid(False)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        _save(fig, path)
