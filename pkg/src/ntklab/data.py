"""Synthetic separable datasets, CSV I/O and train/held-out splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .activations import ActivationSpec
from .model import Dataset, DatasetError


@dataclass(frozen=True)
class TeacherSpec:
    """Labelling rule for synthetic data.

    ``linear_bias`` scores ``w . x`` over the full feature vector (the bias
    coordinate included).  ``two_layer_tangent`` scores
    ``mean_k w_k s'(theta_k . x)`` for random ``theta_k ~ N(0, I)`` and
    ``w_k ~ N(0, 1)``, which a tangent model represents exactly by putting
    all of ``v`` on the bias coordinate.
    """

    kind: str = "linear_bias"
    w: tuple | None = None
    width: int = 64
    seed: int = 0
    activation: str = "tanh"
    margin_floor: float = 0.0
    bias_coord: bool = True
    s: float = 0.1

    def __post_init__(self):
        if self.kind not in ("linear_bias", "two_layer_tangent"):
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.margin_floor < 0:
            raise ValueError("margin_floor must be non-negative")
        if self.bias_coord and not 0 < self.s < 1:
            raise ValueError("bias constant s must lie in (0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["w"] = None if self.w is None else list(self.w)
        return out


@dataclass
class Teacher:
    spec: TeacherSpec
    d: int
    w: np.ndarray
    thetas: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, spec: TeacherSpec, d: int) -> "Teacher":
        if spec.kind == "linear_bias":
            w = np.zeros(d) if spec.w is None else np.asarray(spec.w, dtype=float)
            if spec.w is None:
                w[0] = 1.0
            if w.size != d:
                raise ValueError(f"teacher w has length {w.size}, expected {d}")
            return cls(spec, d, w)
        rng = np.random.default_rng(spec.seed)
        thetas = rng.standard_normal((spec.width, d))
        w = rng.standard_normal(spec.width)
        return cls(spec, d, w, thetas)

    def score(self, x: np.ndarray) -> np.ndarray:
        if self.spec.kind == "linear_bias":
            return x @ self.w
        act = ActivationSpec.parse(self.spec.activation)
        return act.d1(x @ self.thetas.T) @ self.w / self.w.size


def _uniform_ball(rng: np.random.Generator, k: int, dim: int, radius: float) -> np.ndarray:
    g = rng.standard_normal((k, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return radius * g * (rng.random(k) ** (1.0 / dim))[:, None]


def generate(spec: TeacherSpec, n: int, d: int, seed: int) -> Dataset:
    """Rejection-sample ``n`` labelled points with ``|teacher(x)| >= margin_floor``.

    Points are uniform in the unit ball.  With ``bias_coord`` the last of the
    ``d`` coordinates is the constant ``s`` and the others are uniform in the
    ball of radius ``sqrt(1 - s^2)``, so ``||x|| <= 1`` throughout.  The
    acceptance rate and class counts are recorded in ``Dataset.meta``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    teacher = Teacher.build(spec, d)
    rng = np.random.default_rng(seed)
    budget = 100 * n
    free = d - 1 if spec.bias_coord else d
    radius = math.sqrt(1.0 - spec.s**2) if spec.bias_coord else 1.0
    kept: list[np.ndarray] = []
    scores: list[np.ndarray] = []
    drawn = accepted = 0
    batch = max(64, 2 * n)
    while accepted < n:
        if drawn >= budget:
            raise ValueError(
                f"rejection budget of {budget} draws exhausted with {accepted}/{n} accepted; "
                f"margin_floor={spec.margin_floor} is too large for this teacher")
        k = min(batch, budget - drawn)
        x = _uniform_ball(rng, k, free, radius)
        if spec.bias_coord:
            x = np.hstack([x, np.full((k, 1), spec.s)])
        sc = teacher.score(x)
        ok = np.abs(sc) >= spec.margin_floor
        ok &= sc != 0
        kept.append(x[ok])
        scores.append(sc[ok])
        drawn += k
        accepted += int(ok.sum())
    x = np.vstack(kept)[:n]
    sc = np.concatenate(scores)[:n]
    y = np.where(sc > 0, 1.0, -1.0)
    meta = {
        "teacher": spec.to_dict(),
        "n": n,
        "d": d,
        "seed": seed,
        "drawn": drawn,
        "acceptance_rate": accepted / drawn,
        "class_counts": {"+1": int((y > 0).sum()), "-1": int((y < 0).sum())},
        "min_abs_score": float(np.abs(sc).min()),
    }
    return Dataset(x, y, meta)


def split(data: Dataset, heldout_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle into disjoint ``(train, heldout)`` parts."""
    if not 0 < heldout_fraction < 1:
        raise ValueError("heldout_fraction must lie in (0, 1)")
    n_held = int(round(heldout_fraction * data.n))
    if n_held < 1 or n_held >= data.n:
        raise ValueError(f"split of n={data.n} at fraction {heldout_fraction} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(data.n)
    return data.subset(np.sort(perm[n_held:])), data.subset(np.sort(perm[:n_held]))


def save_csv(data: Dataset, path) -> None:
    """Write ``x0,...,x{d-1},y`` with round-trip-exact floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(data.d)] + ["y"])
        for xi, yi in zip(data.x, data.y):
            w.writerow([repr(float(v)) for v in xi] + [str(int(yi))])


def save_manifest(data: Dataset, path) -> None:
    """Generation record: teacher spec, seed, acceptance rate and class counts."""
    with open(path, "w") as fh:
        json.dump(data.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header != [f"x{j}" for j in range(d)] + ["y"]:
        raise DatasetError(f"{path}: bad header {header!r}; expected x0,...,x{{d-1}},y")
    x = np.empty((len(rows) - 1, d))
    y = np.empty(len(rows) - 1)
    for i, row in enumerate(rows[1:]):
        if len(row) != d + 1:
            raise DatasetError(f"{path}: line {i + 2} has {len(row)} fields, expected {d + 1}")
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise DatasetError(f"{path}: line {i + 2}: {exc}") from None
        if vals[-1] not in (-1.0, 1.0):
            raise DatasetError(f"{path}: line {i + 2}: label {row[-1]!r} is not -1 or 1")
        norm = math.sqrt(sum(v * v for v in vals[:-1]))
        if norm > 1.0 + 1e-9:
            raise DatasetError(f"{path}: line {i + 2}: feature norm {norm:.6g} exceeds 1")
        x[i], y[i] = vals[:-1], vals[-1]
    if x.shape[0] == 0:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(x, y)
