"""Config-driven pipeline: certify, budget, train, verify, report.

A run directory is named by the content hash of its manifest, and the
manifest alone reproduces the run.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, plotting, verify
from .activations import ActivationSpec
from .data import TeacherSpec, generate, load_csv, split
from .margin import MarginCertificate, estimate_margin, min_width_for_margin
from .model import Dataset, DatasetError, InitDistribution, init_symmetric
from .optimizer import DivergenceError, GDConfig, corollary_setting, gd_run, theorem2_budget

EXIT_OK, EXIT_CONFIG, EXIT_NONSEPARABLE, EXIT_VIOLATION, EXIT_DIVERGED = 0, 1, 2, 3, 4

ALL_CHECKS = ("theorem2", "theorem3", "prop4", "prop6", "prop7", "markov", "containment",
              "generalization")


class ConfigError(ValueError):
    pass


AUTO = "auto"

# name -> (kind, default).  kinds: int, float, str, bool, int|auto, float|auto,
# float|none, int|none, floats, strs, list|none
FIELDS: dict[str, tuple[str, object]] = {
    "name": ("str", "run"),
    "seed": ("int", 0),
    "out": ("str", "out"),
    # data
    "data": ("str", "generate"),
    "heldout_csv": ("str|none", None),
    "n": ("int", 200),
    "n_heldout": ("int", 0),
    "d": ("int", 10),
    "data_seed": ("int", 0),
    "teacher": ("str", "linear_bias"),
    "teacher_w": ("list|none", None),
    "teacher_width": ("int", 64),
    "teacher_seed": ("int", 0),
    "teacher_activation": ("str", "tanh"),
    "margin_floor": ("float", 0.5),
    "bias_s": ("float", 0.1),
    # model
    "activation": ("str", "tanh"),
    "beta": ("float", 0.0),
    "init": ("str", "gaussian"),
    "init_scale": ("float", 1.0),
    "m": ("int|auto", AUTO),
    # training
    "eta": ("float|auto", AUTO),
    "T": ("int|auto", AUTO),
    "max_T": ("int|none", None),
    "log_every": ("int", 10),
    "gammas": ("floats", [0.1]),
    # certification and settings
    "certify": ("bool", True),
    "rho": ("float|none", None),
    "delta": ("float", 0.05),
    "epsilon": ("float|none", None),
    "corollary": ("str", "none"),
    "c_m": ("float", 1.0),
    "c_T": ("float", 1.0),
    "c_eta": ("float", 1.0),
    "c_n": ("float", 1.0),
    # verification
    "checks": ("strs", list(ALL_CHECKS)),
    "C": ("float", 1.0),
    "alpha": ("float|auto", AUTO),
    "figures": ("bool", True),
}

NUMERIC_KINDS = ("int", "float", "int|auto", "float|auto", "float|none", "int|none")


def _coerce(name: str, kind: str, value):
    def bad(expect):
        return ConfigError(f"field '{name}': expected {expect}, got {value!r}")

    if kind.endswith("|auto") and value == AUTO:
        return AUTO
    if kind.endswith("|none") and value is None:
        return None
    base = kind.split("|")[0]
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise bad("an integer" + (" or 'auto'" if "auto" in kind else ""))
        return int(value)
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise bad("a finite number" + (" or 'auto'" if "auto" in kind else ""))
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if base == "bool":
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if base == "floats":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise bad("a list of numbers")
        return [float(v) for v in value]
    if base == "strs":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise bad("a list of strings")
        return list(value)
    if base == "list":
        if not isinstance(value, list):
            raise bad("a list")
        return [float(v) for v in value]
    raise AssertionError(kind)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        flat = _flatten(raw)
        unknown = sorted(set(flat) - set(FIELDS))
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
        values = {}
        for name, (kind, default) in FIELDS.items():
            values[name] = _coerce(name, kind, flat[name]) if name in flat else _copy(default)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: _copy(v) for k, v in self.values.items()}

    def replace(self, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        raw.update(changes)
        return ExperimentConfig.from_dict(raw)

    def validate(self) -> None:
        v = self.values
        try:
            ActivationSpec.parse(v["activation"])
        except ValueError as exc:
            raise ConfigError(f"field 'activation': {exc}") from None
        if not 0.0 <= v["beta"] < 1.0:
            raise ConfigError("field 'beta': must lie in [0, 1)")
        if v["init"] not in ("gaussian", "uniform_ball"):
            raise ConfigError("field 'init': expected 'gaussian' or 'uniform_ball'")
        if v["init_scale"] <= 0:
            raise ConfigError("field 'init_scale': must be positive")
        if v["corollary"] not in ("none", "cor3", "cor6"):
            raise ConfigError("field 'corollary': expected 'none', 'cor3' or 'cor6'")
        if v["corollary"] != "none" and v["epsilon"] is None:
            raise ConfigError("field 'epsilon': required when a corollary setting is selected")
        if v["epsilon"] is not None and not 0 < v["epsilon"] < 1:
            raise ConfigError("field 'epsilon': must lie in (0, 1)")
        if not 0 < v["delta"] < 1:
            raise ConfigError("field 'delta': must lie in (0, 1)")
        if v["m"] != AUTO and (v["m"] < 2 or v["m"] % 2):
            raise ConfigError("field 'm': must be an even integer >= 2")
        if v["eta"] != AUTO and v["eta"] < 0:
            raise ConfigError("field 'eta': must be non-negative")
        if v["T"] != AUTO and v["T"] < 0:
            raise ConfigError("field 'T': must be non-negative")
        if v["n"] < 1 or v["d"] < 1 or v["n_heldout"] < 0:
            raise ConfigError("fields 'n', 'd' must be >= 1 and 'n_heldout' >= 0")
        if v["log_every"] < 1:
            raise ConfigError("field 'log_every': must be >= 1")
        if any(g <= 0 for g in v["gammas"]):
            raise ConfigError("field 'gammas': margins must be positive")
        bad = sorted(set(v["checks"]) - set(ALL_CHECKS))
        if bad:
            raise ConfigError(f"field 'checks': unknown check(s) {bad}; expected a subset of {list(ALL_CHECKS)}")
        if not v["certify"]:
            autos = [k for k in ("m", "eta", "T") if v[k] == AUTO]
            if autos:
                raise ConfigError(f"field(s) {autos} are 'auto' but certification is disabled")
        if v["teacher"] not in ("linear_bias", "two_layer_tangent"):
            raise ConfigError("field 'teacher': expected 'linear_bias' or 'two_layer_tangent'")

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _copy(v):
    return list(v) if isinstance(v, list) else v


def _flatten(raw: dict) -> dict:
    """Merge section tables (``[data]``, ``[model]``, ...) into one flat namespace."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table/object")
    flat: dict = {}
    for key, val in raw.items():
        if isinstance(val, dict):
            for k, v in val.items():
                if k in flat:
                    raise ConfigError(f"field '{k}' given twice (section '{key}')")
                flat[k] = v
        else:
            if key in flat:
                raise ConfigError(f"field '{key}' given twice")
            flat[key] = val
    return flat


def load_config(path) -> ExperimentConfig:
    """Read a TOML config (JSON accepted as a fallback, including a run manifest)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as toml_exc:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as json_exc:
            if text.lstrip().startswith(("{", "[")):
                raise ConfigError(f"{path}: invalid JSON: {json_exc}") from None
            raise ConfigError(f"{path}: invalid TOML: {toml_exc}") from None
    if isinstance(raw, dict) and "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    try:
        return ExperimentConfig.from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# resolution

@dataclass
class Resolved:
    train: Dataset
    heldout: Dataset | None
    activation: ActivationSpec
    dist: InitDistribution
    params0: object
    cert: MarginCertificate | None
    rho: float | None
    m: int
    eta: float
    T: int
    setting: object = None
    notes: list = field(default_factory=list)
    width_history: list = field(default_factory=list)
    data_meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "m": self.m, "eta": self.eta, "T": self.T, "rho": self.rho,
            "n_train": self.train.n, "n_heldout": self.heldout.n if self.heldout is not None else 0,
            "d": self.train.d, "activation": self.activation.name,
            "K1": self.activation.K1, "K2": self.activation.K2,
            "init": self.dist.to_dict(), "width_history": self.width_history,
            "data": self.data_meta, "notes": self.notes,
        }
        if self.cert is not None:
            out["certificate"] = self.cert.to_dict()
        if self.setting is not None:
            out["corollary"] = dataclasses.asdict(self.setting)
        return out


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None, dict]:
    if cfg.data == "generate":
        spec = TeacherSpec(kind=cfg.teacher, w=None if cfg.teacher_w is None else tuple(cfg.teacher_w),
                           width=cfg.teacher_width, seed=cfg.teacher_seed, activation=cfg.teacher_activation,
                           margin_floor=cfg.margin_floor, s=cfg.bias_s)
        full = generate(spec, cfg.n + cfg.n_heldout, cfg.d, cfg.data_seed)
        meta = {k: v for k, v in full.meta.items() if k != "teacher"}
        meta["teacher"] = spec.to_dict()
        if cfg.n_heldout:
            train, held = split(full, cfg.n_heldout / full.n, cfg.data_seed)
            return train, held, meta
        return full, None, meta
    train = load_csv(cfg.data)
    meta = {"source": str(cfg.data), "sha256": _sha256_file(cfg.data), "n": train.n, "d": train.d}
    held = None
    if cfg.heldout_csv:
        held = load_csv(cfg.heldout_csv)
        meta["heldout_sha256"] = _sha256_file(cfg.heldout_csv)
        if held.d != train.d:
            raise DatasetError("held-out data dimension does not match the training data")
    return train, held, meta


def _required_width(cfg, rho: float, act: ActivationSpec, n: int):
    if cfg.corollary != "none":
        s = corollary_setting(cfg.corollary, cfg.epsilon, rho, cfg.beta, cfg.c_m, cfg.c_T, cfg.c_eta, cfg.c_n)
        return s.m, s
    return min_width_for_margin(rho, act.K1, n, cfg.delta), None


def resolve(cfg: ExperimentConfig) -> Resolved:
    """Load data, certify the margin and fill in every ``auto`` field.

    With ``m = auto`` the width is found by a fixed-point loop: certify at the
    current width, recompute the required width from the certified margin,
    and repeat until the current width suffices.
    """
    train, held, meta = load_data(cfg)
    act = ActivationSpec.parse(cfg.activation)
    if cfg.init == "gaussian":
        dist = InitDistribution.gaussian(train.d, cfg.init_scale)
    else:
        dist = InitDistribution.uniform_ball(train.d, cfg.init_scale)
    beta = 0.0 if cfg.corollary == "cor6" else cfg.beta
    notes = []
    if cfg.corollary == "cor6" and cfg.beta != 0.0:
        notes.append("cor6 forces beta = 0")
    history = []
    cert = None
    setting = None
    rho = cfg.rho
    m = cfg.m if cfg.m != AUTO else 64
    for _ in range(12):
        params0 = init_symmetric(m, train.d, dist, cfg.seed, beta, act)
        if not cfg.certify:
            break
        cert = estimate_margin(params0, train)
        rho = cert.rho_hat
        history.append({"m": m, "rho_hat": rho})
        if rho <= 0:
            break
        need, setting = _required_width(cfg, rho, act, train.n)
        if cfg.m != AUTO or m >= need:
            break
        m = need
    else:
        notes.append("width fixed-point loop hit its iteration cap")
    eta, T = cfg.eta, cfg.T
    if rho is not None and rho > 0:
        budget = theorem2_budget(m, beta, rho, act.K1, act.K2)
        if eta == AUTO:
            eta = setting.eta if setting is not None else budget.eta_max
        if T == AUTO:
            if setting is not None:
                T = setting.T
            elif budget.T_max is not None:
                T = budget.T_max
            elif cfg.max_T is not None:
                T = cfg.max_T
            else:
                raise ConfigError("field 'T': 'auto' has no finite budget for this activation; set 'max_T'")
    if T != AUTO and cfg.max_T is not None and T > cfg.max_T:
        notes.append(f"T capped from {T} to max_T={cfg.max_T}")
        T = cfg.max_T
    return Resolved(train, held, act, dist, params0, cert, rho, m,
                    eta if eta == AUTO else float(eta), T if T == AUTO else int(T),
                    setting, notes, history, meta)


# running

@dataclass
class RunResult:
    exit_code: int
    out_dir: Path | None
    message: str = ""
    reports: list = field(default_factory=list)
    log: object = None
    resolved: Resolved | None = None


def run_reports(cfg: ExperimentConfig, res: Resolved, log) -> list[verify.BoundReport]:
    act, m, eta, T, rho = res.activation, res.m, res.eta, res.T, res.rho
    beta = res.params0.beta
    K1, K2 = act.K1, act.K2
    n = res.train.n
    checks = set(cfg.checks)
    reports = []
    if "markov" in checks:
        reports.append(verify.check_markov(log))
        reports += [verify.check_margin_markov(log, g) for g in log.gammas]
    if "prop7" in checks and eta > 0:
        reports += verify.check_prop7(log, eta, m, beta, K1, K2)
    if rho is None or rho <= 0:
        return reports
    if "theorem2" in checks and T >= 1:
        reports.append(verify.check_theorem2(log, m, beta, eta, rho, K1, K2, "max", n=n, delta=cfg.delta))
    if "theorem3" in checks and T >= 1 and eta > 0:
        alpha = (verify.best_alpha(m, beta, eta, T, rho, K2) if cfg.alpha == AUTO else cfg.alpha)
        reports.append(verify.check_theorem3(log, m, beta, eta, T, rho, alpha, cfg.C, K2))
    if "prop4" in checks and cfg.epsilon is not None:
        reports.append(verify.check_prop4_distance(log, cfg.epsilon, rho, cfg.C, eta))
    if "prop6" in checks:
        reports.append(verify.check_prop6_trajectory(log, rho, m, beta, K2))
    if "containment" in checks:
        reports.append(verify.check_containment(log, m, rho, K2))
    if "generalization" in checks and T >= 1 and eta > 0:
        consts = {"C": cfg.C, "K1": K1, "K2": K2, "A": res.dist.A, "b": res.dist.b, "d": res.train.d}
        eps = cfg.epsilon if cfg.corollary == "cor6" else None
        for variant in ("eq11", "eq12"):
            for g in log.gammas:
                reports.append(verify.check_generalization_rhs(
                    log, variant, g, cfg.delta, n, m, beta, eta, T, rho, eps, consts, act))
    return reports


def verdict(reports) -> bool:
    """True when every non-diagnostic, comparable, precondition-satisfying check holds."""
    return all(r.holds for r in reports
               if r.comparable and r.precondition_ok and not r.diagnostic)


def manifest_for(cfg: ExperimentConfig, res: Resolved) -> dict:
    config = {k: v for k, v in cfg.to_dict().items() if k != "out"}    # location, not content
    return {"tool": "ntklab", "version": __version__, "config": config,
            "resolved": verify._clean(res.summary())}


def _dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, out_root=None) -> RunResult:
    """Run the full pipeline for one config; see the module docstring for outputs."""
    try:
        res = resolve(cfg)
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        return RunResult(EXIT_CONFIG, None, str(exc))
    manifest = manifest_for(cfg, res)
    digest = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:12]
    out = Path(out_root if out_root is not None else cfg.out) / digest
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(manifest, out / "manifest.json")
    if res.cert is not None:
        _dump_json(verify._clean(res.cert.to_dict()), out / "certificate.json")
    if res.rho is None or res.rho <= 0:
        msg = f"data not separated by the tangent model at m={res.m} (rho_hat={res.rho})"
        _dump_json({"exit_code": EXIT_NONSEPARABLE, "message": msg}, out / "result.json")
        return RunResult(EXIT_NONSEPARABLE, out, msg, resolved=res)
    gd = GDConfig(eta=res.eta, T=res.T, beta=res.params0.beta, m=res.m, seed=cfg.seed,
                  log_every=cfg.log_every, gammas=tuple(cfg.gammas))
    try:
        with open(out / "trajectory.csv", "w", newline="") as sink:
            log = gd_run(res.params0, res.train, gd, heldout=res.heldout, sink=sink)
    except DivergenceError as exc:
        _dump_json({"exit_code": EXIT_DIVERGED, "message": str(exc)}, out / "result.json")
        return RunResult(EXIT_DIVERGED, out, str(exc), log=exc.log, resolved=res)
    reports = run_reports(cfg, res, log)
    verify.reports_to_json(reports, out / "bounds.json")
    table = verify.render_table(reports)
    (out / "bounds.txt").write_text(table)
    if cfg.figures:
        rhs = next((r.rhs for r in reports if r.bound_id.startswith("theorem2")), None)
        plotting.plot_trajectory(log, out / "trajectory.png", rhs)
        plotting.plot_bounds(reports, out / "bounds.png")
    code = EXIT_OK if verdict(reports) else EXIT_VIOLATION
    failed = [r.bound_id for r in reports if r.status == "violated" and not r.diagnostic]
    msg = "all checks hold" if code == EXIT_OK else f"violated: {', '.join(failed)}"
    _dump_json({"exit_code": code, "message": msg}, out / "result.json")
    return RunResult(code, out, msg, reports, log, res)


# sweeps

def threads_from_env() -> int:
    raw = os.environ.get("NTKLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"NTKLAB_THREADS must be an integer, got {raw!r}") from None


def _sweep_row(args):
    cfg_dict, axis, value, out_root = args
    try:
        cfg = ExperimentConfig.from_dict({**cfg_dict, axis: value})
    except ConfigError as exc:
        return {"value": value, "exit_code": EXIT_CONFIG, "message": str(exc)}, {}
    r = run_experiment(cfg, out_root)
    row = {"value": value, "exit_code": r.exit_code, "message": r.message,
           "run_dir": r.out_dir.name if r.out_dir else ""}
    slacks = {}
    if r.log is not None and r.log.T >= 0:
        g = r.log.series("grad_l1")
        row.update(m=r.resolved.m, eta=r.resolved.eta, T=r.log.T,
                   final_loss=float(r.log.series("loss")[-1]),
                   mean_grad_l1_sq=float(np.mean(g[:-1] ** 2)) if g.size > 1 else float(g[0] ** 2))
    for rep in r.reports:
        slacks[f"slack_{rep.bound_id}"] = rep.slack
    return row, slacks


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


@dataclass
class SweepResult:
    out_dir: Path
    rows: list
    slope: float


def sweep(cfg: ExperimentConfig, axis: str, values, out_root=None, jobs: int | None = None) -> SweepResult:
    """One run per value of a numeric config field, summarized in ``summary.csv``.

    Failed rows are recorded with their exit code rather than aborting.
    """
    if axis not in FIELDS or FIELDS[axis][0] not in NUMERIC_KINDS:
        raise ConfigError(f"sweep axis '{axis}' is not a numeric config field")
    values = list(values)
    root = Path(out_root if out_root is not None else cfg.out)
    config = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    key = json.dumps({"config": config, "axis": axis, "values": values}, sort_keys=True)
    out = root / f"sweep-{hashlib.sha256(key.encode()).hexdigest()[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    jobs = threads_from_env() if jobs is None else jobs
    tasks = [(cfg.to_dict(), axis, v, str(root)) for v in values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_sweep_row, tasks))
    else:
        results = [_sweep_row(t) for t in tasks]
    base = ["value", "exit_code", "m", "eta", "T", "final_loss", "mean_grad_l1_sq", "run_dir"]
    slack_cols: list[str] = []
    for _, s in results:
        slack_cols += [c for c in s if c not in slack_cols]
    rows = []
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis if c == "value" else c for c in base] + slack_cols + ["message"])
        for row, s in results:
            merged = {**row, **s}
            rows.append(merged)
            w.writerow([_cell(merged.get(c)) for c in base + slack_cols] + [row.get("message", "")])
    ys = [r.get("mean_grad_l1_sq", math.nan) for r in rows]
    slope = loglog_slope(values, ys) if values else math.nan
    _dump_json(verify._clean({"axis": axis, "values": values, "loglog_slope_mean_grad_l1_sq": slope,
                              "exit_codes": [r["exit_code"] for r in rows]}), out / "summary.json")
    if cfg.figures and values:
        plotting.plot_sweep(values, {"mean squared L1 gradient": ys,
                                     "final risk": [r.get("final_loss", math.nan) for r in rows]},
                            out / "sweep.png", axis, slope)
    return SweepResult(out, rows, slope)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
