"""Command-line entry point: ``ntklab run | sweep | certify | gram | generate``.

Exit codes: 0 ok, 1 config error, 2 data not separable, 3 bound violated,
4 divergence guard tripped.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import plotting, verify
from ._runtime import tune_allocator
from .activations import ActivationSpec
from .data import TeacherSpec, generate, save_csv, save_manifest
from .experiment import (EXIT_CONFIG, EXIT_NONSEPARABLE, EXIT_OK, ConfigError, load_config,
                         run_experiment, sweep, threads_from_env)
from .margin import estimate_margin, min_width_for_margin
from .model import DatasetError, InitDistribution, init_symmetric
from .tangent import empirical_gram, min_eigenvalue, ntk_gram


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError:
                raise ConfigError(f"--values: {tok!r} is not a number") from None
    return out


def _config_with_overrides(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _config_with_overrides(args)
    res = run_experiment(cfg)
    if res.out_dir is not None:
        print(f"run directory: {res.out_dir}")
    if res.reports:
        print(verify.render_table(res.reports), end="")
    print(res.message)
    return res.exit_code


def cmd_sweep(args) -> int:
    cfg = _config_with_overrides(args)
    values = _parse_values(args.values)
    result = sweep(cfg, args.axis, values)
    print(f"sweep directory: {result.out_dir}")
    for row in result.rows:
        print(f"{args.axis}={row['value']}: exit {row['exit_code']}, "
              f"mean squared L1 gradient {row.get('mean_grad_l1_sq', float('nan')):.6g}")
    if values:
        print(f"log-log slope: {result.slope:.4f}")
    return EXIT_OK


def _model_args(args, d):
    act = ActivationSpec.parse(args.activation)
    dist = (InitDistribution.gaussian(d, args.init_scale) if args.init == "gaussian"
            else InitDistribution.uniform_ball(d, args.init_scale))
    return act, dist


def _out_dir(args, kind: str, payload: dict) -> Path:
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]
    out = Path(args.out or "out") / f"{kind}-{digest}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_certify(args) -> int:
    from .data import load_csv

    data = load_csv(args.data)
    act, dist = _model_args(args, data.d)
    seed = args.seed or 0
    params0 = init_symmetric(args.m, data.d, dist, seed, args.beta, act)
    cert = estimate_margin(params0, data)
    info = cert.to_dict()
    if cert.separable:
        info["min_width"] = min_width_for_margin(cert.rho_hat, act.K1, data.n, args.delta)
        info["width_sufficient"] = args.m >= info["min_width"]
    payload = {"data_sha256": hashlib.sha256(Path(args.data).read_bytes()).hexdigest(), "m": args.m,
               "seed": seed, "activation": act.name, "beta": args.beta, "init": dist.to_dict(),
               "delta": args.delta}
    out = _out_dir(args, "certify", payload)
    with open(out / "certificate.json", "w") as fh:
        json.dump(verify._clean({**info, "inputs": payload}), fh, indent=2, sort_keys=True)
        fh.write("\n")
    cert.dump_v(out / "directions.csv")
    print(json.dumps(verify._clean(info), sort_keys=True))
    return EXIT_OK if cert.separable else EXIT_NONSEPARABLE


def cmd_gram(args) -> int:
    from .data import load_csv

    data = load_csv(args.data)
    act, dist = _model_args(args, data.d)
    seed = args.seed or 0
    if args.kernel == "ntk":
        g = ntk_gram(data, dist, args.samples, seed, act)
    else:
        params0 = init_symmetric(args.m, data.d, dist, seed, args.beta, act)
        g = empirical_gram(data, params0, scaled=True)
    lam = min_eigenvalue(g)
    payload = {"data_sha256": hashlib.sha256(Path(args.data).read_bytes()).hexdigest(),
               "kernel": args.kernel, "seed": seed, "activation": act.name, "init": dist.to_dict(),
               "samples": args.samples, "m": args.m, "beta": args.beta}
    out = _out_dir(args, "gram", payload)
    g.to_csv(out / "gram.csv")
    summary = {"kind": g.kind, "n": g.n, "min_eigenvalue": lam, "info": g.info, "inputs": payload}
    with open(out / "gram.json", "w") as fh:
        json.dump(verify._clean(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    plotting.plot_gram(g.h, out / "gram.png")
    print(f"gram directory: {out}")
    print(f"min eigenvalue: {lam:.6g}")
    return EXIT_OK


def cmd_generate(args) -> int:
    spec = TeacherSpec(kind=args.teacher, margin_floor=args.margin_floor, s=args.bias_s)
    data = generate(spec, args.n, args.d, args.seed or 0)
    save_csv(data, args.output)
    save_manifest(data, str(args.output) + ".json")
    print(json.dumps({k: v for k, v in data.meta.items() if k != "teacher"}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntklab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output root directory")
    common.add_argument("--seed", type=int, help="initialization seed")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run one experiment from a config file")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="run a config over values of one field")
    s.add_argument("config")
    s.add_argument("--axis", required=True, help="numeric config field to vary")
    s.add_argument("--values", required=True, help="comma-separated values (may be empty)")
    s.set_defaults(func=cmd_sweep)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--activation", default="tanh")
    model.add_argument("--beta", type=float, default=0.0)
    model.add_argument("--init", choices=("gaussian", "uniform_ball"), default="gaussian")
    model.add_argument("--init-scale", type=float, default=1.0)
    model.add_argument("--m", type=int, default=1000, help="network width (even)")

    c = sub.add_parser("certify", parents=[common, model], help="certify the tangent margin of a CSV dataset")
    c.add_argument("data")
    c.add_argument("--delta", type=float, default=0.05)
    c.set_defaults(func=cmd_certify)

    g = sub.add_parser("gram", parents=[common, model], help="tangent-kernel Gram matrix of a CSV dataset")
    g.add_argument("data")
    g.add_argument("--kernel", choices=("ntk", "empirical"), default="ntk")
    g.add_argument("--samples", type=int, default=100_000, help="Monte Carlo samples for --kernel ntk")
    g.set_defaults(func=cmd_gram)

    gen = sub.add_parser("generate", parents=[common], help="write a teacher-labelled dataset to CSV")
    gen.add_argument("output")
    gen.add_argument("--n", type=int, default=200)
    gen.add_argument("--d", type=int, default=10)
    gen.add_argument("--teacher", default="linear_bias")
    gen.add_argument("--margin-floor", type=float, default=0.5)
    gen.add_argument("--bias-s", type=float, default=0.1)
    gen.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    try:
        with threadpool_limits(limits=threads_from_env()):
            return args.func(args)
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
