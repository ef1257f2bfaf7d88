"""Command-line entry point: ``dpadapt <subcommand> [options]``.

Exit status is 0 on success, 2 on a configuration or input error, and 3 on
an I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from dpadapt import bench, testkit
from dpadapt.geometry import DiagonalMetric
from dpadapt.moments import MomentEstimate, hat_C, private_second_moment
from dpadapt.optimizers import ConfigError, OptConfig, run
from dpadapt.privacy import AccountantLedger, PrivacyBudget, accountant_multiplier, account_detail, max_steps
from dpadapt.problems import Dataset, gen_abs_regression, power_sigma

log = logging.getLogger("dpadapt")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
VERIFIERS = ("projection_bias", "sum_inequality", "truncation_bias", "concentration")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _emit(payload, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_config(args) -> bench.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = bench.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    sigma = power_sigma(args.d, args.sigma_exponent)
    seed = 0 if args.seed is None else args.seed
    data = gen_abs_regression(args.n, args.d, sigma, args.tau, np.random.default_rng(seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save(out)
    log.info("wrote %s (n=%d, d=%d)", out, data.n, data.d)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    method = cfg.methods[0]
    if args.method is not None:
        by_name = {m.name: m for m in cfg.methods}
        if args.method not in by_name:
            raise ConfigError(f"no method named {args.method!r} in the config")
        method = by_name[args.method]
    eps = args.epsilon if args.epsilon is not None else (cfg.epsilons[0] if method.private else math.inf)
    alpha = args.stepsize if args.stepsize is not None else cfg.stepsizes[0]
    problem, sigma = bench.build_problem(cfg.problem)
    C = bench.resolve_metric(method, problem, sigma, cfg.delta, cfg.seed)
    B = bench.resolve_clip(method, problem, C, eps, cfg.delta)[0]
    budget = PrivacyBudget(eps, cfg.delta) if method.private else None
    opt = OptConfig(
        alpha=alpha, steps=cfg.steps or max_steps(problem.n, cfg.batch, cfg.c), batch=cfg.batch, C=C,
        clip_B=B, budget=budget, clipper=method.clipper, seed=cfg.seed, c=cfg.c, log_every=cfg.log_every,
    )
    tr = run(method.algorithm, problem, opt)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"iteration": tr.steps, "loss": tr.loss}).to_csv(out / "trace.csv", index=False)
    _emit({
        "method": method.name, "algorithm": method.algorithm, "epsilon": eps, "stepsize": alpha,
        "clip_B": B, "seed": cfg.seed, "loss_init": tr.loss_init, "loss_final": float(tr.loss[-1]),
        "loss_bar": tr.loss_bar, "x_bar": tr.x_bar.tolist(), "noise_scale": tr.meta["noise_scale"],
    }, str(out / "run.json"))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    result = bench.sweep(cfg, jobs=args.jobs)
    result.table.to_csv(out / "table.csv", index=False)
    result.best.to_csv(out / "best.csv", index=False)
    result.summary.to_csv(out / "summary.csv", index=False)
    bench.report(result, out, seed=cfg.seed)
    log.info("wrote %d rows to %s", len(result.table), out)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        table = pd.read_csv(args.table)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"{args.table}: malformed table ({exc})") from exc
    paths = bench.report(table, args.out or ".", seed=0 if args.seed is None else args.seed)
    _emit(paths, None)
    return EXIT_OK


def cmd_estimate(args) -> int:
    data = Dataset.load(args.data)
    seed = 0 if args.seed is None else args.seed
    scale = args.scale
    est = private_second_moment(data.features / scale, args.r, PrivacyBudget(args.epsilon, args.delta),
                                np.random.default_rng(seed))
    est = MomentEstimate(est.sigma_hat * scale, est.r, est.source, est.frozen_at)
    _emit({
        "sigma_hat": est.sigma_hat.tolist(),
        "C_hat": hat_C(est).entries.tolist(),
        "r": args.r, "epsilon": args.epsilon, "delta": args.delta, "scale": scale, "seed": seed,
    }, args.out)
    return EXIT_OK


def cmd_accountant(args) -> int:
    if args.b > args.n:
        raise ConfigError("batch size exceeds the dataset size")
    z = accountant_multiplier(args.scale, args.b)
    ledger = AccountantLedger().add(args.b / args.n, z, args.steps)
    res = account_detail(ledger, args.delta)
    if args.json:
        _emit({"epsilon": res.epsilon, "delta": args.delta, "order": res.order, "q": args.b / args.n,
               "noise_multiplier": z, "steps": args.steps}, None)
    else:
        print(f"{res.epsilon:.6g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    which = VERIFIERS if args.which == "all" else (args.which,)
    reports = []
    for name in which:
        if name == "projection_bias":
            dist = testkit.GaussianDist(np.array([1.0, 0.5, 0.25, 0.125]))
            C = DiagonalMetric(np.array([1.0, 2.0, 4.0, 8.0]))
            rep = testkit.verify_projection_bias(dist, C, args.B, args.p, args.trials, rng)
        elif name == "sum_inequality":
            rep = testkit.fuzz_sum_inequality(args.trials, rng)
        elif name == "truncation_bias":
            rep = testkit.verify_truncation_bias(args.sigma, args.r, args.trials, rng)
        else:
            rep = testkit.verify_concentration(args.sigma, args.r, args.n, args.beta, args.trials, rng)
        reports.append(rep.to_dict())
    _emit(reports if len(reports) > 1 else reports[0], args.out)
    return EXIT_OK if all(r["passed"] for r in reports) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON")
    common.add_argument("--out", help="output path or directory")
    common.add_argument("--seed", type=_seed, default=None, help="seed (unsigned 64-bit)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dpadapt", description="Private adaptive optimization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic absolute-regression dataset")
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--d", type=int, default=100)
    g.add_argument("--sigma-exponent", type=float, default=1.5)
    g.add_argument("--tau", type=float, default=0.01)
    g.set_defaults(func=cmd_gen_data, out_required=True)

    r = sub.add_parser("run", parents=[common], help="one optimizer run from an experiment config")
    r.add_argument("--method", help="method name (default: first in the config)")
    r.add_argument("--epsilon", type=float)
    r.add_argument("--stepsize", type=float)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="grid sweep with seeded repetitions")
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", parents=[common], help="summarize a result table")
    rp.add_argument("--table", required=True, help="table.csv written by sweep")
    rp.set_defaults(func=cmd_report)

    e = sub.add_parser("estimate", parents=[common], help="private per-coordinate scale estimate")
    e.add_argument("--data", required=True, help="dataset CSV")
    e.add_argument("--r", type=float, default=2.0)
    e.add_argument("--epsilon", type=float, required=True)
    e.add_argument("--delta", type=float, default=1e-5)
    e.add_argument("--scale", type=float, default=1.0, help="public bound on the largest coordinate scale")
    e.set_defaults(func=cmd_estimate)

    a = sub.add_parser("accountant", parents=[common], help="epsilon achieved by a noise scale")
    a.add_argument("--n", type=int, required=True)
    a.add_argument("--b", type=int, required=True)
    a.add_argument("--steps", "-T", type=int, required=True)
    a.add_argument("--scale", type=float, required=True)
    a.add_argument("--delta", type=float, default=1e-5)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_accountant)

    v = sub.add_parser("verify", parents=[common], help="Monte-Carlo lemma checks")
    v.add_argument("--which", choices=("all",) + VERIFIERS, default="all")
    v.add_argument("--trials", type=int, default=100_000)
    v.add_argument("--sigma", type=float, default=1.0)
    v.add_argument("--r", type=float, default=2.0)
    v.add_argument("--n", type=int, default=1000)
    v.add_argument("--beta", type=float, default=0.05)
    v.add_argument("--B", type=float, default=2.0)
    v.add_argument("--p", type=float, default=2.0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "out_required", False) and not args.out:
        parser.error("--out is required")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
