"""``ddcpi`` command-line entry point.

Exit codes: 0 success, 1 failed check or numerical failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import __version__
from .asymptotics import IllConditioned, limit_inputs, summaries_for, w_av, write_summary_csv
from .config import (
    ConfigError,
    build_model,
    load_document,
    load_experiment,
    model_settings,
    parse_design,
    parse_number,
)
from .dgp import NonSmoothDesignError, read_dataset_csv, sample_dataset, true_joint, write_dataset_csv
from .estimate import InvalidReplication, estimate_from_data
from .mc import WORKERS_ENV, ExperimentError, k_invariance_report, run_experiment
from .model import ConvergenceError, ModelError, solve_ccp_fixed_point, varphi_map
from .verify import FAULTS, SUITES, run_suite

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _fmt(x):
    return repr(float(x))


def _row(values):
    return " ".join(_fmt(v) for v in np.ravel(values))


def _load_model(path):
    doc = load_document(path)
    settings = model_settings(doc)
    return doc, build_model(settings), np.array(settings["alpha"]), np.array(settings["theta_f"])


def cmd_solve(args):
    _, model, alpha, theta_f = _load_model(args.config)
    res = solve_ccp_fixed_point(model, alpha, theta_f, tol=args.tol, full_output=True)
    V = varphi_map(model, alpha, theta_f, res.P)
    print(f"iterations {res.iterations}")
    print(f"residual {_fmt(res.residual)}")
    print(f"states {' '.join(str(s) for s in range(1, model.n_states + 1))}")
    # one row per action, one column per state
    for a in range(model.n_actions):
        print(f"P[a={a + 1}] {_row(res.P[:, a])}")
    print(f"V {_row(V)}")
    return EXIT_OK


def _design_weight(doc, model):
    design = parse_design(doc) if "design" in doc else None
    if design is None:
        raise ConfigError("--weight w_av needs a design section in the configuration")
    return w_av(limit_inputs(model, design, with_bias=False))


def cmd_estimate(args):
    doc, model, _, _ = _load_model(args.config)
    try:
        data = read_dataset_csv(args.data, model.n_states, model.n_actions)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.data}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    W = None
    if args.estimator == "md" and args.weight == "w_av":
        W = _design_weight(doc, model)
    elif args.estimator == "ml" and args.weight != "identity":
        raise ConfigError("--weight applies to the md estimator only")
    trace = estimate_from_data(model, data, args.k, args.estimator, W, keep_ccps=False)
    if args.json:
        print(trace.to_json())
        return EXIT_OK if trace.ok else EXIT_FAIL
    print(f"estimator {args.estimator} weight {args.weight if args.estimator == 'md' else '-'} n {data.n}")
    print(f"theta_f {_row(trace.theta_f_hat)}")
    for k in range(trace.K):
        flags = "" if trace.converged[k] else " not-converged"
        flags += " at-bound" if trace.at_bound[k] else ""
        print(f"stage {k + 1} alpha {_row(trace.alpha_stages[k])} criterion "
              f"{_fmt(trace.criterion_values[k])}{flags}")
    return EXIT_OK if trace.ok else EXIT_FAIL


def cmd_simulate(args):
    doc, model, _, _ = _load_model(args.config)
    design = parse_design(doc)
    if args.delta is not None:
        design = type(design)(**{**{k: v for k, v in design.__dict__.items() if k != "kind"},
                                 "delta": args.delta})
    data = sample_dataset(true_joint(model, design, args.n), args.n, args.seed,
                          model.n_states, model.n_actions)
    write_dataset_csv(data, args.out)
    print(f"wrote {data.n} observations to {args.out}")
    return EXIT_OK


def cmd_experiment(args):
    config = load_experiment(args.config, full_scale=args.full_scale, replications=args.replications)

    def progress(done, total):
        if not args.quiet:
            print(f"\r{done}/{total} replications", end="", file=sys.stderr, flush=True)

    result = run_experiment(config, args.out, args.workers, args.resume, args.force, progress)
    if not args.quiet:
        print(file=sys.stderr)
    worst = {}
    for item in k_invariance_report(result.rows):
        key = (item["K"], item["K_other"])
        worst[key] = max(worst.get(key, 0.0), item["bias_diff"], item["sd_diff"])
    print(f"wrote {args.out}/summary.csv ({len(result.rows)} rows, {len(result.records)} records)")
    for (k1, k2), v in sorted(worst.items()):
        print(f"K={k1} vs K={k2}: max scaled bias/SD difference {_fmt(v)}")
    return EXIT_OK


def cmd_verify(args):
    checks = run_suite(args.suite, args.inject_fault)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_asymptotics(args):
    doc, model, _, _ = _load_model(args.config)
    design = parse_design(doc)
    delta = design.delta if args.delta is None else args.delta
    if math.isinf(delta) or design.kind == "correct":
        delta = 1.0
    inputs = limit_inputs(model, design, delta=delta, with_bias=delta <= 0.5)
    summaries = summaries_for(inputs)
    names = ("replace_cost", "mileage_cost")
    for (est, label, dl), s in summaries.items():
        for k, name in enumerate(names):
            print(f"{est} W={label} delta={_fmt(dl)} regime {s.regime} {name} AB {_fmt(s.AB[k])} "
                  f"AV {_fmt(s.AV[k, k])} AMSE {_fmt(s.AMSE[k, k])}")
    if args.out:
        write_summary_csv(summaries, args.out, names)
    return EXIT_OK


def _delta_arg(text):
    try:
        return parse_number(text, "--delta")
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    p = argparse.ArgumentParser(prog="ddcpi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ddcpi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve the model's CCP fixed point")
    s.add_argument("config")
    s.add_argument("--tol", type=float, default=1e-12)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("estimate", help="K-stage estimation on a dataset CSV (a,x,x_next; 1-based)")
    s.add_argument("config")
    s.add_argument("data")
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--estimator", choices=("ml", "md"), default="ml")
    s.add_argument("--weight", choices=("identity", "w_av"), default="identity")
    s.add_argument("--json", action="store_true", help="print the trace as one JSON object")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="draw a dataset from the configured design")
    s.add_argument("config")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--delta", type=_delta_arg, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("experiment", help="run a Monte Carlo experiment")
    s.add_argument("config")
    s.add_argument("--out", required=True, help="output directory (created if missing)")
    s.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    s.add_argument("--full-scale", action="store_true", help="use full_scale_replications")
    s.add_argument("--replications", type=int, default=None, help="override the replication count")
    s.add_argument("--resume", action="store_true", help="continue an unfinished run")
    s.add_argument("--force", action="store_true", help="discard an unfinished run and start over")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("verify", help="run the numerical property checks")
    s.add_argument("--suite", choices=SUITES, default="all")
    s.add_argument("--inject-fault", choices=FAULTS, default="none",
                   help="deliberately corrupt a computation to confirm the checks catch it")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("asymptotics", help="asymptotic bias, variance and MSE at the limit")
    s.add_argument("config")
    s.add_argument("--delta", type=_delta_arg, default=None)
    s.add_argument("--out", default=None, help="also write a CSV")
    s.set_defaults(func=cmd_asymptotics)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "k", 1) < 1:
        parser.error("--k must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, ExperimentError) as exc:
        print(f"ddcpi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, ConvergenceError, InvalidReplication, IllConditioned, NonSmoothDesignError) as exc:
        print(f"ddcpi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"ddcpi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
