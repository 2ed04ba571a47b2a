"""Command-line entry point: ``countstat <subcommand> [options]``.

Exit codes: 0 on success, 2 for usage and input errors, 1 when a
computation fails (divergent posterior, singular covariance, ...).
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys

import numpy as np

from . import bayes, combine, coverage, gof, significance
from .core import CountStatError, CountingModel, ModelError, Observation, sigma_to_p
from .frequentist import GaussianModel, classical_upper_limit, fc_interval
from .io import (
    RunManifest,
    Timer,
    coverage_records,
    column,
    emit,
    load_model,
    read_table,
)
from .profile import profile_interval

STOCHASTIC = {"coverage", "systematics"}


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _common() -> argparse.ArgumentParser:
    # accepted both before and after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--model", metavar="FILE", default=argparse.SUPPRESS,
                   help="counting-model file (key = value lines)")
    g.add_argument("--seed", type=_u64, metavar="U64", default=argparse.SUPPRESS,
                   help="seed for every random draw; required by stochastic commands")
    g.add_argument("--out", metavar="PATH", default=argparse.SUPPRESS,
                   help="write results here instead of standard output")
    g.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)
    g.add_argument("--threads", type=int, metavar="N", default=argparse.SUPPRESS,
                   help="cap on worker threads")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="countstat", parents=[common],
        description="Limits, significances, coverage studies and fit tests for counting experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_, provenance):
        return sub.add_parser(name, parents=[common], help=help_,
                              description=f"{help_}\n\nprovenance: {provenance}",
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("limit", "confidence or credible interval for the signal",
            "Neyman construction (upper / Feldman-Cousins ordering), flat-prior Bayes,"
            " profile likelihood Delta(lnL), CLs")
    p.add_argument("--method", required=True,
                   choices=("fc", "classical", "bayes", "profile", "cls"))
    p.add_argument("--n", type=int, required=True, help="observed count")
    p.add_argument("--b", type=float, help="known background (overrides the model file)")
    p.add_argument("--cl", type=float, default=0.90)
    p.add_argument("--delta", type=float, default=0.5, help="Delta(lnL) for --method profile")
    p.add_argument("--b-aux", type=float, help="background subsidiary result")
    p.add_argument("--eff-aux", type=float, help="efficiency subsidiary result")

    p = add("pvalue", "background-only p-value of an observed count",
            "Poisson tail; plug-in, prior/posterior predictive, supremum,"
            " confidence-interval adjusted and conditional (binomial) treatments of b")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--b", type=float)
    p.add_argument("--strategy", choices=significance.STRATEGIES)
    p.add_argument("--b-aux", type=float)
    p.add_argument("--b-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--gamma", type=float, default=significance.DEFAULT_GAMMA)
    p.add_argument("--tau", type=float)

    p = add("combine-p", "combine independent p-values with a pre-declared rule",
            "minimum-p and product (Fisher) rules")
    p.add_argument("--p", type=float, nargs="+", required=True)
    p.add_argument("--rule", choices=significance.COMBINATION_RULES, required=True)

    p = add("cls", "CLs value, or the CLs upper limit when --s is omitted",
            "CLs = (1 - p1) / (1 - p0) with the count as statistic")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--b", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--cl", type=float, default=0.90)

    p = add("sensitivity", "Punzi sensitivity, or median expected limit with --median",
            "power-based sensitivity; median of background-only toy limits")
    p.add_argument("--alpha", type=float, help="significance level (default: 5 sigma one-sided)")
    p.add_argument("--power", type=float, default=0.95)
    p.add_argument("--median", action="store_true")
    p.add_argument("--method", default="bayes", choices=("fc", "classical", "bayes", "profile", "cls"))
    p.add_argument("--cl", type=float, default=0.90)
    p.add_argument("--n-toys", type=int, default=1001)
    p.add_argument("--b", type=float)

    p = add("coverage", "coverage of an interval method versus the true signal",
            "toy Monte Carlo over repeated pseudo-experiments")
    p.add_argument("--method", required=True, choices=coverage.METHODS)
    p.add_argument("--cl", type=float, default=0.90)
    p.add_argument("--s-min", type=float, default=0.0)
    p.add_argument("--s-max", type=float, default=20.0)
    p.add_argument("--s-step", type=float, default=0.1)
    p.add_argument("--n-toys", type=int, default=100_000)
    p.add_argument("--b", type=float)
    p.add_argument("--delta", type=float, help="Delta(lnL) for --method profile")

    p = add("systematics", "unisim versus multisim systematic spread",
            "one-factor-at-a-time versus joint nuisance variation")
    p.add_argument("--response", choices=("sum", "sum-squares"), default="sum",
                   help="T = sum(nu) or T = sum(nu^2)")
    p.add_argument("--sigma", type=float, nargs="+", required=True)
    p.add_argument("--rho", type=float, default=0.0, help="common correlation coefficient")
    p.add_argument("--n-multisim", type=int, default=10_000)

    p = add("combine", "weighted average of measurements from a CSV file",
            "inverse-variance weighting, correlated (BLUE) average, scale factor")
    p.add_argument("--input", required=True, help="CSV with columns value,sigma")
    p.add_argument("--rho", type=float, help="correlation coefficient for two measurements")

    p = add("blind", "hide a value behind a key-derived offset", "hidden-offset blinding")
    p.add_argument("--value", type=float, required=True)
    p.add_argument("--key", required=True)

    p = add("unblind", "remove a key-derived offset", "hidden-offset blinding")
    p.add_argument("--value", required=True)
    p.add_argument("--key", required=True)

    p = add("gof", "goodness-of-fit tests",
            "binned chi-square, chi-square difference (Wilks), two-sample energy test")
    gsub = p.add_subparsers(dest="gof_command", required=True, metavar="TEST")
    q = gsub.add_parser("chi2", parents=[common], help="binned chi-square against a prediction")
    q.add_argument("--input", required=True, help="CSV with columns low,high,observed,predicted")
    q.add_argument("--n-fitted", type=int, default=0)
    q = gsub.add_parser("delta-chi2", parents=[common], help="Wilks test of a chi-square improvement")
    q.add_argument("--chi2-0", type=float, required=True)
    q.add_argument("--chi2-1", type=float, required=True)
    q.add_argument("--k", type=int, default=1)
    q = gsub.add_parser("energy", parents=[common], help="two-sample energy test")
    q.add_argument("--a", required=True, help="CSV of sample A, one point per row")
    q.add_argument("--b", required=True, help="CSV of sample B")
    q.add_argument("--scales", type=float, nargs="+")
    q.add_argument("--epsilon", type=float)
    q.add_argument("--n-perm", type=int, default=999)
    return parser


def _model(args) -> CountingModel:
    model = load_model(args.model) if getattr(args, "model", None) else CountingModel()
    b = getattr(args, "b", None)
    if isinstance(b, float):
        if not model.background.exact:
            raise ModelError("--b sets an exact background; the model file gives it an uncertainty")
        model = CountingModel(b_mean=b, eff_mean=model.eff_mean, eff_rel_sigma=model.eff_rel_sigma,
                              eff_form=model.eff_form, tau=model.tau)
    args.resolved_model = dataclasses.asdict(model)
    return model


def _obs(args, model) -> Observation:
    b_aux = getattr(args, "b_aux", None)
    eff_aux = getattr(args, "eff_aux", None)
    if b_aux is not None and model.b_form == "gamma-from-count":
        b_aux = int(b_aux)
    if eff_aux is not None and model.eff_form == "gamma-from-count":
        eff_aux = int(eff_aux)
    return model.observation(args.n, b_aux, eff_aux)


def _interval_record(method, n, b, r):
    return {"method": method, "n": n, "b": b, "cl": r.cl,
            "lower": r.lower, "upper": r.upper, "empty": r.empty}


def cmd_limit(args):
    model = _model(args)
    obs = _obs(args, model)
    m = args.method
    if m in ("fc", "classical", "cls") and not model.nuisance_free:
        raise ModelError(f"--method {m} needs exact background and efficiency")
    eff = model.eff_mean
    if m == "fc":
        r = fc_interval(obs.n, model.b_mean, args.cl)
    elif m == "classical":
        r = classical_upper_limit(obs.n, model.b_mean, args.cl)
    elif m == "cls":
        up = significance.cls_upper_limit(obs.n, model.b_mean, args.cl, eff)
        return [{"method": m, "n": obs.n, "b": model.b_mean, "cl": args.cl,
                 "lower": 0.0, "upper": up, "empty": False}]
    elif m == "bayes":
        return [_interval_record(m, obs.n, model.b_mean, bayes.upper_limit(model, obs, args.cl))]
    else:
        return [_interval_record(m, obs.n, model.b_mean, profile_interval(model, obs, args.delta))]
    if not r.empty and eff != 1.0:
        r = type(r)(r.lower / eff, r.upper / eff, r.cl, r.method)
    return [_interval_record(m, obs.n, model.b_mean, r)]


def _report(rep):
    return {"method": rep.method, "p": rep.p, "sigma": rep.sigma_equiv}


def cmd_pvalue(args):
    model = _model(args)
    if args.strategy is None:
        if not model.background.exact:
            raise ModelError("the background is uncertain: choose a --strategy")
        return [{**_report(significance.pvalue_counting(args.n, model.b_mean)), "n": args.n,
                 "b": model.b_mean}]
    obs = _obs(args, model)
    rep = significance.pvalue_nuisance(obs, model, args.strategy, b_range=args.b_range,
                                       gamma=args.gamma, tau=args.tau)
    return [{**_report(rep), "n": args.n, "b": model.b_mean}]


def cmd_combine_p(args):
    return [_report(significance.combine_pvalues(args.p, args.rule))]


def cmd_cls(args):
    model = _model(args)
    if not model.nuisance_free:
        raise ModelError("cls needs exact background and efficiency")
    if args.s is None:
        up = significance.cls_upper_limit(args.n, model.b_mean, args.cl, model.eff_mean)
        return [{"n": args.n, "b": model.b_mean, "cl": args.cl, "upper": up}]
    r = significance.cls_counting(args.n, model.b_mean, args.s, model.eff_mean)
    return [{"n": args.n, "b": model.b_mean, "s": args.s, "cls": r.value, "clsb": r.clsb,
             "clb": r.clb, "excluded": r.excluded}]


def cmd_sensitivity(args):
    model = _model(args)
    if args.median:
        _need_seed(args)
        med = significance.median_sensitivity(model, args.cl, args.n_toys, args.seed, args.method)
        return [{"method": args.method, "cl": args.cl, "n_toys": args.n_toys, "median_upper": med}]
    alpha = sigma_to_p(5.0) if args.alpha is None else args.alpha
    r = significance.punzi_sensitivity(model, alpha, args.power)
    return [{"b": r.b, "alpha": r.alpha, "alpha_actual": r.alpha_actual, "power_required": r.cl,
             "t_crit": r.t_crit, "s_min": r.s_min, "power": r.power}]


def _need_seed(args):
    if getattr(args, "seed", None) is None:
        raise UsageError(f"{args.command} is stochastic and needs an explicit --seed")


def cmd_coverage(args):
    if args.s_step <= 0 or args.s_max < args.s_min:
        raise UsageError(f"bad signal grid: --s-min {args.s_min} --s-max {args.s_max} --s-step {args.s_step}")
    n_pts = int(math.floor((args.s_max - args.s_min) / args.s_step + 1e-9)) + 1
    grid = args.s_min + args.s_step * np.arange(n_pts)
    model = GaussianModel() if args.method == "flip-flop" else _model(args)
    curve = coverage.coverage_scan(args.method, model, grid, args.cl, args.n_toys, args.seed,
                                   threads=getattr(args, "threads", 1), delta=args.delta)
    return coverage_records(curve)


def cmd_systematics(args):
    sig = np.asarray(args.sigma, dtype=float)
    if np.any(sig <= 0):
        raise UsageError(f"--sigma values must be positive, got {args.sigma}")
    corr = np.full((sig.size, sig.size), args.rho)
    np.fill_diagonal(corr, 1.0)
    cov = corr * np.outer(sig, sig)
    resp = (lambda v: float(np.sum(v))) if args.response == "sum" else (lambda v: float(np.sum(v**2)))
    r = coverage.systematics_compare(resp, np.zeros(sig.size), cov, args.n_multisim, args.seed)
    rows = [{"item": f"unisim_{i}", "value": s} for i, s in enumerate(r.unisim_shifts)]
    rows += [{"item": "unisim_quadrature", "value": r.quadrature},
             {"item": "multisim", "value": r.multisim},
             {"item": "multisim_error", "value": r.multisim_error}]
    return rows


def cmd_combine(args):
    rows = read_table(args.input, ("value", "sigma"))
    vals = column(rows, "value", args.input)
    sigs = column(rows, "sigma", args.input)
    if args.rho is None:
        r = combine.weighted_average([combine.Measurement(v, s) for v, s in zip(vals, sigs)])
    else:
        if len(vals) != 2:
            raise UsageError(f"--rho needs exactly two measurements, {args.input} has {len(vals)}")
        r = combine.correlated_average(combine.MeasurementSet.from_correlation(vals, sigs, args.rho))
    return [{"a_best": r.a_best, "sigma_best": r.sigma_best, "S": r.S,
             "scale_factor": r.scale_factor, "scaled_sigma": r.scaled_sigma,
             "outside_range": r.outside_range}]


def cmd_blind(args):
    return [{"blinded": str(combine.blind_offset(args.value, args.key))}]


def cmd_unblind(args):
    try:
        value = combine.unblind(args.value, args.key)
    except ArithmeticError:
        raise UsageError(f"--value must be a decimal number, got {args.value!r}") from None
    return [{"value": repr(value)}]


def cmd_gof(args):
    if args.gof_command == "chi2":
        rows = read_table(args.input, ("low", "high", "observed", "predicted"))
        lo = column(rows, "low", args.input)
        hi = column(rows, "high", args.input)
        if np.any(lo[1:] != hi[:-1]):
            raise UsageError(f"{args.input}: bins must be contiguous (high of one row = low of the next)")
        var = column(rows, "variance", args.input) if "variance" in rows[0] else None
        data = gof.BinnedData(np.append(lo, hi[-1]), column(rows, "observed", args.input), var)
        r = gof.chi2_binned(data, column(rows, "predicted", args.input), args.n_fitted)
        return [{"S": r.S, "ndof": r.ndof, "p": r.p, "small_prediction": r.small_prediction}]
    if args.gof_command == "delta-chi2":
        r = gof.delta_chi2_wilks(args.chi2_0, args.chi2_1, args.k)
        return [{"delta_chi2": r.delta, "k": r.k_extra, "p": r.p, "sigma": r.sigma}]
    _need_seed(args)
    a = np.loadtxt(args.a, delimiter=",", ndmin=2)
    b = np.loadtxt(args.b, delimiter=",", ndmin=2)
    r = gof.energy_test(gof.TwoSample(a, b, args.scales), args.epsilon, args.n_perm, args.seed)
    return [{"E": r.E, "p": r.p, "n_perm": r.n_perm, "exhaustive": r.exhaustive}]


COMMANDS = {
    "limit": cmd_limit,
    "pvalue": cmd_pvalue,
    "combine-p": cmd_combine_p,
    "cls": cmd_cls,
    "sensitivity": cmd_sensitivity,
    "coverage": cmd_coverage,
    "systematics": cmd_systematics,
    "combine": cmd_combine,
    "blind": cmd_blind,
    "unblind": cmd_unblind,
    "gof": cmd_gof,
}


def _params(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "format")}


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name, default in (("seed", None), ("out", None), ("format", "csv"), ("threads", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        if args.command in STOCHASTIC:
            _need_seed(args)
        with Timer() as t:
            records = COMMANDS[args.command](args)
        manifest = RunManifest(args.command, _params(args), args.seed, wall_time=t.elapsed)
        emit(records, args.format, args.out, manifest, stdout)
    except (UsageError, ModelError, ValueError) as exc:
        print(f"countstat {args.command}: error: {exc}", file=stderr)
        return 2
    except (CountStatError, OSError) as exc:
        print(f"countstat {args.command}: error: {exc}", file=stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
