"""Command-line entry point: ``semicausal {estimate,simulate,eif-check,rates}``.

Exit status is 0 on success, 1 on a usage error and 2 when a computation or
file operation fails.  Machine output is JSON with sorted keys and floats
written with 17 significant digits; identical inputs and seed give
byte-identical files whatever ``--threads`` is.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from importlib import resources

import numpy as np

from .core import Dataset, DiscreteDistribution
from .estimators import aipw_ate, crossfit_aipw, ipw_estimated_parametric, ipw_report
from .exceptions import ParseError, SemicausalError
from .nuisance import NuisancePair, make_learner
from .oracle import (
    check_eif,
    efficient_influence_function,
    ipw_influence_function,
    known_propensity_perturbation,
    random_perturbation,
)
from .simulation import ESTIMATORS, DGPSpec, rate_experiment, run_monte_carlo

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_SEED = 20240101
SEED_ENV = "SEMICAUSAL_SEED"
ESTIMATE_METHODS = ("aipw", "crossfit_aipw", "ipw", "ipw_estimated")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- serialisation

def _format_float(x):
    if not math.isfinite(x):
        return "null"
    text = format(x, ".17g")
    if not any(c in text for c in ".en"):
        text += ".0"
    return text


def _encode(obj, indent, depth):
    pad = " " * (indent * (depth + 1))
    end = " " * (indent * depth)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted((str(k), v) for k, v in obj.items())
        body = ",\n".join(f"{pad}{json.dumps(k)}: {_encode(v, indent, depth + 1)}" for k, v in items)
        return "{\n" + body + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, bool, np.number, np.bool_)) or v is None for v in obj):
            return "[" + ", ".join(_encode(v, indent, depth + 1) for v in obj) + "]"
        body = ",\n".join(pad + _encode(v, indent, depth + 1) for v in obj)
        return "[\n" + body + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(report, indent=2):
    """JSON text with sorted keys and 17-significant-digit floats."""
    return _encode(report, indent, 0) + "\n"


def _atomic_write(text, path):
    path = os.fspath(path)
    if os.path.isdir(path):
        raise IsADirectoryError(f"output path {path!r} is a directory")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(report, path):
    """Write ``report`` as JSON to ``path`` atomically (temp file then rename).

    ``path`` of ``None`` or ``"-"`` writes to standard output.
    """
    text = dumps(report)
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    _atomic_write(text, path)


def write_per_rep(rows, path):
    """One CSV row per replication and estimator: ``rep, estimator, psi_hat, se, covered``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rep", "estimator", "psi_hat", "se", "covered"])
    for row in rows:
        writer.writerow([row["rep"], row["estimator"], _format_float(row["psi_hat"]),
                         _format_float(row["se"]), int(row["covered"])])
    _atomic_write(buf.getvalue(), path)


def load_config(path):
    """Read a mapping from a JSON file, or TOML when the suffix is ``.toml``."""
    path = os.fspath(path)
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            try:
                config = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ParseError(f"{path}: {exc}") from None
    else:
        with open(path, encoding="utf-8") as fh:
            try:
                config = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(config, dict):
        raise ParseError(f"{path}: top level must be a mapping")
    return config


def example_path(name):
    """Path of a bundled example file (``example_distribution.json``, ``example_config.json``)."""
    return str(resources.files("semicausal").joinpath("data", name))


# ---------------------------------------------------------------- argument types

def _existing_file(value):
    if not os.path.isfile(value):
        raise argparse.ArgumentTypeError(f"no such file: {value!r}")
    return value


def _positive_int(value):
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if k < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}")
    return k


def _level(value):
    try:
        x = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {value!r}") from None
    if not 0 < x < 1:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {value!r}")
    return x


def _int_list(value):
    try:
        items = [int(float(v)) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None
    if not items or min(items) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {value!r}")
    return items


def _name_list(value):
    names = [v.strip() for v in value.split(",") if v.strip()]
    unknown = [v for v in names if v not in ESTIMATORS]
    if not names or unknown:
        raise argparse.ArgumentTypeError(f"unknown estimators {unknown}; available: {', '.join(sorted(ESTIMATORS))}")
    return names


def _add_common(p, threads_help):
    p.add_argument("--seed", type=int, default=None,
                   help=f"master random seed; defaults to ${SEED_ENV} or {DEFAULT_SEED}")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help=f"worker threads ({threads_help}); output does not depend on it (default 1)")
    p.add_argument("--out", default=None, help="output JSON path; standard output when omitted or '-'")


def build_parser():
    parser = _Parser(prog="semicausal", description="Doubly robust ATE estimation, simulation and exact oracle checks.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("estimate", help="estimate the ATE from a CSV dataset",
                       description="Estimate the average treatment effect from a CSV with columns l1..ld, a, y.")
    p.add_argument("--data", required=True, type=_existing_file, help="dataset CSV (columns l1..ld, a, y)")
    p.add_argument("--config", required=True, type=_existing_file,
                   help="learner configuration (JSON, or TOML with a .toml suffix): keys estimator "
                        f"({' | '.join(ESTIMATE_METHODS)}), propensity, outcome, folds, level, delta")
    p.add_argument("--level", type=_level, default=None, help="confidence level; overrides the config (default 0.95)")
    p.add_argument("--folds", type=_positive_int, default=None, help="cross-fitting folds; overrides the config (default 5)")
    p.add_argument("--delta", type=float, default=None, help="propensity truncation bound; overrides the config (default 0.01)")
    _add_common(p, "cross-fitting folds are fit concurrently")

    p = sub.add_parser("simulate", help="Monte-Carlo study on a discrete-covariate DGP",
                       description="Replicate estimators over datasets drawn from a DGP and summarise bias, "
                                   "spread and interval coverage.")
    p.add_argument("spec", nargs="?", type=_existing_file, default=None,
                   help="DGP file (TOML or JSON, DGPSpec fields); the default DGP when omitted")
    p.add_argument("--n", type=_positive_int, default=500, help="sample size per replication (default 500)")
    p.add_argument("--reps", type=_positive_int, default=200, help="number of replications (default 200)")
    p.add_argument("--estimators", type=_name_list, default=["aipw"],
                   help=f"comma-separated estimators from {', '.join(sorted(ESTIMATORS))} (default aipw)")
    p.add_argument("--level", type=_level, default=0.95, help="confidence level (default 0.95)")
    p.add_argument("--per-rep", default=None, help="optional CSV with one row per replication and estimator")
    _add_common(p, "replications run concurrently")

    p = sub.add_parser("eif-check", help="exact pathwise-derivative check of influence functions",
                       description="Compare pathwise derivatives of the ATE along perturbations of a discrete law "
                                   "with covariances of the efficient and IPW influence functions.")
    p.add_argument("--dist", type=_existing_file, default=None,
                   help="discrete distribution JSON ({atoms: [{l, a, y, p}], delta}); the bundled example when omitted")
    p.add_argument("--g-list", type=_existing_file, default=None,
                   help="JSON list of perturbations, each a list with one value per atom; random ones when omitted")
    p.add_argument("--n-random", type=_positive_int, default=10,
                   help="number of random perturbations when --g-list is absent (default 10)")
    p.add_argument("--tol", type=float, default=1e-6, help="largest admissible gap (default 1e-6)")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step in epsilon (default 1e-4)")
    _add_common(p, "perturbations are checked concurrently")

    p = sub.add_parser("rates", help="root-n bias of AIPW with nuisances at controlled rates",
                       description="Scaled bias sqrt(n) * bias of AIPW with synthetic nuisances whose errors "
                                   "shrink like n^-r_pi and n^-r_mu.")
    p.add_argument("--spec", type=_existing_file, default=None,
                   help="DGP file (TOML or JSON); the default DGP when omitted")
    p.add_argument("--r-pi", type=float, default=0.3, help="propensity error rate exponent (default 0.3)")
    p.add_argument("--r-mu", type=float, default=0.3, help="outcome error rate exponent (default 0.3)")
    p.add_argument("--scale", type=float, default=1.0, help="error scale c (default 1.0)")
    p.add_argument("--n-grid", type=_int_list, default=[1_000, 10_000, 100_000],
                   help="comma-separated sample sizes (default 1000,10000,100000)")
    p.add_argument("--reps", type=_positive_int, default=2000, help="replications per sample size (default 2000)")
    p.add_argument("--perturb", choices=("both", "pi", "mu"), default="both",
                   help="which nuisance is perturbed (default both)")
    _add_common(p, "replications run concurrently")
    return parser


# ---------------------------------------------------------------- subcommands

def _resolve_seed(seed):
    if seed is not None:
        return seed
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _load_spec(path, **overrides):
    config = load_config(path) if path else {}
    config.update(overrides)
    for key in ("levels", "level_mass", "propensity_coef"):
        if isinstance(config.get(key), list):
            config[key] = tuple(config[key])
    if isinstance(config.get("outcome_coef"), list):
        config["outcome_coef"] = tuple(tuple(row) for row in config["outcome_coef"])
    try:
        return DGPSpec.from_dict(config)
    except SemicausalError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path or '<defaults>'}: invalid DGP file: {exc}") from None


def cmd_estimate(args, seed):
    data = Dataset.from_csv(args.data)
    config = load_config(args.config)
    method = config.get("estimator", "aipw")
    if method not in ESTIMATE_METHODS:
        raise ParseError(f"{args.config}: field 'estimator' must be one of {ESTIMATE_METHODS}, got {method!r}")
    level = args.level if args.level is not None else float(config.get("level", 0.95))
    folds = args.folds if args.folds is not None else int(config.get("folds", 5))
    delta = args.delta if args.delta is not None else config.get("delta")
    blocks = {}
    for key in ("propensity", "outcome"):
        block = dict(config.get(key) or {"method": "logistic" if key == "propensity" else "ols"})
        if delta is not None and key == "propensity":
            block["delta"] = float(delta)
        blocks[key] = block
    if method == "crossfit_aipw":
        report = crossfit_aipw(data, blocks["propensity"], blocks["outcome"], folds=folds, seed=seed,
                               level=level, threads=args.threads)
    elif method == "aipw":
        nuisance = NuisancePair(make_learner(blocks["propensity"], seed)(data),
                                make_learner(blocks["outcome"], seed)(data))
        report = aipw_ate(data, nuisance, level)
    elif method == "ipw":
        report = ipw_report(data, make_learner(blocks["propensity"], seed)(data), level)
    else:
        prop = blocks["propensity"]
        kwargs = {"delta": float(prop["delta"])} if "delta" in prop else {}
        report = ipw_estimated_parametric(data, prop.get("features"), level, **kwargs)
    out = report.to_dict()
    out["diagnostics"] = {**out["diagnostics"], "seed": seed}
    return out


def cmd_simulate(args, seed):
    spec = _load_spec(args.spec)
    summary = run_monte_carlo(spec, args.estimators, args.n, args.reps, seed, level=args.level, threads=args.threads)
    if args.per_rep:
        write_per_rep(summary.per_rep, args.per_rep)
    return summary.to_dict()


def cmd_eif_check(args, seed):
    path = args.dist or example_path("example_distribution.json")
    base = DiscreteDistribution.from_json(path)
    if args.g_list:
        with open(args.g_list, encoding="utf-8") as fh:
            try:
                perturbations = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{args.g_list}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(perturbations, list) or not all(isinstance(g, list) for g in perturbations):
            raise ParseError(f"{args.g_list}: expected a list of lists of numbers")
        perturbations = [np.asarray(g, dtype=float) for g in perturbations]
    else:
        rng = np.random.default_rng(seed)
        perturbations = [random_perturbation(base, rng) for _ in range(args.n_random)]
    eif = check_eif(base, efficient_influence_function(base), perturbations, tol=args.tol, step=args.step,
                    threads=args.threads)
    known = [known_propensity_perturbation(base, g) for g in perturbations]
    ipw = check_eif(base, ipw_influence_function(base), known, tol=args.tol, step=args.step, threads=args.threads)
    return {
        "distribution": os.path.basename(path),
        "atoms": len(base),
        "seed": seed,
        "eif": eif.to_dict(),
        "ipw_known_propensity": ipw.to_dict(),
        "variance_gap": ipw.variance - eif.variance,
        "passed": eif.passed and eif.mean_ok,
    }


def cmd_rates(args, seed):
    overrides = {"rate_pi": args.r_pi, "rate_mu": args.r_mu, "rate_scale": args.scale,
                 "perturb_pi": args.perturb in ("both", "pi"), "perturb_mu": args.perturb in ("both", "mu")}
    spec = _load_spec(args.spec, **overrides)
    return rate_experiment(spec, tuple(args.n_grid), args.reps, seed, threads=args.threads)


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "eif-check": cmd_eif_check, "rates": cmd_rates}


def main(argv=None):
    """Parse ``argv``, run the subcommand and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        seed = _resolve_seed(args.seed)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"semicausal: error: {exc}", file=sys.stderr)
        return 1
    try:
        report = COMMANDS[args.command](args, seed)
        emit_report(report, args.out)
    except (SemicausalError, OSError, np.linalg.LinAlgError) as exc:
        print(f"semicausal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
