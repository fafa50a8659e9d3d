"""Command-line front end.

Subcommands: ``generate``, ``fit``, ``decompose``, ``censor-experiment`` and
``evaluate``.  Outputs are CSV and deterministic JSON only; plotting is left
to external tools.  Exit codes: 0 success, 1 usage or validation error,
2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys

import numpy as np

from .data import (
    GENERATOR_KINDS,
    FixedLower,
    apply_censoring,
    dumps_json,
    ensure_dir,
    generate,
    generate_survival_toy,
    load_csv,
    read_csv_columns,
    write_csv,
    write_json,
)
from .exceptions import CsvParseError, NumericalError
from .gp import decompose, fit_posterior
from .inference import OptimizerConfig, censored_posterior, evaluate_recovery, fit
from .kernels import AddIntParams, IntegrationDomain, KernelKind
from .model import CensoringPrior, ModelConfig

__all__ = ["main", "build_parser", "run_censor_experiment", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
DEFAULT_LOWER_GRID = tuple(float(v) for v in np.linspace(0.7, 1.7, 10))
# planted (z, x) individuals for the censoring experiment; the second one sits
# where y1 carries an interaction and is therefore the more informative
PLANTED_Z = (-2.0, 1.0)

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _name_list(text):
    names = [v.strip() for v in text.split(",") if v.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected at least one name")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cgplvm", description="Covariate GPLVM: fit, decompose and evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset and its ground truth")
    g.add_argument("--kind", required=True, choices=GENERATOR_KINDS)
    g.add_argument("--n", type=int, default=100, help="number of samples")
    g.add_argument("--noise", type=float, default=0.1, help="observation noise std")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--p", type=int, default=8, help="feature count for tabular kinds")
    g.add_argument("--out", required=True, help="data CSV path; truth goes to <stem>_truth.csv")

    f = sub.add_parser("fit", help="fit the model to a CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--covariates", type=_name_list, default=["x"], help="comma-separated covariate columns")
    f.add_argument("--censor-cols", nargs="*", default=[], metavar="COV[:FLAG]",
                   help="censored covariates with their 0/1 flag column (default COV_censored)")
    f.add_argument("--q", type=int, default=1, help="latent dimension")
    f.add_argument("--kernel", choices=["add", "int", "add_int"], default="add_int")
    f.add_argument("--mode", choices=["map", "variational"], default=None,
                   help="default: variational when censoring is present, else map")
    f.add_argument("--iters", type=int, default=OptimizerConfig.max_iters)
    f.add_argument("--restarts", type=int, default=OptimizerConfig.n_restarts)
    f.add_argument("--step-size", type=float, default=OptimizerConfig.step_size)
    f.add_argument("--mc-samples", type=int, default=1)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--weibull-shape", type=float, default=None)
    f.add_argument("--weibull-scale", type=float, default=None)
    f.add_argument("--lifespan-cap", type=float, default=None,
                   help="upper bound for censored values (default 3x the largest observed value)")
    f.add_argument("--out-dir", required=True)

    d = sub.add_parser("decompose", help="component curves of one fitted feature")
    d.add_argument("--fit-dir", required=True)
    d.add_argument("--feature", required=True)
    d.add_argument("--grid-size", type=int, default=50)
    d.add_argument("--out", required=True)

    c = sub.add_parser("censor-experiment", help="vary the censoring lower bound of planted individuals")
    c.add_argument("--kind", choices=["survival_toy"], default="survival_toy")
    c.add_argument("--lower-grid", type=_float_list, default=list(DEFAULT_LOWER_GRID))
    c.add_argument("--true-x", type=float, default=1.5)
    c.add_argument("--n", type=int, default=100)
    c.add_argument("--noise", type=float, default=0.1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--iters", type=int, default=1000)
    c.add_argument("--restarts", type=int, default=1)
    c.add_argument("--step-size", type=float, default=0.02)
    c.add_argument("--weibull-shape", type=float, default=2.0)
    c.add_argument("--weibull-scale", type=float, default=1.0)
    c.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="|Pearson correlation| between fitted and true latents")
    e.add_argument("--latent", required=True)
    e.add_argument("--truth", required=True)
    return parser


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    if args.n < 10:
        raise UsageError("--n must be at least 10")
    if args.noise < 0:
        raise UsageError("--noise must be non-negative")
    ld = generate(args.kind, args.n, args.noise, args.seed, args.p)
    ds = ld.ds
    header = list(ds.feature_names) + list(ds.covariate_names)
    columns = list(ld.raw_Y.T) + list(ld.raw_X.T)
    write_csv(args.out, header, columns)
    truth = _truth_path(args.out)
    write_csv(truth, ["z", "x"], [ld.true_z, ld.true_x])
    print(f"wrote {ds.N} rows x {len(header)} columns to {args.out}")
    print(f"wrote {ds.N} rows x 2 columns to {truth}")


def _truth_path(out):
    stem, ext = os.path.splitext(out)
    return f"{stem}_truth{ext or '.csv'}"


# ---------------------------------------------------------------------------
# fit


def _parse_censor_cols(items, covariates):
    mapping = {}
    for item in items:
        cov, _, flag = item.partition(":")
        if cov not in covariates:
            raise UsageError(f"censored column {cov!r} is not among --covariates {covariates}")
        mapping[cov] = flag or f"{cov}_censored"
    return mapping


def cmd_fit(args):
    censor = _parse_censor_cols(args.censor_cols, args.covariates)
    if censor and (args.weibull_shape is None or args.weibull_scale is None):
        raise UsageError("censored covariates need --weibull-shape and --weibull-scale")
    mode = args.mode or ("variational" if censor else "map")
    if censor and mode != "variational":
        raise UsageError("censored covariates require --mode variational")
    ds = load_csv(args.data, args.covariates, censor)

    prior = None
    if censor:
        raw = ds.raw_X()
        cap = args.lifespan_cap
        if cap is None:
            cap = 3.0 * float(np.max(raw[:, [args.covariates.index(c) for c in censor]]))
        prior = CensoringPrior(args.weibull_shape, args.weibull_scale, cap)
        lower = ds.lower[ds.censored]
        if np.any(lower <= 0) or np.any(lower >= cap):
            raise UsageError("censoring lower bounds must be positive and below the lifespan cap")
    cfg = ModelConfig(Q=args.q, mode=mode, kernel=KernelKind(args.kernel),
                      mc_samples=args.mc_samples, censoring_prior=prior)
    opt = OptimizerConfig(step_size=args.step_size, max_iters=args.iters, seed=args.seed,
                          n_restarts=args.restarts)
    result = fit(ds, cfg, opt)

    ensure_dir(args.out_dir)
    X = ds.X.copy()
    summary = None
    if ds.n_censored:
        summary = censored_posterior(result, ds)
        X[summary.rows, summary.cols] = ds.to_model_x(summary.mean, summary.cols)
    doc = _fit_document(args, ds, cfg, opt, result, X)
    write_json(os.path.join(args.out_dir, "fit.json"), doc)

    Z = result.state.z_mean
    header = [f"z{q + 1}" for q in range(cfg.Q)]
    cols = list(Z.T)
    if mode == "variational":
        header += [f"z{q + 1}_std" for q in range(cfg.Q)]
        cols += list(np.exp(result.state.z_log_std).T)
    write_csv(os.path.join(args.out_dir, "latent.csv"), header, cols)
    if summary is not None:
        write_json(os.path.join(args.out_dir, "censored_posterior.json"), {
            "schema_version": SCHEMA_VERSION,
            "entries": summary.records(ds.covariate_names),
        })
    print(f"fit finished after {result.diagnostics['iterations']} iterations; "
          f"objective {result.final_objective:.6g}; outputs in {args.out_dir}")


def _fit_document(args, ds, cfg, opt, result, X):
    p = result.params
    features = []
    for j, name in enumerate(ds.feature_names):
        v = p.variances[j]
        features.append({
            "name": name,
            "bias_variance": v[0],
            "z_variance": v[1],
            "x_variance": v[2],
            "zx_variance": v[3],
            "noise_variance": p.noise[j],
        })
    prior = cfg.censoring_prior
    return {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "data": args.data,
            "covariates": list(ds.covariate_names),
            "censor_columns": _parse_censor_cols(args.censor_cols, args.covariates),
            "model": {
                "Q": cfg.Q,
                "mode": cfg.mode,
                "kernel": cfg.kernel.value,
                "mc_samples": cfg.mc_samples,
                "domain": [cfg.domain.lower, cfg.domain.upper],
                "lengthscale_prior": [cfg.lengthscale_prior_mean, cfg.lengthscale_prior_std],
                "variance_prior_rate": cfg.variance_prior_rate,
                "censoring_prior": None if prior is None else {
                    "shape": prior.shape, "scale": prior.scale, "lifespan_cap": prior.lifespan_cap},
            },
            "optimizer": dataclasses.asdict(opt),
        },
        "standardisation": {
            "feature_names": list(ds.feature_names),
            "y_shift": ds.y_shift,
            "y_scale": ds.y_scale,
            "covariate_names": list(ds.covariate_names),
            "x_shift": ds.x_shift,
            "x_scale": ds.x_scale,
        },
        "params": {
            "z_lengthscales": p.z_lengthscales,
            "x_lengthscales": p.x_lengthscales,
            "features": features,
        },
        "train": {"Y": ds.Y, "Z": result.state.z_mean, "X": X},
        "objective_trace": result.objective_trace,
        "converged": result.converged,
        "diagnostics": result.diagnostics,
    }


# ---------------------------------------------------------------------------
# decompose


def _load_fit(fit_dir):
    path = os.path.join(fit_dir, "fit.json")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise UsageError(f"{path} is not valid JSON: {err}") from None
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UsageError(f"{path} has schema_version {version!r}, expected {SCHEMA_VERSION}")
    return doc


def cmd_decompose(args):
    doc = _load_fit(args.fit_dir)
    model = doc["config"]["model"]
    names = doc["standardisation"]["feature_names"]
    if args.feature not in names:
        raise UsageError(f"unknown feature {args.feature!r}; available: {', '.join(names)}")
    if model["Q"] != 1 or len(doc["standardisation"]["covariate_names"]) != 1:
        raise UsageError("decompose supports one latent dimension and one covariate")
    if args.grid_size < 2:
        raise UsageError("--grid-size must be at least 2")
    j = names.index(args.feature)
    feat = doc["params"]["features"][j]
    domain = IntegrationDomain(*model["domain"])
    p = AddIntParams(feat["bias_variance"], feat["z_variance"], feat["x_variance"], feat["zx_variance"],
                     np.array(doc["params"]["z_lengthscales"]), np.array(doc["params"]["x_lengthscales"]),
                     domain)
    train = np.hstack([np.array(doc["train"]["Z"], float), np.array(doc["train"]["X"], float)])
    y = np.array(doc["train"]["Y"], float)[:, j]
    post = fit_posterior(train, y, p, KernelKind(model["kernel"]), feat["noise_variance"], feature=args.feature)
    dec = decompose(post, args.grid_size)

    std = doc["standardisation"]
    outside = int(np.sum((train < domain.lower) | (train > domain.upper)))
    components = {"bias": {"mean": [dec.offset]}}
    for name in ("z", "x", "zx", "total"):
        curve = dec.curves[name]
        components[name] = {"mean": curve.mean, "var": curve.variance, "clamped": curve.n_clamped}
    out = {
        "schema_version": SCHEMA_VERSION,
        "feature": args.feature,
        "kernel": model["kernel"],
        "units": "standardised",
        "y_shift": std["y_shift"][j],
        "y_scale": std["y_scale"][j],
        "grid_z": dec.grid_z,
        "grid_x": dec.grid_x,
        "grid_x_raw": std["x_shift"][0] + std["x_scale"][0] * dec.grid_x,
        "components": components,
        "fractions": dec.fractions,
        "extrapolation": {"train_inputs_outside_domain": outside},
    }
    write_json(args.out, out)
    frac = ", ".join(f"{k}={v:.3f}" for k, v in dec.fractions.items())
    print(f"{args.feature}: {frac}")


# ---------------------------------------------------------------------------
# censoring experiment


def run_censor_experiment(lower_grid, true_x=1.5, seed=0, n=100, noise=0.1, prior_shape=2.0,
                          prior_scale=1.0, opt: OptimizerConfig = None, workers=None):
    """Censor two planted individuals at each lower bound and refit.

    Returns one record per lower bound holding the posterior summaries of
    both individuals.  The individual at ``z = 1`` is flagged as the
    low-uncertainty one.
    """
    grid = [float(a) for a in lower_grid]
    if not grid or any(a <= 0 for a in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lower grid values must be positive and strictly ascending")
    if not true_x > 0:
        raise ValueError("the true covariate value must be positive")
    opt = opt or OptimizerConfig(step_size=0.02, max_iters=1000, n_restarts=1, seed=seed)
    planted = tuple((z, true_x) for z in PLANTED_Z)
    ld = generate_survival_toy(n, noise, seed, prior_shape, prior_scale, fixed_points=planted)
    rows = tuple(range(len(planted)))
    cfg_base = dict(mode="variational", kernel=KernelKind.ADD_INT)
    records = []
    for a in grid:
        ds = apply_censoring(ld, FixedLower(a, rows))
        cap = float(ds.upper[0, 0])
        cfg = ModelConfig(censoring_prior=CensoringPrior(prior_shape, prior_scale, cap), **cfg_base)
        result = fit(ds, cfg, opt, workers=workers)
        summary = censored_posterior(result, ds)
        people = []
        for k, r in enumerate(summary.rows):
            people.append({
                "row": int(r),
                "true_z": PLANTED_Z[int(r)],
                "true_x": true_x,
                "low_uncertainty": bool(PLANTED_Z[int(r)] > 0),
                "mean": summary.mean[k],
                "std": summary.std[k],
                "q05": summary.q05[k],
                "q95": summary.q95[k],
            })
        records.append({"lower": a, "upper": cap, "individuals": people})
    return records


def cmd_censor_experiment(args):
    opt = OptimizerConfig(step_size=args.step_size, max_iters=args.iters, n_restarts=args.restarts,
                          seed=args.seed)
    try:
        records = run_censor_experiment(args.lower_grid, args.true_x, args.seed, args.n, args.noise,
                                        args.weibull_shape, args.weibull_scale, opt)
    except ValueError as err:
        raise UsageError(str(err)) from None
    write_json(args.out, {
        "schema_version": SCHEMA_VERSION,
        "kind": args.kind,
        "true_x": args.true_x,
        "seed": args.seed,
        "scenarios": records,
    })
    for rec in records:
        cells = "  ".join(f"z={p['true_z']:+.1f}: mean {p['mean']:.3f} [{p['q05']:.3f}, {p['q95']:.3f}]"
                          for p in rec["individuals"])
        print(f"a={rec['lower']:.3f}  {cells}")


# ---------------------------------------------------------------------------
# evaluate


def _first_or(cols, header, name):
    return cols[name] if name in cols else cols[header[0]]


def cmd_evaluate(args):
    lh, lcols = read_csv_columns(args.latent)
    th, tcols = read_csv_columns(args.truth)
    fitted = _first_or(lcols, lh, "z1")
    true = _first_or(tcols, th, "z")
    if fitted.size != true.size:
        raise UsageError(f"row counts differ: {fitted.size} fitted vs {true.size} true")
    r = evaluate_recovery(fitted, true)
    print(f"|corr| = {r:.6f}")
    return r


# ---------------------------------------------------------------------------


_COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "decompose": cmd_decompose,
    "censor-experiment": cmd_censor_experiment,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except (UsageError, CsvParseError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
