"""Command-line surface: simulate | fit | predict | evaluate | select-sigma0 | compare.

Exit codes: 0 success, 1 usage or configuration problems, 2 I/O
failures, 3 training divergence.  Logging volume follows HEGP_LOG
(off | info | debug).
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .config import FitConfig
from .data import Dataset
from .exceptions import ConfigError, HegpError, ParameterError, TrainingError
from .io import load_model, save_model
from .predictors import FittedModel, select_outlier_scale
from .preprocess import fit_scalers, inverse_y, transform_dataset, transform_x
from .simbench import (
    SCENARIOS,
    GroundTruth,
    compare_methods,
    evaluate_classification,
    evaluate_regression,
    residual_calibration,
    simulate,
)
from .vem import fit

logger = logging.getLogger("hegp")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_TRAINING = 3


def _setup_logging():
    level = os.environ.get("HEGP_LOG", "off").lower()
    mapping = {"off": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=mapping.get(level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_config(path, seed=None):
    cfg = FitConfig() if path is None else FitConfig.from_json(path)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def cmd_simulate(args):
    if args.scenario not in SCENARIOS:
        print(
            f"unknown scenario {args.scenario!r}; choose from: "
            + ", ".join(SCENARIOS),
            file=sys.stderr,
        )
        return EXIT_USAGE
    ds, truth = simulate(args.scenario, args.seed, n=args.n)
    out = args.out or "."
    try:
        os.makedirs(out, exist_ok=True)
        ds.to_csv(os.path.join(out, "data.csv"))
        truth.to_json(os.path.join(out, "truth.json"))
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    print(
        json.dumps(
            {
                "scenario": args.scenario,
                "seed": args.seed,
                "n": ds.n,
                "data": os.path.join(out, "data.csv"),
                "truth": os.path.join(out, "truth.json"),
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_fit(args):
    cfg = _load_config(args.config, args.seed)
    try:
        raw = Dataset.from_csv(args.data)
    except OSError as exc:
        print(f"cannot read data: {exc}", file=sys.stderr)
        return EXIT_IO
    scalers = fit_scalers(raw, cfg)
    ds = transform_dataset(raw, scalers)
    try:
        state = fit(ds, cfg)
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    if args.out:
        try:
            save_model(args.out, ds, state)
            _attach_scalers(args.out, scalers)
        except OSError as exc:
            print(f"cannot write model: {exc}", file=sys.stderr)
            return EXIT_IO
    summary = {
        "final_elbo": state.elbo_trace[-1] if state.elbo_trace else None,
        "r_hat": state.r_hat,
        "sigma0": state.sigma0,
        "iterations": state.iteration,
        "converged": state.converged,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _attach_scalers(path, scalers):
    with open(path) as fh:
        doc = json.load(fh)
    doc["scalers"] = scalers
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _read_scalers(path):
    with open(path) as fh:
        doc = json.load(fh)
    return doc.get("scalers", {})


def _query_points(args, dataset):
    if args.query:
        qs = Dataset.from_csv(args.query) if _has_y(args.query) else None
        if qs is not None:
            return qs.x
        rows = []
        with open(args.query, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            p = sum(1 for h in header if h.strip().startswith("x_"))
            for row in reader:
                if row and any(c.strip() for c in row):
                    rows.append([float(c) for c in row[:p]])
        return np.asarray(rows)
    if args.grid:
        lo, hi, count = args.grid.split(":")
        return np.linspace(float(lo), float(hi), int(count)).reshape(-1, 1)
    return dataset.x


def _has_y(path):
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    return any(h.strip().startswith("y_") for h in header)


def cmd_predict(args):
    try:
        dataset, state = load_model(args.model)
        scalers = _read_scalers(args.model)
    except OSError as exc:
        print(f"cannot read model: {exc}", file=sys.stderr)
        return EXIT_IO
    fitted = FittedModel(dataset, state)
    try:
        xq_raw = _query_points(args, dataset)
    except OSError as exc:
        print(f"cannot read query: {exc}", file=sys.stderr)
        return EXIT_IO
    xq_raw = np.atleast_2d(xq_raw)
    if xq_raw.shape[1] != dataset.n_covariates:
        if scalers.get("x_zscore") or xq_raw.shape[1] != dataset.n_covariates:
            print(
                f"query dimension {xq_raw.shape[1]} does not match the model "
                f"({dataset.n_covariates})",
                file=sys.stderr,
            )
            return EXIT_USAGE
    xq = transform_x(xq_raw, scalers)
    is_classifier = (
        state.config is not None and state.config.model_family == "probit"
    )
    rescale = state.config is not None and state.config.model_family == "outlier"
    means, covs = fitted.predict_smooth(xq)
    lam = fitted.noise_cov_at(xq)
    s1sq = fitted.precision_rescale_value() if rescale else 1.0
    var_g = np.einsum("npp->np", covs)
    var_noise = s1sq * np.einsum("npp->np", lam)
    sd = np.sqrt(var_g + var_noise)
    lower = means - 1.959963984540054 * sd
    upper = means + 1.959963984540054 * sd
    q = means.shape[1]
    header = [f"x_{j + 1}" for j in range(xq_raw.shape[1])]
    for j in range(q):
        header += [
            f"mu_{j + 1}",
            f"var_g_{j + 1}",
            f"var_noise_{j + 1}",
            f"lower95_{j + 1}",
            f"upper95_{j + 1}",
        ]
    has_y_scaling = scalers.get("y_logit") or scalers.get("y_zscore")
    if has_y_scaling:
        for j in range(q):
            header += [f"mu_orig_{j + 1}", f"lower95_orig_{j + 1}", f"upper95_orig_{j + 1}"]
    if is_classifier:
        header.append("p1")
        p1 = fitted.predict_class_prob(xq)
    rows = []
    for i in range(xq.shape[0]):
        row = [repr(float(v)) for v in xq_raw[i]]
        for j in range(q):
            row += [
                repr(float(means[i, j])),
                repr(float(var_g[i, j])),
                repr(float(var_noise[i, j])),
                repr(float(lower[i, j])),
                repr(float(upper[i, j])),
            ]
        if has_y_scaling:
            mo = inverse_y(means[i], scalers)
            lo = inverse_y(lower[i], scalers)
            hi = inverse_y(upper[i], scalers)
            for j in range(q):
                row += [repr(float(mo[j])), repr(float(lo[j])), repr(float(hi[j]))]
        if is_classifier:
            row.append(repr(float(p1[i])))
        rows.append(row)
    out_fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out_fh)
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if args.out:
            out_fh.close()
    return EXIT_OK


def cmd_evaluate(args):
    try:
        dataset, state = load_model(args.model)
        scalers = _read_scalers(args.model)
    except OSError as exc:
        print(f"cannot read model: {exc}", file=sys.stderr)
        return EXIT_IO
    fitted = FittedModel(dataset, state)
    eval_ds = dataset
    if args.data:
        try:
            raw = Dataset.from_csv(args.data)
        except OSError as exc:
            print(f"cannot read data: {exc}", file=sys.stderr)
            return EXIT_IO
        eval_ds = transform_dataset(raw, scalers)
    is_classifier = (
        state.config is not None and state.config.model_family == "probit"
    )
    rescale = state.config is not None and state.config.model_family == "outlier"
    if args.truth:
        try:
            truth = GroundTruth.from_json(args.truth)
        except (OSError, KeyError, ValueError) as exc:
            print(f"cannot read truth file: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if is_classifier:
            report = evaluate_classification(fitted, truth)
        else:
            report = evaluate_regression(fitted, truth, rescale=rescale)
    else:
        report = residual_calibration(fitted, eval_ds, rescale=rescale)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_select_sigma0(args):
    cfg = _load_config(args.config, args.seed)
    try:
        raw = Dataset.from_csv(args.data)
    except OSError as exc:
        print(f"cannot read data: {exc}", file=sys.stderr)
        return EXIT_IO
    scalers = fit_scalers(raw, cfg)
    ds = transform_dataset(raw, scalers)
    try:
        report = select_outlier_scale(ds, cfg, threads=args.threads)
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    doc = report.to_dict()
    if args.out:
        try:
            with open(args.out, "w") as fh:
                json.dump(doc, fh, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            print(f"cannot write report: {exc}", file=sys.stderr)
            return EXIT_IO
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_compare(args):
    cfg = _load_config(args.config, args.seed)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    try:
        raw = Dataset.from_csv(args.data)
        truth = GroundTruth.from_json(args.truth)
    except OSError as exc:
        print(f"cannot read inputs: {exc}", file=sys.stderr)
        return EXIT_IO
    scalers = fit_scalers(raw, cfg)
    ds = transform_dataset(raw, scalers)
    try:
        table = compare_methods(
            ds, truth, methods, cfg, select_scale=args.select_scale
        )
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    doc = json.dumps(table, sort_keys=True)
    if args.out:
        try:
            with open(args.out, "w") as fh:
                fh.write(doc + "\n")
        except OSError as exc:
            print(f"cannot write report: {exc}", file=sys.stderr)
            return EXIT_IO
    print(doc)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hegp",
        description="Heteroscedastic multi-output GP: simulate, fit, predict, evaluate.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("-o", "--out", default=".")

    p = sub.add_parser("fit", help="train a model on a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--out", default=None)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("predict", help="predictive summaries from a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--query", default=None)
    p.add_argument("--grid", default=None, help="lo:hi:count over a 1-D covariate")
    p.add_argument("-o", "--out", default=None)

    p = sub.add_parser("evaluate", help="calibration (and truth-based) metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--truth", default=None)

    p = sub.add_parser("select-sigma0", help="outlier-scale grid selection")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--out", default=None)

    p = sub.add_parser("compare", help="fit several methods and tabulate metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--methods", default="homoscedastic,gaussian,outlier")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--select-scale", action="store_true")
    p.add_argument("-o", "--out", default=None)

    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "select-sigma0": cmd_select_sigma0,
    "compare": cmd_compare,
}


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except HegpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
