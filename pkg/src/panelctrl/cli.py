"""Command-line front end.

Sub-commands: ``estimate``, ``cv``, ``placebo``, ``simulate``, and
``diagnose``. Every run writes plot-ready CSV artifacts plus a
``manifest.json`` recording the configuration, library version, and seed,
so each artifact is reproducible from its manifest. Floats are serialized
with 17 significant digits for bit-faithful round trips; column orders
are documented in docs/schemas.md. The ``PANELCTRL_LOG`` environment
variable sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .covariates import balance_table, covariates_from_long
from .errors import ConfigError, PanelCtrlError
from .estimators import EstimatorSpec, estimate
from .inference import conformal_interval, jackknife_plus
from .panel import load_panel, split_and_center
from .ridge import (
    augment_weights,
    bound_sketch,
    demeaned_estimate,
    fit_ridge,
    ridge_weights,
    svd_imbalance,
    verify_penalized_form,
    weight_norm_bound,
)
from .scm import ScmConfig, solve_scm
from .selection import default_lambda_grid, in_time_placebo, loo_cv, select_lambda
from .sim import default_dgp, run_monte_carlo

logger = logging.getLogger(__name__)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_manifest(out_dir, command, config, seed=None):
    payload = {
        "command": command,
        "config": config,
        "version": __version__,
        "seed": seed,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="panelctrl",
        description="Synthetic control and ridge-augmented synthetic control estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_panel_args(sp):
        sp.add_argument("--input", required=True, help="long-format CSV (unit,time,outcome)")
        sp.add_argument("--treated", required=True, help="label of the treated unit")
        sp.add_argument("--treatment-time", required=True, help="first treated period")

    def add_estimator_args(sp):
        sp.add_argument(
            "--method",
            default="ridge_ascm",
            choices=["scm", "ridge", "ridge_ascm", "demeaned", "fixed_effects"],
        )
        sp.add_argument("--lambda", dest="lam", type=float, default=None)
        sp.add_argument("--select", choices=["min", "one-se"], default=None)
        sp.add_argument("--zeta", type=float, default=None)
        sp.add_argument("--covariates", default=None, help="comma-separated column names")
        sp.add_argument(
            "--covariate-mode", choices=["joint", "residualize"], default="joint"
        )

    sp = sub.add_parser("estimate", help="fit the estimator and write weight/gap files")
    add_panel_args(sp)
    add_estimator_args(sp)
    sp.add_argument(
        "--inference", choices=["conformal", "jackknife+", "none"], default="none"
    )
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("cv", help="cross-validate the ridge penalty")
    add_panel_args(sp)
    sp.add_argument("--select", choices=["min", "one-se"], default="min")
    sp.add_argument("--mode", choices=["leave-one", "leave-future"], default="leave-one")
    sp.add_argument("--zeta", type=float, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("placebo", help="in-time placebo estimates")
    add_panel_args(sp)
    add_estimator_args(sp)
    sp.add_argument(
        "--placebo-times", required=True, help="comma-separated placebo treatment times"
    )
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("simulate", help="run the Monte Carlo study")
    sp.add_argument("--dgp", choices=["factor", "fixed-effects", "ar3"], default="factor")
    sp.add_argument("--reps", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--t", type=int, default=30)
    sp.add_argument("--t0", type=int, default=25)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--select", choices=["min", "one-se"], default="min")
    sp.add_argument("--sigma-scale", type=float, default=1.0)
    sp.add_argument("--stratify", action="store_true")
    sp.add_argument("--rep-log", default=None, help="per-replication estimate CSV")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("diagnose", help="identity checks and the error-bound sketch")
    add_panel_args(sp)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--zeta", type=float, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)
    return parser


def _load_inputs(args):
    p = load_panel(args.input, args.treated, args.treatment_time)
    cov = None
    if getattr(args, "covariates", None):
        columns = [c.strip() for c in args.covariates.split(",") if c.strip()]
        if columns:
            cov = covariates_from_long(args.input, p, columns)
    return p, cov


def _resolve_spec(args, p):
    lam = args.lam
    if lam is None and args.method in ("ridge", "ridge_ascm"):
        rule = args.select or "one-se"
        blocks = split_and_center(p, center=True)
        cv = loo_cv(blocks)
        lam = select_lambda(cv, rule)
        logger.info("selected lambda %.6g by rule %s", lam, rule)
    return EstimatorSpec(
        method=args.method,
        lam=lam,
        zeta=args.zeta,
        covariate_mode=args.covariate_mode,
    )


def _gap_rows(p, est, intervals=None):
    rows = []
    t0 = p.t0
    treated = p.outcomes[p.treated_index]
    for j, time_label in enumerate(p.time_ids):
        observed = treated[j]
        if j < t0:
            gap = est.gap_pre[j]
            counterfactual = observed - gap
            ci_lo = ci_hi = method = ""
        else:
            k = j - t0
            counterfactual = est.counterfactual[k]
            gap = est.att[k]
            if intervals is not None:
                ci_lo, ci_hi, method = intervals[k]
            else:
                ci_lo = ci_hi = method = ""
        if intervals is not None:
            rows.append((time_label, observed, counterfactual, gap, ci_lo, ci_hi, method))
        else:
            rows.append((time_label, observed, counterfactual, gap))
    return rows


def _cmd_estimate(args):
    p, cov = _load_inputs(args)
    spec = _resolve_spec(args, p)
    est = estimate(p, spec, cov=cov)
    os.makedirs(args.out, exist_ok=True)

    _write_csv(
        os.path.join(args.out, "weights.csv"),
        ["unit", "weight"],
        list(zip(p.donor_ids, est.weights.values)),
    )

    intervals = None
    if args.inference != "none":
        intervals = []
        for k in range(p.n_periods - p.t0):
            if args.inference == "conformal":
                ci = conformal_interval(p, args.alpha, spec, post_period=k, target="effect")
            else:
                ci = jackknife_plus(p, args.alpha, spec, post_period=k, target="effect")
            intervals.append((ci.lower, ci.upper, ci.method))
    header = ["time", "observed", "counterfactual", "gap"]
    if intervals is not None:
        header += ["ci_lower", "ci_upper", "method"]
    _write_csv(os.path.join(args.out, "gap.csv"), header, _gap_rows(p, est, intervals))

    if cov is not None:
        _write_csv(
            os.path.join(args.out, "balance.csv"),
            ["covariate", "raw_gap", "weighted_gap"],
            balance_table(cov, est.weights),
        )

    _write_manifest(
        args.out,
        "estimate",
        {
            "input": os.path.basename(args.input),
            "treated": args.treated,
            "treatment_time": str(args.treatment_time),
            "method": spec.method,
            "lambda": spec.lam,
            "zeta": spec.zeta,
            "covariates": args.covariates,
            "covariate_mode": args.covariate_mode,
            "inference": args.inference,
            "alpha": args.alpha,
        },
        seed=args.seed,
    )
    return 0


def _cmd_cv(args):
    p, _ = _load_inputs(args)
    blocks = split_and_center(p, center=True)
    cv = loo_cv(blocks, mode=args.mode, cfg=ScmConfig(zeta=args.zeta))
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "cv.csv"), ["lambda", "cv_mse", "cv_se"], cv.rows())
    selected = select_lambda(cv, args.select)
    _write_manifest(
        args.out,
        "cv",
        {
            "input": os.path.basename(args.input),
            "treated": args.treated,
            "treatment_time": str(args.treatment_time),
            "mode": args.mode,
            "rule": args.select,
            "selected_lambda": selected,
            "lambda_min": cv.lambda_min,
            "lambda_1se": cv.lambda_1se,
            "skipped_folds": list(cv.skipped),
        },
        seed=args.seed,
    )
    return 0


def _cmd_placebo(args):
    p, cov = _load_inputs(args)
    spec = _resolve_spec(args, p)
    times = [s.strip() for s in args.placebo_times.split(",") if s.strip()]
    if not times:
        raise ConfigError("no placebo times given")
    os.makedirs(args.out, exist_ok=True)
    for time_label in times:
        est = in_time_placebo(p, time_label, spec, cov=cov)
        new_t0 = sum(1 for v in p.time_ids[: p.t0] if _before(v, time_label))
        rows = []
        for j, label in enumerate(p.time_ids[: p.t0]):
            observed = p.outcomes[p.treated_index, j]
            if j < new_t0:
                gap = est.gap_pre[j]
            else:
                gap = est.att[j - new_t0]
            rows.append((label, observed, observed - gap, gap, time_label))
        safe = str(time_label).replace(os.sep, "_")
        _write_csv(
            os.path.join(args.out, f"placebo_gap_{safe}.csv"),
            ["time", "observed", "counterfactual", "gap", "placebo_time"],
            rows,
        )
    _write_manifest(
        args.out,
        "placebo",
        {
            "input": os.path.basename(args.input),
            "treated": args.treated,
            "treatment_time": str(args.treatment_time),
            "method": spec.method,
            "lambda": spec.lam,
            "placebo_times": times,
        },
        seed=args.seed,
    )
    return 0


def _before(label, placebo_label):
    from .panel import parse_time_label

    a, b = parse_time_label(label), parse_time_label(placebo_label)
    if isinstance(a, str) != isinstance(b, str):
        a, b = str(label), str(placebo_label)
    return a < b


def _cmd_simulate(args):
    params = default_dgp(args.dgp)
    if args.sigma_scale != 1.0:
        from dataclasses import replace

        params = replace(params, sigma_multiplier=args.sigma_scale)
    lam = args.lam if args.lam is not None else ("cv-min" if args.select == "min" else "cv-1se")
    report = run_monte_carlo(
        args.dgp,
        params,
        replications=args.reps,
        seed=args.seed,
        n=args.n,
        t=args.t,
        t0=args.t0,
        lam=lam,
        stratify_by_fit=args.stratify,
        threads=args.threads,
        rep_log=args.rep_log,
    )
    os.makedirs(args.out, exist_ok=True)
    _write_csv(
        os.path.join(args.out, "mc_report.csv"),
        [
            "estimator",
            "bias",
            "bias_se",
            "abs_bias_pct_of_scm",
            "rmse",
            "rmse_se",
            "rmse_pct_of_scm",
            "n_used",
            "n_dropped",
        ],
        report.csv_rows(),
    )
    if report.fit_quartiles:
        _write_csv(
            os.path.join(args.out, "mc_by_fit_quartile.csv"),
            ["quartile", "estimator", "bias", "bias_se", "rmse", "rmse_se", "n"],
            report.fit_quartiles,
        )
    _write_manifest(
        args.out,
        "simulate",
        {
            "dgp": args.dgp,
            "reps": args.reps,
            "n": args.n,
            "t": args.t,
            "t0": args.t0,
            "lambda": args.lam,
            "select": args.select,
            "sigma_scale": args.sigma_scale,
            "estimand_period": report.estimand_period,
        },
        seed=args.seed,
    )
    return 0


def _cmd_diagnose(args):
    p, _ = _load_inputs(args)
    blocks = split_and_center(p, center=True)
    cfg = ScmConfig(zeta=args.zeta)
    w = solve_scm(blocks, cfg)
    grid = default_lambda_grid(blocks)
    lam = args.lam if args.lam is not None else float(np.median(grid))

    checks = []
    aug = augment_weights(w, blocks, lam)
    rep = verify_penalized_form(aug, w, blocks, lam)
    checks.append(("augmented_weights_stationarity", rep.residual, rep.threshold))
    rw = ridge_weights(blocks, lam)
    fr = fit_ridge(blocks, lam, 0)
    gap2 = abs(float(rw.values @ blocks.y0_post[:, 0]) - fr.predict(blocks.x1))
    checks.append(("ridge_weighting_equals_regression", gap2, 1e-10))
    si = svd_imbalance(w, blocks, lam)
    checks.append(("imbalance_direct_vs_svd", abs(si.direct - si.via_svd), 1e-8))
    checks.append(("imbalance_upper_bound_slack", max(si.direct - si.upper_bound, 0.0), 1e-10))
    wn = weight_norm_bound(w, blocks, lam)
    checks.append(("weight_norm_bound_slack", max(wn.norm - wn.bound, 0.0), 1e-10))
    level, averaged = demeaned_estimate(w, blocks)
    checks.append(("demeaned_two_forms_gap", float(np.abs(level - averaged).max()), 1e-12))

    os.makedirs(args.out, exist_ok=True)
    _write_csv(
        os.path.join(args.out, "identity_checks.csv"),
        ["check", "value", "threshold", "pass"],
        [(name, val, thr, val <= thr) for name, val, thr in checks],
    )

    sd1 = float(np.std(p.outcomes[p.treated_index, : p.t0]))
    sketch = bound_sketch(
        w,
        blocks,
        lambda_grid=np.logspace(np.log10(grid.min()), np.log10(grid.max() * 1e3), 40),
        sigma_grid=np.array([0.5, 1.0, 2.0, 4.0]) * sd1,
    )
    _write_csv(
        os.path.join(args.out, "bound_sketch.csv"),
        ["lambda", "sigma", "imbalance", "excess", "scm_approx", "total_pct"],
        sketch.rows(),
    )
    _write_manifest(
        args.out,
        "diagnose",
        {
            "input": os.path.basename(args.input),
            "treated": args.treated,
            "treatment_time": str(args.treatment_time),
            "lambda": lam,
            "all_pass": all(val <= thr for _, val, thr in checks),
        },
        seed=args.seed,
    )
    if not all(val <= thr for _, val, thr in checks):
        raise ConfigError("one or more identity checks failed; see identity_checks.csv")
    return 0


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("PANELCTRL_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "estimate": _cmd_estimate,
        "cv": _cmd_cv,
        "placebo": _cmd_placebo,
        "simulate": _cmd_simulate,
        "diagnose": _cmd_diagnose,
    }
    try:
        return handlers[args.command](args)
    except PanelCtrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
