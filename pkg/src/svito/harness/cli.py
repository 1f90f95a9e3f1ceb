"""Command-line entry point: ``svito <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys

import numpy as np

from .. import __version__
from ..factor import FactorState, build_factor_state, select_rank
from ..portfolio import PortfolioProblem, min_variance
from ..predict import PoetConfig, poet_idio, sim_threshold, sv_poet
from ..realized import prvm, psd_project, read_generic_ticks, read_ticks_csv
from ..sim import simulate, write_sim_output
from ..svmodel import SVParams, lse_fit, qmle_fit, select_order
from .config import ConfigError, load_config
from .study import StudyAborted, run_oos_study, run_sim_study

logger = logging.getLogger("svito")

FMT = "%.17g"


def _load_panel(path, manifest=None):
    if manifest is not None:
        return read_generic_ticks(path, manifest)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header[:2] == ["day", "asset_index"]:
        return read_ticks_csv(path)
    return read_generic_ticks(path, None)


def _read_gammas(directory):
    files = sorted(glob.glob(os.path.join(directory, "gamma_*.csv")))
    if not files:
        raise FileNotFoundError(f"no gamma_*.csv files in {directory}")
    return np.stack([np.loadtxt(f, delimiter=",", ndmin=2) for f in files])


def cmd_simulate(args, config):
    cell = dict(config.grid[0])
    for key in ("n", "m", "p"):
        if getattr(args, key) is not None:
            cell[key] = getattr(args, key)
    sim_cfg = config.sim_config(cell, seed=config.seed)
    out = simulate(sim_cfg)
    manifest = write_sim_output(out, config.output_dir, write_ticks=not args.no_ticks)
    print(f"simulated {manifest['n_days']} days, p={manifest['p']}, m={manifest['m']} -> {config.output_dir}")


def cmd_realized(args, config):
    panel = _load_panel(args.ticks, args.manifest)
    target = os.path.join(config.output_dir, "realized")
    os.makedirs(target, exist_ok=True)
    meta = []
    for k in range(panel.n_days):
        v = prvm(panel, k, window_theta=config.window_theta)
        if not args.raw:
            v = psd_project(v)
        np.savetxt(os.path.join(target, f"gamma_{k:05d}.csv"), v.matrix, delimiter=",", fmt=FMT)
        meta.append({"day": k, "psd_projected": v.psd_projected, **v.meta})
    with open(os.path.join(target, "realized.json"), "w") as fh:
        json.dump({"window_theta": config.window_theta, "days": meta}, fh, indent=2)
    print(f"wrote {panel.n_days} daily matrices -> {target}")


def cmd_factor(args, config):
    gammas = _read_gammas(args.gammas)
    r = args.r
    if args.select_rank:
        rk = config.rank
        p = gammas.shape[1]
        r = select_rank(gammas, r_max=min(rk.get("r_max", 30), p - 1), c1_scale=rk.get("c1_scale", 0.02),
                        c2=rk.get("c2", 0.5), m=args.m)
        print(f"selected rank {r}")
        if r < 1:
            raise SystemExit("no factor structure detected; pass --r explicitly")
    state = build_factor_state(gammas, r)
    state.save(os.path.join(config.output_dir, "factor"))
    print(f"loading p={state.p} r={r} -> {os.path.join(config.output_dir, 'factor')}")


def cmd_fit(args, config):
    state = FactorState.load(args.factor)
    q = args.q
    if q is None:
        q, scores = select_order(state.psi_hat, criterion=args.order_criterion)
        print(f"selected q={q} ({args.order_criterion} {scores})")
    target = os.path.join(config.output_dir, "fit")
    os.makedirs(target, exist_ok=True)
    lse = lse_fit(state.psi_hat, q)
    lse.save(os.path.join(target, "lse.json"))
    if args.estimator == "qmle":
        rep = qmle_fit(state.psi_hat, q, init=lse.theta)
        rep.save(os.path.join(target, "qmle.json"))
    else:
        rep = lse
    rep.theta.to_json(os.path.join(target, "theta.json"))
    print(f"{args.estimator}: objective {rep.objective:.6g}, converged={rep.converged} -> {target}")


def cmd_predict(args, config):
    state = FactorState.load(args.factor)
    theta = SVParams.from_json(args.theta)
    gammas = _read_gammas(args.gammas)
    n, p, _ = gammas.shape
    omega = config.thresholds.get("pooled")
    if omega is None:
        omega = sim_threshold(p, n, args.m)
    idio = poet_idio(gammas.mean(axis=0), PoetConfig(r=state.r, threshold_omega=omega))
    pred = sv_poet(state, theta, idio, project=args.project, day=n)
    pred.meta.update({"threshold_omega": omega, "version": __version__})
    target = os.path.join(config.output_dir, "predict")
    pred.save(target)
    print(f"prediction for day {n}: min eigenvalue {pred.min_eigenvalue:.3e} -> {target}")


def cmd_portfolio(args, config):
    sigma = np.loadtxt(args.sigma, delimiter=",", ndmin=2)
    sigma = psd_project(sigma)
    c0s = args.c0 if args.c0 else config.portfolio_c0
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "portfolio.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["c0", "objective", "gross_exposure", "kkt_residual", "annualized_risk_in_sample"])
        for c0 in c0s:
            res = min_variance(PortfolioProblem(sigma, c0=float(c0)))
            w.writerow([repr(float(c0)), repr(res.objective), repr(res.gross_exposure), repr(res.kkt_residual),
                        repr(math.sqrt(252.0 * res.objective))])
            np.savetxt(os.path.join(config.output_dir, f"weights_c0_{float(c0):g}.csv"), res.weights, fmt=FMT)
    print(f"portfolio results -> {path}")


def cmd_study_sim(args, config):
    table = run_sim_study(config, threads=args.threads, max_new=args.stop_after)
    if table is None:
        print("stopped before completion; rerun the same command to resume")
        return
    print(f"simulation study complete -> {config.output_dir}")


def cmd_study_oos(args, config):
    panel = _load_panel(args.ticks, args.manifest) if args.ticks else None
    res = run_oos_study(config, panel=panel, threads=args.threads, max_new=args.stop_after)
    if res is None:
        print("stopped before completion; rerun the same command to resume")
        return
    print(f"out-of-sample study complete -> {config.output_dir}")


def _markdown(rows, cols):
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in rows:
        out.append("| " + " | ".join(row[c] for c in cols) + " |")
    return "\n".join(out)


def cmd_report(args, config):
    src = args.results or config.output_dir
    lines = [f"# Study report ({src})", ""]
    res_path = os.path.join(src, "results.csv")
    if os.path.exists(res_path):
        with open(res_path) as fh:
            rows = list(csv.DictReader(fh))
        for group, title in (("beta0", "Intercept errors"), ("beta1", "Lag-1 coefficient errors"),
                             ("pred", "One-step prediction errors")):
            sel = [r for r in rows if r["group"] == group]
            if group == "pred":
                sel = [r for r in sel if r["metric"] in ("spectral", "relative_frobenius_weighted", "max")]
            for r in sel:
                r["mean +- se"] = f"{float(r['mean']):.4f} +- {float(r['se']):.4f}"
            lines += [f"## {title}", "", _markdown(sel, ["n", "m", "p", "method", "metric", "mean +- se"]), ""]
    mpe_path = os.path.join(src, "oos_mpe.csv")
    if os.path.exists(mpe_path):
        with open(mpe_path) as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            r["mean +- se"] = f"{float(r['mean']):.4f} +- {float(r['se']):.4f}"
        lines += ["## Mean relative prediction errors", "", _markdown(rows, ["origin", "method", "norm", "mean +- se"]), ""]
    risk_path = os.path.join(src, "oos_risk.csv")
    if os.path.exists(risk_path):
        with open(risk_path) as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            r["mean +- se"] = f"{float(r['mean']):.4f} +- {float(r['se']):.4f}"
        lines += ["## Annualized out-of-sample risk", "", _markdown(rows, ["origin", "method", "c0", "mean +- se"]), ""]
    if len(lines) == 2:
        raise SystemExit(f"no result CSVs found in {src}")
    text = "\n".join(lines)
    path = os.path.join(src, "report.md")
    with open(path, "w") as fh:
        fh.write(text)
    print(text)


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON study configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help="worker processes (default 1)")
    common.add_argument("--paper-scale", action="store_true", help="full grid and replication count")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="svito", description=__doc__, parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a tick panel with known truth")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--no-ticks", action="store_true", help="write truth only")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("realized", parents=[common], help="daily PRVM matrices from ticks")
    p.add_argument("--ticks", required=True)
    p.add_argument("--manifest", help="day-boundary manifest for generic tick files")
    p.add_argument("--raw", action="store_true", help="skip the PSD projection")
    p.set_defaults(func=cmd_realized)

    p = sub.add_parser("factor", parents=[common], help="loading and factor volatilities")
    p.add_argument("--gammas", required=True, help="directory of gamma_*.csv")
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--select-rank", action="store_true")
    p.add_argument("--m", type=int, default=390, help="intraday observation count for rank selection")
    p.set_defaults(func=cmd_factor)

    p = sub.add_parser("fit", parents=[common], help="fit the vech-AR parameters")
    p.add_argument("--factor", required=True, help="directory written by 'factor'")
    p.add_argument("--q", type=int, help="lag order (selected by information criterion if omitted)")
    p.add_argument("--estimator", choices=["qmle", "lse"], default="qmle")
    p.add_argument("--order-criterion", choices=["aic", "bic"], default="bic")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="one-step-ahead volatility matrix")
    p.add_argument("--factor", required=True)
    p.add_argument("--theta", required=True, help="theta.json written by 'fit'")
    p.add_argument("--gammas", required=True)
    p.add_argument("--m", type=int, default=390)
    p.add_argument("--project", action="store_true", help="project the total onto the PSD cone")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("portfolio", parents=[common], help="exposure-bounded minimum-variance weights")
    p.add_argument("--sigma", required=True, help="covariance CSV")
    p.add_argument("--c0", type=float, nargs="*")
    p.set_defaults(func=cmd_portfolio)

    for name, func, helptext in (
        ("study-sim", cmd_study_sim, "Monte Carlo simulation study"),
        ("study-oos", cmd_study_oos, "rolling out-of-sample study"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--stop-after", type=int, help="stop after this many new units of work")
        if name == "study-oos":
            p.add_argument("--ticks", help="tick CSV (simulated when omitted)")
            p.add_argument("--manifest")
            p.add_argument("--refit-every", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common], help="Markdown summary of result CSVs")
    p.add_argument("--results", help="directory holding result CSVs (defaults to --out)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("threads", 1), ("paper_scale", False),
                          ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "output_dir": args.out, "refit_every": getattr(args, "refit_every", None)}
    try:
        config = load_config(args.config, paper_scale=args.paper_scale, overrides=overrides)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        args.func(args, config)
    except StudyAborted as exc:
        print(f"study aborted: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
