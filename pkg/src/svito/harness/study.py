"""Monte Carlo and rolling out-of-sample studies with checkpointed replications.

Every replication (or evaluation day) writes one JSON checkpoint.  Result
CSVs are always rebuilt from the full set of checkpoints in index order, so
an interrupted run resumed later produces the same bytes as a clean run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import __version__
from ..factor import FactorState, align_loading, estimate_factor_vols, estimate_loading, sample_var_matrix, select_rank
from ..portfolio import PortfolioProblem, min_variance, oos_risk
from ..predict import PoetConfig, baseline_threshold, matrix_errors, poet_estimate, poet_idio, sim_threshold, sv_poet
from ..realized import TickPanel, prvm, prvm_matrix, psd_project
from ..sim import SimOutput, conditional_oracle, derive_beta, iter_days, simulate
from ..svmodel import lse_fit, qmle_fit
from .config import StudyConfig

__all__ = [
    "StudyAborted",
    "ResultTable",
    "cell_key",
    "replication_rng",
    "fit_models",
    "run_replication",
    "run_sim_study",
    "run_oos_study",
    "aggregate",
]

logger = logging.getLogger(__name__)

SIM_FIELDS = ["n", "m", "p", "group", "method", "metric", "mean", "se", "n_ok", "n_failed", "config_hash", "version"]
PRED_METRICS = ("spectral", "frobenius", "max", "relative_spectral", "relative_frobenius_norm", "relative_max",
                "relative_frobenius_weighted")


class StudyAborted(RuntimeError):
    """Raised when the failure rate of a study exceeds its configured limit."""


@dataclass
class ResultTable:
    rows: list
    replications: int
    failures: dict

    def lookup(self, cell, group, method, metric):
        for row in self.rows:
            if (row["n"], row["m"], row["p"]) == (cell["n"], cell["m"], cell["p"]) and (
                row["group"], row["method"], row["metric"]
            ) == (group, method, metric):
                return row
        raise KeyError((cell, group, method, metric))


def cell_key(cell) -> str:
    return f"n{cell['n']}_m{cell['m']}_p{cell['p']}"


def replication_rng(seed: int, cell, rep: int) -> np.random.Generator:
    """Independent stream per (cell, replication) derived from the master seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(cell["n"], cell["m"], cell["p"], rep))
    return np.random.default_rng(ss)


def _atomic_json(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, fields, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])
    os.replace(tmp, path)


def _daily_matrices(sim_cfg, rng, window_theta):
    """Stream a simulated panel day by day, keeping PSD-projected PRVMs and truth."""
    gammas = []
    psis = []
    prev_last = None
    sigma_end = None
    for item in iter_days(sim_cfg, rng):
        if "ticks" in item:
            raise ValueError("the simulation study expects synchronous ticks")
        anchor = item["initial_prices"] if prev_last is None else prev_last
        block = np.vstack([anchor, item["prices"]])
        gammas.append(psd_project(prvm_matrix(block, window_theta=window_theta)))
        psis.append(item["psi"])
        prev_last = item["prices"][-1]
        sigma_end = item["sigma_end"]
    return np.stack(gammas), np.stack(psis), sigma_end


def fit_models(gammas, r, q, estimators=("qmle", "lse"), omega=None, m=None, truth_loading=None):
    """Factor extraction, parameter fits and pooled idiosyncratic estimate.

    ``truth_loading`` rotates the estimated loading onto a known one
    (orthogonal Procrustes).  Both estimators are equivariant under this
    rotation, so predictions are unchanged while parameter estimates become
    comparable with the truth.
    """
    n, p, _ = gammas.shape
    S = sample_var_matrix(gammas)
    L = estimate_loading(S, r)
    if truth_loading is not None:
        L, _ = align_loading(L, truth_loading, method="procrustes")
    lam = np.linalg.eigvalsh(S)[::-1][:r]
    psi = estimate_factor_vols(L, gammas)
    state = FactorState(r=r, loading=L, psi_hat=psi, s_matrix=S, eigvals=lam)
    fits = {}
    lse = lse_fit(psi, q)
    if "lse" in estimators:
        fits["lse"] = lse
    if "qmle" in estimators:
        fits["qmle"] = qmle_fit(psi, q, init=lse.theta)
    if omega is None:
        omega = sim_threshold(p, n, m)
    idio = poet_idio(gammas.mean(axis=0), PoetConfig(r=r, threshold_omega=omega))
    return state, fits, idio


def _vec_norms(d):
    return {"spectral": float(np.linalg.norm(d)), "frobenius": float(np.linalg.norm(d)), "max": float(np.max(np.abs(d)))}


def _mat_norms(d):
    return {
        "spectral": float(np.linalg.norm(d, 2)),
        "frobenius": float(np.linalg.norm(d, "fro")),
        "max": float(np.max(np.abs(d))),
    }


def run_replication(config: StudyConfig, cell, rep: int) -> dict:
    """One full pipeline pass; returns a flat ``{"group/method/metric": value}`` dict."""
    rng = replication_rng(config.seed, cell, rep)
    sim_cfg = config.sim_config(cell, seed=0)
    r, q = sim_cfg.r, sim_cfg.q
    gammas, psis, sigma_end = _daily_matrices(sim_cfg, rng, config.window_theta)
    L_true = sim_cfg.loading_matrix()
    idio_true = sim_cfg.idio_matrix()
    theta0 = derive_beta(sim_cfg.alpha0, sim_cfg.alpha, sim_cfg.nu)
    state, fits, idio = fit_models(
        gammas, r, q, config.estimators, omega=config.thresholds.get("pooled"), m=cell["m"], truth_loading=L_true
    )
    out = {}
    for name, fit in fits.items():
        th = fit.theta
        for key, val in _vec_norms(th.beta0 - theta0.beta0).items():
            out[f"beta0/{name}/{key}"] = val
        for j in range(q):
            for key, val in _mat_norms(th.betas[j] - theta0.betas[j]).items():
                out[f"beta{j + 1}/{name}/{key}"] = val
        out[f"theta/{name}/max"] = float(np.max(np.abs(th.to_vector() - theta0.to_vector())))
        out[f"diag/{name}/converged"] = float(fit.converged)
        out[f"diag/{name}/pd_repairs"] = float(fit.pd_repairs)

    truth_sim = SimOutput(ticks=None, true_psi=psis, true_sigma_end=sigma_end, loading=L_true, idio=idio_true)
    truth = conditional_oracle(truth_sim, theta0)
    preds = {f"sv-poet-{name}": sv_poet(state, fit.theta, idio).total for name, fit in fits.items()}
    if "poet-prev" in config.baselines:
        omega1 = config.thresholds.get("single_day")
        if omega1 is None:
            omega1 = baseline_threshold(cell["p"], cell["m"])
        preds["poet-prev"] = poet_estimate(gammas[-1], PoetConfig(r=r, threshold_omega=omega1))
    if "prvm-prev" in config.baselines:
        preds["prvm-prev"] = gammas[-1]
    for name, est in preds.items():
        errs = matrix_errors(est, truth)
        for key in PRED_METRICS:
            out[f"pred/{name}/{key}"] = errs[key]

    p = cell["p"]
    out["diag/loading/frobenius"] = float(np.linalg.norm(state.loading - L_true) / math.sqrt(p))
    out["diag/psi/mean_frobenius"] = float(np.mean(np.linalg.norm(state.psi_hat - psis, axis=(1, 2))))
    out["diag/idio/max"] = float(np.max(np.abs(idio - idio_true)))
    rk = config.rank
    out["diag/rank/selected"] = float(
        select_rank(gammas, r_max=rk.get("r_max", 30), c1_scale=rk.get("c1_scale", 0.02), c2=rk.get("c2", 0.5), m=cell["m"])
    )
    return out


def _replication_task(args):
    config_dict, cell, rep = args
    config = StudyConfig.from_dict(config_dict)
    try:
        return rep, "ok", run_replication(config, cell, rep), None
    except Exception as exc:  # recorded in the checkpoint, then counted against the failure budget
        return rep, "failed", None, f"{type(exc).__name__}: {exc}"


def _checkpoint_dir(config, cell):
    return os.path.join(config.output_dir, "checkpoints", cell_key(cell))


def _checkpoint_path(config, cell, rep):
    return os.path.join(_checkpoint_dir(config, cell), f"rep_{rep:04d}.json")


def _load_checkpoint(path, config_hash):
    with open(path) as fh:
        data = json.load(fh)
    if data.get("config_hash") != config_hash:
        raise RuntimeError(
            f"checkpoint {path} belongs to config {data.get('config_hash')}, not {config_hash}; use a fresh --out"
        )
    return data


def run_sim_study(config: StudyConfig, threads: int = 1, max_new: int | None = None) -> ResultTable:
    """Run (or resume) the simulation study and write result CSVs.

    Parameters
    ----------
    config : StudyConfig
    threads : int
        Worker processes for replications.
    max_new : int, optional
        Stop after this many new replications (used to exercise resumption).

    Returns
    -------
    ResultTable
    """
    chash = config.config_hash()
    cfg_dict = config.to_dict()
    todo = []
    for cell in config.grid:
        os.makedirs(_checkpoint_dir(config, cell), exist_ok=True)
        for rep in range(config.replications):
            path = _checkpoint_path(config, cell, rep)
            if os.path.exists(path):
                _load_checkpoint(path, chash)
            else:
                todo.append((cell, rep))
    if max_new is not None:
        todo = todo[:max_new]
    logger.info("simulation study: %d replications to run", len(todo))

    def record(cell, rep, status, metrics, error):
        payload = {"cell": cell, "rep": rep, "status": status, "config_hash": chash, "version": __version__}
        if status == "ok":
            payload["metrics"] = metrics
        else:
            payload["error"] = error
            logger.warning("replication %s/%d failed: %s", cell_key(cell), rep, error)
        _atomic_json(_checkpoint_path(config, cell, rep), payload)

    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            tasks = [(cfg_dict, cell, rep) for cell, rep in todo]
            for (cell, _), (rep, status, metrics, err) in zip(todo, pool.map(_replication_task, tasks)):
                record(cell, rep, status, metrics, err)
    else:
        for cell, rep in todo:
            _, status, metrics, err = _replication_task((cfg_dict, cell, rep))
            record(cell, rep, status, metrics, err)

    complete = all(
        os.path.exists(_checkpoint_path(config, cell, rep))
        for cell in config.grid
        for rep in range(config.replications)
    )
    if not complete:
        return None
    return aggregate(config)


def aggregate(config: StudyConfig) -> ResultTable:
    """Rebuild every result CSV from the checkpoints."""
    chash = config.config_hash()
    rows = []
    failures = {}
    for cell in config.grid:
        records = [
            _load_checkpoint(_checkpoint_path(config, cell, rep), chash) for rep in range(config.replications)
        ]
        ok = [rec["metrics"] for rec in records if rec["status"] == "ok"]
        failed = [(rec["rep"], rec["error"]) for rec in records if rec["status"] != "ok"]
        failures[cell_key(cell)] = failed
        keys = sorted({k for rec in ok for k in rec})
        for key in keys:
            vals = np.array([rec.get(key, np.nan) for rec in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            n_ok = int(vals.size)
            mean = float(vals.mean()) if n_ok else float("nan")
            se = float(vals.std(ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else float("nan")
            group, method, metric = key.split("/")
            rows.append(
                {
                    "n": cell["n"],
                    "m": cell["m"],
                    "p": cell["p"],
                    "group": group,
                    "method": method,
                    "metric": metric,
                    "mean": mean,
                    "se": se,
                    "n_ok": n_ok,
                    "n_failed": len(failed),
                    "config_hash": chash,
                    "version": __version__,
                }
            )
    out = config.output_dir
    _write_csv(os.path.join(out, "results.csv"), SIM_FIELDS, rows)
    _write_csv(os.path.join(out, "table_beta0.csv"), SIM_FIELDS, [r for r in rows if r["group"] == "beta0"])
    _write_csv(
        os.path.join(out, "table_beta_lags.csv"),
        SIM_FIELDS,
        [r for r in rows if r["group"].startswith("beta") and r["group"] != "beta0"],
    )
    _write_csv(os.path.join(out, "table_prediction.csv"), SIM_FIELDS, [r for r in rows if r["group"] == "pred"])
    fail_rows = [
        {"cell": key, "rep": rep, "error": err, "config_hash": chash, "version": __version__}
        for key, lst in failures.items()
        for rep, err in lst
    ]
    _write_csv(os.path.join(out, "failures.csv"), ["cell", "rep", "error", "config_hash", "version"], fail_rows)
    with open(os.path.join(out, "study_config.json"), "w") as fh:
        json.dump({"config": config.to_dict(), "config_hash": chash, "version": __version__}, fh, indent=2, sort_keys=True)
    table = ResultTable(rows=rows, replications=config.replications, failures=failures)
    for key, lst in failures.items():
        if len(lst) > config.max_failure_rate * config.replications:
            raise StudyAborted(f"cell {key}: {len(lst)} of {config.replications} replications failed")
    return table


# ---------------------------------------------------------------------------
# rolling out-of-sample study

OOS_NORMS = {"spectral": "relative_spectral", "frobenius": "relative_frobenius_norm", "max": "relative_max"}
_OOS_GAMMAS = None


def _oos_init(gammas):
    global _OOS_GAMMAS
    _OOS_GAMMAS = gammas


def _oos_fit(config_dict, fit_day, r, q, m):
    config = StudyConfig.from_dict(config_dict)
    gammas = _OOS_GAMMAS[:fit_day]
    return fit_models(gammas, r, q, config.estimators, omega=config.thresholds.get("pooled"), m=m)


def _oos_day(config: StudyConfig, gammas, day, fitted, r, m):
    """Predict ``day`` from a fit on earlier days; return error rows and portfolio rows."""
    state, fits, idio = fitted
    # refresh the factor-volatility history up to the day before the forecast
    psi = estimate_factor_vols(state.loading, gammas[:day])
    state = FactorState(r=state.r, loading=state.loading, psi_hat=psi, s_matrix=state.s_matrix, eigvals=state.eigvals)
    preds = {f"sv-poet-{name}": sv_poet(state, fit.theta, idio).total for name, fit in fits.items()}
    p = gammas.shape[1]
    if "poet-prev" in config.baselines:
        omega1 = config.thresholds.get("single_day")
        if omega1 is None:
            omega1 = baseline_threshold(p, m)
        preds["poet-prev"] = poet_estimate(gammas[day - 1], PoetConfig(r=r, threshold_omega=omega1))
    if "prvm-prev" in config.baselines:
        preds["prvm-prev"] = gammas[day - 1]
    realized = gammas[day]
    err_rows, port_rows = [], []
    for method, est in preds.items():
        e = matrix_errors(est, realized)
        for norm in OOS_NORMS:
            err_rows.append({"day": day, "method": method, "norm": norm, "value": e[OOS_NORMS[norm]]})
        cov = psd_project(est)
        for c0 in config.portfolio_c0:
            res = min_variance(PortfolioProblem(cov, c0=float(c0)))
            port_rows.append(
                {
                    "day": day,
                    "method": method,
                    "c0": float(c0),
                    "objective": res.objective,
                    "gross_exposure": res.gross_exposure,
                    "annualized_risk": oos_risk(res.weights, realized),
                }
            )
    return err_rows, port_rows


def load_panel_gammas(panel: TickPanel, window_theta: float = 1.0) -> np.ndarray:
    """PSD-projected PRVM of every day of a panel."""
    return np.stack([psd_project(prvm(panel, k, window_theta=window_theta)).matrix for k in range(panel.n_days)])


def run_oos_study(config: StudyConfig, panel: TickPanel | None = None, threads: int = 1, max_new: int | None = None):
    """Expanding-window prediction and portfolio study.

    With ``panel=None`` a synthetic panel is simulated from the first grid
    cell with ``oos_days`` days.  Returns ``(mpe_rows, risk_rows)`` or
    ``None`` when stopped early by ``max_new``.
    """
    cell = dict(config.grid[0])
    r = config.sim.get("r", 3)
    q = config.sim.get("q", 1)
    if panel is None:
        sim_cfg = config.sim_config({**cell, "n": config.oos_days}, seed=config.seed)
        panel = simulate(sim_cfg).ticks
    m = panel.m if panel.synchronous else int(np.median([len(t) for t, _ in panel.day_series(0)]))
    gammas = load_panel_gammas(panel, config.window_theta)
    n = gammas.shape[0]
    chash = config.config_hash()
    ckdir = os.path.join(config.output_dir, "checkpoints", "oos")
    os.makedirs(ckdir, exist_ok=True)
    origins = sorted(set(int(h) for h in config.forecast_origins))
    for h in origins:
        if not 1 <= h < n:
            raise ValueError(f"forecast origin {h} must lie in [1, {n - 1}]")
    days = list(range(min(origins), n))
    pending = [d for d in days if not os.path.exists(os.path.join(ckdir, f"day_{d:05d}.json"))]
    if max_new is not None:
        pending = pending[:max_new]
    cfg_dict = config.to_dict()
    first = min(origins)

    def fit_day(day):
        # refits happen on a fixed schedule counted from the earliest origin
        return first + ((day - first) // config.refit_every) * config.refit_every

    _oos_init(gammas)
    fit_days = sorted({fit_day(d) for d in pending})
    if threads > 1 and len(fit_days) > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_oos_init, initargs=(gammas,)) as pool:
            fitted = dict(zip(fit_days, pool.map(_oos_fit, *zip(*[(cfg_dict, f, r, q, m) for f in fit_days]))))
    else:
        fitted = {f: _oos_fit(cfg_dict, f, r, q, m) for f in fit_days}
    for d in pending:
        try:
            errs, ports = _oos_day(config, gammas, d, fitted[fit_day(d)], r, m)
            payload = {"day": d, "status": "ok", "errors": errs, "portfolio": ports}
        except Exception as exc:  # counted against the failure budget below
            payload = {"day": d, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            logger.warning("out-of-sample day %d failed: %s", d, payload["error"])
        payload["config_hash"] = chash
        _atomic_json(os.path.join(ckdir, f"day_{d:05d}.json"), payload)

    if any(not os.path.exists(os.path.join(ckdir, f"day_{d:05d}.json")) for d in days):
        return None
    records = {}
    for d in days:
        records[d] = _load_checkpoint(os.path.join(ckdir, f"day_{d:05d}.json"), chash)
    failed = [d for d in days if records[d]["status"] != "ok"]
    stamp = {"config_hash": chash, "version": __version__}
    err_rows = [dict(row, **stamp) for d in days if d not in failed for row in records[d]["errors"]]
    port_rows = [dict(row, **stamp) for d in days if d not in failed for row in records[d]["portfolio"]]
    out = config.output_dir
    _write_csv(os.path.join(out, "oos_errors.csv"), ["day", "method", "norm", "value", "config_hash", "version"], err_rows)
    _write_csv(
        os.path.join(out, "oos_portfolio.csv"),
        ["day", "method", "c0", "objective", "gross_exposure", "annualized_risk", "config_hash", "version"],
        port_rows,
    )
    mpe_rows, risk_rows = [], []
    methods = list(dict.fromkeys(row["method"] for row in err_rows))
    for h in origins:
        for method in methods:
            for norm in OOS_NORMS:
                vals = np.array(
                    [r_["value"] for r_ in err_rows if r_["day"] >= h and r_["method"] == method and r_["norm"] == norm]
                )
                mpe_rows.append(_summary_row({"origin": h, "method": method, "norm": norm}, vals, chash))
            for c0 in config.portfolio_c0:
                vals = np.array(
                    [
                        r_["annualized_risk"]
                        for r_ in port_rows
                        if r_["day"] >= h and r_["method"] == method and r_["c0"] == float(c0)
                    ]
                )
                risk_rows.append(_summary_row({"origin": h, "method": method, "c0": float(c0)}, vals, chash))
    _write_csv(
        os.path.join(out, "oos_mpe.csv"),
        ["origin", "method", "norm", "mean", "se", "n_days", "config_hash", "version"],
        mpe_rows,
    )
    _write_csv(
        os.path.join(out, "oos_risk.csv"),
        ["origin", "method", "c0", "mean", "se", "n_days", "config_hash", "version"],
        risk_rows,
    )
    if len(failed) > config.max_failure_rate * len(days):
        raise StudyAborted(f"{len(failed)} of {len(days)} out-of-sample days failed")
    return mpe_rows, risk_rows


def _summary_row(keys, vals, chash):
    n = int(vals.size)
    return {
        **keys,
        "mean": float(vals.mean()) if n else float("nan"),
        "se": float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
        "n_days": n,
        "config_hash": chash,
        "version": __version__,
    }
