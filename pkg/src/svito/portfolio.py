"""Minimum-variance portfolios under a gross-exposure bound.

Solves ``min w' S w`` subject to ``sum(w) = 1`` and ``||w||_1 <= c0``.  The
split ``w = u - v`` with ``u, v >= 0`` turns the problem into a smooth QP
over a polytope.  Projected gradient with exact line search finds the
active sign pattern, and the KKT system on that pattern is then solved
exactly so the returned point is accurate to round-off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PortfolioProblem",
    "PortfolioResult",
    "min_variance",
    "kkt_residual",
    "oos_risk",
    "project_feasible",
]

logger = logging.getLogger(__name__)

ZERO_TOL = 1e-12


@dataclass
class PortfolioProblem:
    """Covariance in daily variance units, exposure bound and ridge.

    ``ridge=None`` selects ``1e-8 * trace(sigma) / p``.
    """

    sigma: np.ndarray
    c0: float = 1.0
    ridge: float | None = None

    def __post_init__(self):
        S = np.asarray(self.sigma, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("sigma must be square")
        scale = max(np.max(np.abs(S)), 1e-300)
        if np.max(np.abs(S - S.T)) > 1e-10 * scale:
            raise ValueError("sigma must be symmetric")
        if not 1.0 <= self.c0:
            raise ValueError(f"c0 must be >= 1, got {self.c0}")
        self.sigma = 0.5 * (S + S.T)
        if self.ridge is None:
            self.ridge = 1e-8 * float(np.trace(self.sigma)) / S.shape[0]
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    def regularized(self) -> np.ndarray:
        S = self.sigma + self.ridge * np.eye(self.sigma.shape[0])
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            lam = np.linalg.eigvalsh(S)[0]
            raise ValueError(
                f"covariance is not positive definite after ridge {self.ridge:.3e} "
                f"(min eigenvalue {lam:.3e}); project it onto the PSD cone first"
            ) from None
        return S


@dataclass
class PortfolioResult:
    weights: np.ndarray
    objective: float
    gross_exposure: float
    feasible: bool
    kkt_residual: float = float("nan")
    iterations: int = 0
    method: str = ""


def _simplex_parts(a):
    s = np.sort(a)[::-1]
    return s, np.cumsum(s)


def _simplex_tau(s, cs, total):
    # threshold tau with sum(max(a - tau, 0)) = total, from sorted values
    if total <= 0.0:
        return s[0]
    j = np.arange(1, len(s) + 1)
    cand = (cs - total) / j
    rho = np.nonzero(s - cand > 0)[0][-1]
    return cand[rho]


def project_feasible(a, b, c0):
    """Euclidean projection of ``(a, b)`` onto ``{u, v >= 0, sum(u) - sum(v) = 1, sum(u) + sum(v) <= c0}``."""
    sa, ca = _simplex_parts(a)
    sb, cb = _simplex_parts(b)

    def slope(A):
        # derivative of the squared distance in A = sum(u), up to a factor -2
        return _simplex_tau(sa, ca, A) + _simplex_tau(sb, cb, A - 1.0)

    lo, hi = 1.0, 0.5 * (1.0 + c0)
    if hi <= lo or slope(hi) >= 0.0:
        A = hi
    elif slope(lo) <= 0.0:
        A = lo
    else:
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if slope(mid) > 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * hi:
                break
        A = 0.5 * (lo + hi)
    tu = _simplex_tau(sa, ca, A)
    tv = _simplex_tau(sb, cb, A - 1.0)
    return np.maximum(a - tu, 0.0), np.maximum(b - tv, 0.0)


def _multipliers(g, w, c0):
    """Budget and exposure multipliers ``(gamma, mu)`` best matching stationarity at ``w``."""
    scale = max(np.max(np.abs(w)), 1e-300)
    on = np.abs(w) > 1e-10 * scale
    s = np.sign(w[on])
    gross_active = np.sum(np.abs(w)) >= c0 - 1e-9
    if not gross_active:
        return float(np.mean(g[on])), 0.0
    if np.all(s > 0):
        # sum(w) = ||w||_1 makes gamma and mu collinear on the support
        gp = float(np.mean(g[on]))
        off = g[~on]
        mu = max(0.0, float(np.max(off - gp)) / 2.0) if off.size else 0.0
        return gp + mu, mu
    X = np.column_stack([np.ones(on.sum()), -s])
    (gamma, mu), *_ = np.linalg.lstsq(X, g[on], rcond=None)
    return float(gamma), float(mu)


def kkt_residual(sigma, w, c0) -> float:
    """Scale-free KKT violation of ``w`` for the exposure-bounded problem.

    Stationarity terms are divided by ``|gamma|`` (the budget multiplier);
    primal feasibility terms are absolute.
    """
    S = np.asarray(sigma, dtype=float)
    w = np.asarray(w, dtype=float)
    g = 2.0 * S @ w
    gamma, mu = _multipliers(g, w, c0)
    scale = max(abs(gamma), 1e-300)
    wmax = max(np.max(np.abs(w)), 1e-300)
    on = np.abs(w) > 1e-10 * wmax
    stat_on = np.abs(g[on] - gamma + mu * np.sign(w[on]))
    stat_off = np.maximum(np.abs(g[~on] - gamma) - mu, 0.0)
    parts = [
        np.max(stat_on, initial=0.0) / scale,
        np.max(stat_off, initial=0.0) / scale,
        max(-mu, 0.0) / scale,
        abs(np.sum(w) - 1.0),
        max(np.sum(np.abs(w)) - c0, 0.0),
    ]
    if mu > 0:
        parts.append(abs(np.sum(np.abs(w)) - c0) * mu / scale)
    return float(max(parts))


def _solve_pattern(S, support, signs, c0):
    """Minimize on the face ``{w_i = 0 off support, sum(w) = 1, signs' w = c0}``."""
    idx = np.nonzero(support)[0]
    k = len(idx)
    s = signs[idx]
    if np.all(s > 0):
        # exposure equation duplicates the budget; the face is a plain budget face
        K = np.zeros((k + 1, k + 1))
        K[:k, :k] = 2.0 * S[np.ix_(idx, idx)]
        K[:k, k] = -1.0
        K[k, :k] = 1.0
        rhs = np.zeros(k + 1)
        rhs[k] = 1.0
    else:
        K = np.zeros((k + 2, k + 2))
        K[:k, :k] = 2.0 * S[np.ix_(idx, idx)]
        K[:k, k] = -1.0
        K[:k, k + 1] = s
        K[k, :k] = 1.0
        K[k + 1, :k] = s
        rhs = np.zeros(k + 2)
        rhs[k] = 1.0
        rhs[k + 1] = c0
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    w = np.zeros(S.shape[0])
    w[idx] = sol[:k]
    return w


def _polish(S, w0, c0, max_iter=None):
    """Active-set refinement from an approximate solution; ``None`` if it fails to settle."""
    p = len(w0)
    wmax = np.max(np.abs(w0))
    signs = np.where(np.abs(w0) > 1e-7 * wmax, np.sign(w0), 0.0)
    max_iter = 4 * p if max_iter is None else max_iter
    for _ in range(max_iter):
        w = _solve_pattern(S, signs != 0, signs, c0)
        # sign-inconsistent coordinates leave the support
        bad = (signs != 0) & (w * signs < -ZERO_TOL * max(np.max(np.abs(w)), 1e-300))
        if np.any(bad):
            worst = np.argmin(np.where(bad, w * signs, np.inf))
            signs[worst] = 0.0
            continue
        g = 2.0 * S @ w
        gamma, mu = _multipliers(g, w, c0)
        viol = np.where(signs == 0, np.abs(g - gamma) - mu, -np.inf)
        j = int(np.argmax(viol))
        if viol[j] > 1e-11 * max(abs(gamma), 1e-300):
            signs[j] = -np.sign(g[j] - gamma)
            continue
        return w
    return None


def min_variance(problem: PortfolioProblem, max_iter: int = 5000, tol: float = 1e-9) -> PortfolioResult:
    """Gross-exposure-bounded minimum-variance weights.

    Parameters
    ----------
    problem : PortfolioProblem
    max_iter : int
        Projected-gradient iteration cap.
    tol : float
        Target KKT residual (see :func:`kkt_residual`).

    Returns
    -------
    PortfolioResult
        ``feasible`` is always true for ``c0 >= 1``; ``kkt_residual`` reports
        the attained accuracy.
    """
    S = problem.regularized()
    c0 = float(problem.c0)
    p = S.shape[0]
    ones = np.ones(p)

    # unconstrained budget-only optimum; optimal whenever it respects the bound
    x = np.linalg.solve(S, ones)
    w_free = x / x.sum()
    if np.sum(np.abs(w_free)) <= c0:
        return _result(S, w_free, c0, 0, "closed-form")

    u = ones / p
    v = np.zeros(p)
    lam_max = np.linalg.eigvalsh(S)[-1]
    step = 1.0 / (4.0 * lam_max)
    it = 0
    w = u - v
    for it in range(1, max_iter + 1):
        g = 2.0 * S @ w
        nu, nv = project_feasible(u - step * g, v + step * g, c0)
        du, dv = nu - u, nv - v
        dw = du - dv
        curv = float(dw @ S @ dw)
        if curv <= 0.0:
            break
        alpha = min(1.0, max(0.0, -float(w @ S @ dw) / curv))
        u = u + alpha * du
        v = v + alpha * dv
        w = u - v
        if it % 50 == 0 or it == max_iter:
            cand = _polish(S, w, c0)
            if cand is not None and kkt_residual(S, cand, c0) <= tol:
                return _result(S, cand, c0, it, "projected-gradient+active-set")
    res = kkt_residual(S, w, c0)
    logger.warning("min_variance stopped after %d iterations with KKT residual %.2e", it, res)
    return _result(S, w, c0, it, "projected-gradient")


def _result(S, w, c0, it, method):
    gross = float(np.sum(np.abs(w)))
    return PortfolioResult(
        weights=w,
        objective=float(w @ S @ w),
        gross_exposure=gross,
        feasible=bool(abs(w.sum() - 1.0) <= 1e-8 and gross <= c0 + 1e-8),
        kkt_residual=kkt_residual(S, w, c0),
        iterations=it,
        method=method,
    )


def oos_risk(weights, realized) -> float:
    """Annualized out-of-sample risk ``sqrt(252 w' G w)``."""
    w = np.asarray(weights, dtype=float)
    G = np.asarray(realized, dtype=float)
    return float(np.sqrt(max(252.0 * float(w @ G @ w), 0.0)))
