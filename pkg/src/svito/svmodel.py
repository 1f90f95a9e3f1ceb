r"""Vech-autoregressive dynamics of daily factor volatility matrices.

The daily integrated factor volatility :math:`\Psi_k` (an ``r x r`` symmetric
matrix) follows

.. math::

    \mathrm{vech}(\Psi_k) = \beta_0 + \sum_{j=1}^q \beta_j\,\mathrm{vech}(\Psi_{k-j}) + e_k,

with :math:`e_k` a martingale difference.  Two estimators are provided: the
closed-form least squares fit (:func:`lse_fit`) and the Gaussian-type
quasi-likelihood fit (:func:`qmle_fit`) that weights the heterogeneous
residuals through :math:`H_k(\theta)^{-1}`.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)

__all__ = [
    "SVParams",
    "FitReport",
    "vech",
    "unvech",
    "vech_dim",
    "build_H",
    "build_H_series",
    "lse_fit",
    "qmle_fit",
    "qmle_objective",
    "select_order",
]


def vech_dim(r: int) -> int:
    return r * (r + 1) // 2


def _tril_index(r):
    # column-major lower triangle: (0,0),(1,0),...,(r-1,0),(1,1),...
    rows, cols = [], []
    for j in range(r):
        for i in range(j, r):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


def vech(m, tol=1e-8):
    """Stack the lower triangle of a symmetric matrix column by column.

    Accepts a single ``(r, r)`` matrix or a stack ``(..., r, r)``.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"vech expects square matrices, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    asym = np.max(np.abs(m - np.swapaxes(m, -1, -2))) if m.size else 0.0
    if asym > tol * scale:
        raise ValueError(f"vech input is not symmetric (max asymmetry {asym:.3g})")
    rows, cols = _tril_index(m.shape[-1])
    return m[..., rows, cols]


def unvech(v, r=None):
    """Inverse of :func:`vech`; works on ``(d0,)`` or stacked ``(..., d0)`` input."""
    v = np.asarray(v, dtype=float)
    d0 = v.shape[-1]
    if r is None:
        r = int(round((np.sqrt(8 * d0 + 1) - 1) / 2))
    if vech_dim(r) != d0:
        raise ValueError(f"length {d0} is not r(r+1)/2 for r={r}")
    rows, cols = _tril_index(r)
    out = np.zeros(v.shape[:-1] + (r, r))
    out[..., rows, cols] = v
    out[..., cols, rows] = v
    return out


@dataclass
class SVParams:
    """Parameters ``theta = (beta0, vec(beta_1), ..., vec(beta_q))``."""

    r: int
    q: int
    beta0: np.ndarray
    betas: list

    def __post_init__(self):
        d0 = vech_dim(self.r)
        self.beta0 = np.asarray(self.beta0, dtype=float).reshape(d0)
        self.betas = [np.asarray(b, dtype=float).reshape(d0, d0) for b in self.betas]
        if len(self.betas) != self.q:
            raise ValueError(f"expected {self.q} coefficient matrices, got {len(self.betas)}")

    @property
    def d0(self) -> int:
        return vech_dim(self.r)

    @property
    def dim(self) -> int:
        return self.d0 + self.q * self.d0**2

    def to_vector(self) -> np.ndarray:
        parts = [self.beta0] + [b.reshape(-1, order="F") for b in self.betas]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, theta, r, q):
        d0 = vech_dim(r)
        theta = np.asarray(theta, dtype=float)
        if theta.size != d0 + q * d0**2:
            raise ValueError(f"theta has length {theta.size}, expected {d0 + q * d0**2}")
        betas = [theta[d0 + j * d0**2 : d0 + (j + 1) * d0**2].reshape(d0, d0, order="F") for j in range(q)]
        return cls(r=r, q=q, beta0=theta[:d0].copy(), betas=betas)

    def companion(self) -> np.ndarray:
        d0, q = self.d0, self.q
        comp = np.zeros((d0 * q, d0 * q))
        comp[:d0, :] = np.hstack(self.betas)
        if q > 1:
            comp[d0:, :-d0] = np.eye(d0 * (q - 1))
        return comp

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.companion()))))

    @property
    def stationary(self) -> bool:
        return self.spectral_radius() < 1.0

    def stationary_mean(self) -> np.ndarray:
        """``(I - sum beta_j)^{-1} beta0`` as an ``r x r`` matrix."""
        total = np.sum(self.betas, axis=0)
        return unvech(np.linalg.solve(np.eye(self.d0) - total, self.beta0), self.r)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "q": self.q,
            "beta0": self.beta0.tolist(),
            "betas": [b.tolist() for b in self.betas],
            "stationary": bool(self.stationary),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(r=int(d["r"]), q=int(d["q"]), beta0=d["beta0"], betas=d["betas"])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class FitReport:
    theta: SVParams
    objective: float
    iterations: int
    converged: bool
    pd_repairs: int = 0
    residuals: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    method: str = ""
    grad_norm: float = float("nan")
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta": self.theta.to_dict(),
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "pd_repairs": self.pd_repairs,
            "grad_norm": self.grad_norm,
        }

    def save(self, path_json, path_residuals=None):
        with open(path_json, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        if path_residuals is not None:
            np.savetxt(path_residuals, self.residuals, delimiter=",", fmt="%.17g")


def build_H(theta: SVParams, psi_history) -> np.ndarray:
    """Conditional mean ``H`` from the ``q`` most recent matrices (most recent first)."""
    if len(psi_history) < theta.q:
        raise ValueError(f"need {theta.q} lagged matrices, got {len(psi_history)}")
    v = theta.beta0.copy()
    for j in range(theta.q):
        v = v + theta.betas[j] @ vech(psi_history[j])
    return unvech(v, theta.r)


def _design(psi_series, q):
    """Rows ``[1, vech(Psi_{k-1}), ..., vech(Psi_{k-q})]`` for ``k = q..n-1`` (0-based)."""
    V = vech(np.asarray(psi_series, dtype=float))
    n = V.shape[0]
    X = np.hstack([np.ones((n - q, 1))] + [V[q - j : n - j] for j in range(1, q + 1)])
    return X, V[q:]


def build_H_series(theta: SVParams, psi_series) -> np.ndarray:
    """``H_k(theta)`` for every day with a full lag history, as ``(n - q, r, r)``."""
    X, _ = _design(psi_series, theta.q)
    B = np.hstack([theta.beta0[:, None]] + theta.betas)
    return unvech(X @ B.T, theta.r)


def _check_series(psi_series, q):
    psi = np.asarray(psi_series, dtype=float)
    if psi.ndim != 3 or psi.shape[1] != psi.shape[2]:
        raise ValueError(f"psi_series must be (n, r, r), got {psi.shape}")
    if q < 1:
        raise ValueError("q must be >= 1")
    return psi


def lse_fit(psi_series, q: int = 1) -> FitReport:
    """Ordinary least squares for the vech-AR(q) recursion.

    Solves the multivariate normal equations with a QR-based least squares
    solver; the returned ``objective`` is the mean squared residual norm
    averaged over ``n`` (the summation skips the first ``q`` days).
    """
    psi = _check_series(psi_series, q)
    n, r, _ = psi.shape
    d0 = vech_dim(r)
    if n < q + q * d0 + 1:
        raise ValueError(f"series of length {n} is too short for q={q}, r={r}")
    X, Y = _design(psi, q)
    sv = np.linalg.svd(X, compute_uv=False)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"rank-deficient design matrix (condition number {cond:.3g})")
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    B = coef.T  # (d0, 1 + q d0)
    theta = SVParams(r=r, q=q, beta0=B[:, 0], betas=[B[:, 1 + j * d0 : 1 + (j + 1) * d0] for j in range(q)])
    resid = Y - X @ coef
    normal_eq = np.max(np.abs(X.T @ resid)) / max(1.0, np.max(np.abs(X.T @ Y)))
    return FitReport(
        theta=theta,
        objective=float(np.sum(resid**2) / n),
        iterations=1,
        converged=bool(normal_eq < 1e-8),
        residuals=resid,
        method="lse",
        grad_norm=float(normal_eq),
    )


class _Likelihood:
    """Negative quasi-likelihood with an eigenvalue floor and squared-deficit penalty."""

    def __init__(self, psi, q, floor, penalty_weight):
        self.psi = psi
        self.q = q
        self.r = psi.shape[1]
        self.n = psi.shape[0]
        X, _ = _design(psi, q)
        self.X = X
        self.target = psi[q:]
        self.floor = floor
        self.penalty_weight = penalty_weight
        self.repairs = 0

    def _coef(self, theta_vec):
        d0 = vech_dim(self.r)
        B = np.empty((d0, 1 + self.q * d0))
        B[:, 0] = theta_vec[:d0]
        for j in range(self.q):
            B[:, 1 + j * d0 : 1 + (j + 1) * d0] = theta_vec[d0 + j * d0**2 : d0 + (j + 1) * d0**2].reshape(
                d0, d0, order="F"
            )
        return B

    def __call__(self, theta_vec):
        H = unvech(self.X @ self._coef(theta_vec).T, self.r)
        lam, V = np.linalg.eigh(H)
        deficit = np.clip(self.floor - lam, 0.0, None)
        n_bad = int(np.count_nonzero(deficit))
        if n_bad:
            self.repairs += n_bad
            lam = np.maximum(lam, self.floor)
        logdet = np.sum(np.log(lam), axis=1)
        # Tr(Psi H^{-1}) = sum_i v_i' Psi v_i / lam_i
        quad = np.einsum("kai,kab,kbi->ki", V, self.target, V)
        val = np.sum(logdet + np.sum(quad / lam, axis=1)) / self.n
        if n_bad:
            val += self.penalty_weight * np.sum(deficit**2) / (self.floor * self.n)
        return float(val)

    def gradient(self, theta_vec):
        """Exact gradient while every ``H_k`` clears the floor, else ``None``.

        With ``G_k = H_k^{-1} - H_k^{-1} Psi_k H_k^{-1}`` the derivative with
        respect to ``vech(H_k)`` is ``G_k`` on the diagonal and ``2 G_k``
        off it; the chain rule through ``vech(H_k) = B x_k`` gives the rest.
        """
        r, d0 = self.r, vech_dim(self.r)
        H = unvech(self.X @ self._coef(theta_vec).T, r)
        lam, V = np.linalg.eigh(H)
        if np.any(lam < self.floor):
            return None
        Hinv = np.einsum("kai,ki,kbi->kab", V, 1.0 / lam, V)
        G = Hinv - Hinv @ self.target @ Hinv
        rows, cols = _tril_index(r)
        g = G[:, rows, cols] * np.where(rows == cols, 1.0, 2.0)
        dB = g.T @ self.X / self.n
        out = np.empty(d0 + self.q * d0 * d0)
        out[:d0] = dB[:, 0]
        for j in range(self.q):
            out[d0 + j * d0 * d0 : d0 + (j + 1) * d0 * d0] = dB[:, 1 + j * d0 : 1 + (j + 1) * d0].ravel(order="F")
        return out


def qmle_objective(theta: SVParams, psi_series, floor=None) -> float:
    """Quasi-likelihood ``L(theta)`` (the quantity being maximized)."""
    psi = _check_series(psi_series, theta.q)
    if floor is None:
        floor = _default_floor(psi)
    return -_Likelihood(psi, theta.q, floor, 1.0)(theta.to_vector())


def _default_floor(psi):
    return 1e-8 * float(np.mean(np.trace(psi, axis1=1, axis2=2)))


def _central_gradient(f, x, step=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        h = step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _coordinate_search(f, x, step=1e-2, tol=1e-10, max_sweeps=200):
    fx = f(x)
    for _ in range(max_sweeps):
        improved = False
        for i in range(x.size):
            for sgn in (1.0, -1.0):
                trial = x.copy()
                trial[i] += sgn * step * (1.0 + abs(x[i]))
                ft = f(trial)
                if ft < fx:
                    x, fx, improved = trial, ft, True
                    break
        if not improved:
            step *= 0.5
            if step < tol:
                break
    return x, fx


def qmle_fit(
    psi_series,
    q: int = 1,
    init: SVParams | None = None,
    floor: float | None = None,
    gtol: float = 1e-7,
    maxiter: int = 500,
    penalty_weight: float = 1.0,
) -> FitReport:
    """Maximize the quasi-likelihood

    .. math::

        -\\frac{1}{n}\\sum_{k=q+1}^n \\left[\\log\\det H_k(\\theta)
        + \\mathrm{Tr}\\{\\Psi_k H_k(\\theta)^{-1}\\}\\right]

    by BFGS with the exact gradient (central differences while the
    eigenvalue floor is active).

    Parameters
    ----------
    psi_series : (n, r, r) array
        Daily factor volatility matrices (estimated or exact).
    q : int
        Autoregressive order.
    init : SVParams, optional
        Starting point; defaults to the LSE.
    floor : float, optional
        Eigenvalue floor for ``H_k``; defaults to ``1e-8`` times the mean
        trace of the series.  Eigenvalues below the floor are clipped and a
        squared-deficit penalty is added, which keeps the objective finite
        and continuously differentiable.
    gtol : float
        Sup-norm gradient tolerance.
    maxiter : int
        Iteration cap.

    Returns
    -------
    FitReport
        ``objective`` is the maximized quasi-likelihood; ``history`` holds
        the objective after each accepted step.
    """
    psi = _check_series(psi_series, q)
    if init is None:
        init = lse_fit(psi, q).theta
    if init.q != q or init.r != psi.shape[1]:
        raise ValueError("init has incompatible (r, q)")
    if floor is None:
        floor = _default_floor(psi)
    nll = _Likelihood(psi, q, floor, penalty_weight)
    x0 = init.to_vector()
    f0 = nll(x0)
    if not np.isfinite(f0):
        raise ValueError("quasi-likelihood is not finite at the initial value; supply a different init")
    history = [-f0]

    def jac(x):
        g = nll.gradient(x)
        return _central_gradient(nll, x) if g is None else g

    def record(xk):
        history.append(-nll(xk))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            nll,
            x0,
            jac=jac,
            method="BFGS",
            callback=record,
            options={"gtol": gtol, "maxiter": maxiter, "norm": np.inf},
        )
    x = res.x
    fx = float(res.fun)
    gnorm = float(np.max(np.abs(jac(x))))
    converged = gnorm < gtol
    if not converged and res.status == 2:
        # precision loss in the line search: polish with a derivative-free sweep
        x_cs, f_cs = _coordinate_search(nll, x.copy())
        if f_cs < fx:
            x, fx = x_cs, f_cs
            history.append(-fx)
            gnorm = float(np.max(np.abs(jac(x))))
            converged = gnorm < gtol
    theta = SVParams.from_vector(x, psi.shape[1], q)
    X, Y = _design(psi, q)
    B = np.hstack([theta.beta0[:, None]] + theta.betas)
    if not converged:
        logger.info("qmle did not reach gtol=%.1e (|g|_inf=%.3e, status=%s)", gtol, gnorm, res.status)
    return FitReport(
        theta=theta,
        objective=-fx,
        iterations=int(res.nit),
        converged=bool(converged),
        pd_repairs=nll.repairs,
        residuals=Y - X @ B.T,
        method="qmle",
        grad_norm=gnorm,
        history=history,
    )


def select_order(psi_series, orders=(1, 2, 3), criterion: str = "bic"):
    """Pick the AR order by AIC or BIC of the LSE residual covariance.

    Every candidate is fitted on the same sample (the first ``max(orders)``
    days are held out as presample) so the criteria are comparable.

    Returns
    -------
    best : int
    scores : dict
        Criterion value per order.
    """
    psi = _check_series(psi_series, 1)
    qmax = max(orders)
    n, r, _ = psi.shape
    d0 = vech_dim(r)
    scores = {}
    for q in orders:
        trimmed = psi[qmax - q :]
        fit = lse_fit(trimmed, q)
        resid = fit.residuals
        T = resid.shape[0]
        cov = resid.T @ resid / T
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            logdet = -np.inf
        k = d0 + q * d0**2
        if criterion == "aic":
            scores[q] = float(logdet + 2.0 * k / T)
        elif criterion == "bic":
            scores[q] = float(logdet + np.log(T) * k / T)
        else:
            raise ValueError(f"unknown criterion {criterion!r}")
    best = min(scores, key=lambda q: (scores[q], q))
    return best, scores
