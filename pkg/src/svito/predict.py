"""One-step-ahead prediction of large volatility matrices and error norms.

The predictor adds a low-rank factor forecast to a thresholded estimate of
the constant idiosyncratic matrix.  The two single-day baselines (thresholded
POET on the previous day and the raw previous-day realized matrix) live here
as well so every method shares one error routine.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .factor import FactorState
from .svmodel import SVParams, build_H

__all__ = [
    "PoetConfig",
    "PredictedVol",
    "sim_threshold",
    "baseline_threshold",
    "threshold_matrix",
    "poet_idio",
    "poet_estimate",
    "sv_poet",
    "matrix_errors",
    "ERROR_FIELDS",
]

ERROR_FIELDS = (
    "spectral",
    "frobenius",
    "max",
    "relative_spectral",
    "relative_frobenius_norm",
    "relative_max",
    "relative_frobenius_weighted",
)


def sim_threshold(p: int, n: int, m: int) -> float:
    """``sqrt(2 log p / (n sqrt(m) + m))``, used for the pooled idiosyncratic estimate."""
    return math.sqrt(2.0 * math.log(p) / (n * math.sqrt(m) + m))


def baseline_threshold(p: int, m: int) -> float:
    """``sqrt(2 log p / sqrt(m))``, used for single-day POET."""
    return math.sqrt(2.0 * math.log(p) / math.sqrt(m))


@dataclass
class PoetConfig:
    """Thresholding setup for the idiosyncratic matrix.

    ``mode`` is ``"adaptive"`` (correlation-scaled hard threshold) or
    ``"sector"`` (keep within-sector entries only, needs ``sector_map``).
    """

    r: int
    threshold_omega: float = 0.0
    mode: str = "adaptive"
    sector_map: np.ndarray | None = None

    def __post_init__(self):
        if self.threshold_omega < 0:
            raise ValueError("threshold_omega must be >= 0")
        if self.mode not in ("adaptive", "sector"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.mode == "sector") != (self.sector_map is not None):
            raise ValueError("sector_map must be given exactly when mode='sector'")
        if self.sector_map is not None:
            self.sector_map = np.asarray(self.sector_map)


@dataclass
class PredictedVol:
    factor_part: np.ndarray
    idio_part: np.ndarray
    day: int | None = None
    min_eigenvalue: float = float("nan")
    projected: bool = False
    meta: dict = field(default_factory=dict)
    _total: np.ndarray | None = None

    @property
    def total(self) -> np.ndarray:
        if self._total is not None:
            return self._total
        return self.factor_part + self.idio_part

    @property
    def is_psd(self) -> bool:
        return self.min_eigenvalue >= 0.0

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        fmt = "%.17g"
        np.savetxt(os.path.join(directory, "factor_part.csv"), self.factor_part, delimiter=",", fmt=fmt)
        np.savetxt(os.path.join(directory, "idio_part.csv"), self.idio_part, delimiter=",", fmt=fmt)
        np.savetxt(os.path.join(directory, "total.csv"), self.total, delimiter=",", fmt=fmt)
        meta = {"day": self.day, "min_eigenvalue": self.min_eigenvalue, "projected": self.projected, **self.meta}
        with open(os.path.join(directory, "predicted.json"), "w") as fh:
            json.dump(meta, fh, indent=2)


def _top_spectral_removed(gamma_bar, r):
    G = 0.5 * (gamma_bar + gamma_bar.T)
    p = G.shape[0]
    if r >= p:
        raise ValueError(f"r={r} must be < p={p}")
    if r <= 0:
        return G.copy(), np.zeros_like(G)
    lam, V = np.linalg.eigh(G)
    top = (V[:, -r:] * lam[-r:]) @ V[:, -r:].T
    low = G - top
    return 0.5 * (low + low.T), top


def threshold_matrix(resid, omega: float, mode: str = "adaptive", sector_map=None) -> np.ndarray:
    """Hard-threshold the off-diagonal entries of a residual matrix; diagonal floored at zero."""
    R = np.asarray(resid, dtype=float)
    d = np.clip(np.diag(R), 0.0, None)
    if mode == "adaptive":
        cut = omega * np.sqrt(np.outer(d, d))
        keep = np.abs(R) >= cut
    elif mode == "sector":
        labels = np.asarray(sector_map)
        if labels.shape != (R.shape[0],):
            raise ValueError("sector_map must have one label per asset")
        keep = labels[:, None] == labels[None, :]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = np.where(keep, R, 0.0)
    np.fill_diagonal(out, d)
    return out


def poet_idio(gamma_bar_hat, config: PoetConfig) -> np.ndarray:
    """Thresholded idiosyncratic estimate from a (pooled or daily) volatility matrix.

    The leading ``r`` spectral components are removed first; see
    :func:`threshold_matrix` for the thresholding rule.
    """
    low, _ = _top_spectral_removed(np.asarray(gamma_bar_hat, dtype=float), config.r)
    return threshold_matrix(low, config.threshold_omega, config.mode, config.sector_map)


def poet_estimate(gamma, config: PoetConfig) -> np.ndarray:
    """Low-rank part plus thresholded residual of a single matrix."""
    G = np.asarray(gamma, dtype=float)
    low, top = _top_spectral_removed(G, config.r)
    return top + threshold_matrix(low, config.threshold_omega, config.mode, config.sector_map)


def sv_poet(factor_state: FactorState, theta: SVParams, idio, project: bool = False, day=None) -> PredictedVol:
    """``L_hat H_{n+1}(theta) L_hat' + idio`` from the last ``q`` factor volatilities.

    The smallest eigenvalue of the total is always reported; with
    ``project=True`` the total is additionally projected onto the PSD cone.
    """
    psi = factor_state.psi_hat
    if len(psi) < theta.q:
        raise ValueError(f"need at least q={theta.q} factor volatilities, have {len(psi)}")
    hist = [psi[-1 - j] for j in range(theta.q)]
    H = build_H(theta, hist)
    L = factor_state.loading
    factor_part = L @ H @ L.T
    idio = np.asarray(idio, dtype=float)
    total = factor_part + idio
    lam, V = np.linalg.eigh(total)
    out = PredictedVol(factor_part=factor_part, idio_part=idio, day=day, min_eigenvalue=float(lam[0]))
    if project and lam[0] < 0:
        out._total = (V * np.clip(lam, 0.0, None)) @ V.T
        out.projected = True
    return out


def _sym_inv_sqrt(T):
    lam, V = np.linalg.eigh(0.5 * (T + T.T))
    if lam[0] <= 1e-12 * max(abs(lam[-1]), 1e-300):
        return None, float(lam[0])
    return (V / np.sqrt(lam)) @ V.T, float(lam[0])


def matrix_errors(estimate, truth) -> dict:
    """Absolute, relative and truth-weighted differences between two matrices.

    ``relative_frobenius_weighted`` is
    ``p^{-1/2} ||T^{-1/2} (A - T) T^{-1/2}||_F``; when ``truth`` is not
    positive definite it is NaN and ``weighted_skipped`` states why.
    """
    A = np.asarray(estimate, dtype=float)
    T = np.asarray(truth, dtype=float)
    if A.shape != T.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"shape mismatch: {A.shape} vs {T.shape}")
    D = A - T
    p = T.shape[0]
    spec = float(np.linalg.norm(D, 2))
    frob = float(np.linalg.norm(D, "fro"))
    mx = float(np.max(np.abs(D)))
    t_spec = float(np.linalg.norm(T, 2))
    t_frob = float(np.linalg.norm(T, "fro"))
    t_max = float(np.max(np.abs(T)))
    rec = {
        "spectral": spec,
        "frobenius": frob,
        "max": mx,
        "relative_spectral": spec / t_spec if t_spec > 0 else float("nan"),
        "relative_frobenius_norm": frob / t_frob if t_frob > 0 else float("nan"),
        "relative_max": mx / t_max if t_max > 0 else float("nan"),
    }
    W, lam_min = _sym_inv_sqrt(T)
    if W is None:
        rec["relative_frobenius_weighted"] = float("nan")
        rec["weighted_skipped"] = f"truth not positive definite (min eigenvalue {lam_min:.3e})"
    else:
        rec["relative_frobenius_weighted"] = float(np.linalg.norm(W @ D @ W, "fro") / math.sqrt(p))
    return rec
