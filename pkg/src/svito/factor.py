"""Factor extraction from a series of daily realized volatility matrices.

The loading is estimated from the leading eigenvectors of the sample
variance of the daily matrices, and the daily factor volatilities follow by
projecting each daily matrix onto the loading.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .realized import DailyVolMatrix

__all__ = [
    "FactorState",
    "sample_var_matrix",
    "estimate_loading",
    "estimate_factor_vols",
    "build_factor_state",
    "align_loading",
    "rank_criterion",
    "select_rank",
    "SIGN_CONVENTION",
]

SIGN_CONVENTION = "largest-abs-entry-positive/v1"


def _as_stack(gammas) -> np.ndarray:
    mats = [g.matrix if isinstance(g, DailyVolMatrix) else np.asarray(g, dtype=float) for g in gammas]
    if not mats:
        raise ValueError("no matrices supplied")
    shape = mats[0].shape
    for k, m in enumerate(mats):
        if m.ndim != 2 or m.shape != shape or shape[0] != shape[1]:
            raise ValueError(f"dimension mismatch at index {k}: {m.shape} vs {shape}")
    return np.stack(mats)


@dataclass
class FactorState:
    """Estimated loading, daily factor volatilities and the sample variance matrix."""

    r: int
    loading: np.ndarray
    psi_hat: np.ndarray
    s_matrix: np.ndarray
    eigvals: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.loading.shape[0]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        fmt = "%.17g"
        np.savetxt(os.path.join(directory, "loading.csv"), self.loading, delimiter=",", fmt=fmt)
        np.savetxt(os.path.join(directory, "s_matrix.csv"), self.s_matrix, delimiter=",", fmt=fmt)
        np.savetxt(
            os.path.join(directory, "psi_hat.csv"),
            self.psi_hat.reshape(len(self.psi_hat), -1),
            delimiter=",",
            fmt=fmt,
        )
        meta = {
            "r": self.r,
            "p": self.p,
            "n_days": int(len(self.psi_hat)),
            "sign_convention": SIGN_CONVENTION,
            "eigvals": self.eigvals.tolist(),
            **self.meta,
        }
        with open(os.path.join(directory, "factor.json"), "w") as fh:
            json.dump(meta, fh, indent=2)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "factor.json")) as fh:
            meta = json.load(fh)
        r = meta.pop("r")
        meta.pop("p", None)
        meta.pop("n_days", None)
        meta.pop("sign_convention", None)
        eig = np.asarray(meta.pop("eigvals"))
        loading = np.loadtxt(os.path.join(directory, "loading.csv"), delimiter=",", ndmin=2)
        s = np.loadtxt(os.path.join(directory, "s_matrix.csv"), delimiter=",", ndmin=2)
        psi = np.loadtxt(os.path.join(directory, "psi_hat.csv"), delimiter=",", ndmin=2).reshape(-1, r, r)
        return cls(r=r, loading=loading, psi_hat=psi, s_matrix=s, eigvals=eig, meta=meta)


def sample_var_matrix(gammas) -> np.ndarray:
    """``(n p)^{-1} sum_k (G_k - Gbar)^2`` over the daily matrices.

    Parameters
    ----------
    gammas : sequence of (p, p) arrays or DailyVolMatrix
        At least two days.

    Returns
    -------
    (p, p) ndarray
        Symmetric positive semi-definite.
    """
    G = _as_stack(gammas)
    n, p, _ = G.shape
    if n < 2:
        raise ValueError("need at least two daily matrices")
    D = G - G.mean(axis=0)
    # sum_k D_k D_k written as one matmul over the stacked (p, n p) block
    wide = D.transpose(1, 0, 2).reshape(p, n * p)
    S = wide @ wide.T / (n * p)
    return 0.5 * (S + S.T)


def _normalize_signs(V: np.ndarray) -> np.ndarray:
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        i = int(np.argmax(np.abs(col)))
        # ties on |entry| resolve to the first index, so the rule is deterministic
        if col[i] < 0:
            V[:, j] = -col
    return V


def estimate_loading(s_matrix, r: int) -> np.ndarray:
    """``sqrt(p)`` times the leading ``r`` eigenvectors of ``s_matrix``.

    Columns are ordered by descending eigenvalue and sign-normalized so the
    largest-magnitude entry of each column is positive.  A warning is issued
    when eigenvalues ``r`` and ``r + 1`` coincide to 1e-12.
    """
    S = np.asarray(s_matrix, dtype=float)
    p = S.shape[0]
    if not 1 <= r <= p:
        raise ValueError(f"r must lie in [1, p={p}], got {r}")
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    lam = lam[::-1]
    V = V[:, ::-1]
    if r < p and abs(lam[r - 1] - lam[r]) <= 1e-12 * max(1.0, abs(lam[0])):
        warnings.warn(f"rank ambiguity: eigenvalues {r} and {r + 1} coincide", RuntimeWarning, stacklevel=2)
    return np.sqrt(p) * _normalize_signs(V[:, :r])


def estimate_factor_vols(loading, gammas) -> np.ndarray:
    """``p^{-2} L' G_k L`` for every day, symmetrized; shape ``(n, r, r)``."""
    L = np.asarray(loading, dtype=float)
    G = _as_stack(gammas)
    p = L.shape[0]
    if G.shape[1] != p:
        raise ValueError(f"loading has {p} rows but matrices are {G.shape[1]}x{G.shape[2]}")
    psi = np.einsum("ia,kij,jb->kab", L, G, L, optimize=True) / p**2
    return 0.5 * (psi + psi.transpose(0, 2, 1))


def build_factor_state(gammas, r: int) -> FactorState:
    """Run the sample-variance, loading and factor-volatility steps together."""
    S = sample_var_matrix(gammas)
    L = estimate_loading(S, r)
    lam = np.linalg.eigvalsh(S)[::-1][:r]
    psi = estimate_factor_vols(L, gammas)
    return FactorState(r=r, loading=L, psi_hat=psi, s_matrix=S, eigvals=lam)


def align_loading(estimate, truth, method: str = "signed-permutation"):
    """Rotate the columns of ``estimate`` to best match ``truth``.

    ``method="signed-permutation"`` matches columns greedily on
    ``|L_hat_i' L_j|``, largest first, and gives each matched column the sign
    of its inner product with the truth.  ``method="procrustes"`` applies the
    orthogonal matrix ``Q`` minimizing ``||L_hat Q - L||_F``, which is the
    right comparison when the truth only fixes the factor space.

    Returns
    -------
    aligned : (p, r) ndarray
        ``estimate @ Q``.
    Q : (r, r) ndarray
        Orthogonal; a signed permutation for the first method.
    """
    Lh = np.asarray(estimate, dtype=float)
    L = np.asarray(truth, dtype=float)
    r = L.shape[1]
    C = Lh.T @ L
    if method == "procrustes":
        U, _, Vt = np.linalg.svd(C)
        Q = U @ Vt
        return Lh @ Q, Q
    if method != "signed-permutation":
        raise ValueError(f"unknown alignment method {method!r}")
    Q = np.zeros((r, r))
    used_hat, used_true = set(), set()
    for flat in np.argsort(-np.abs(C), axis=None, kind="stable"):
        i, j = divmod(int(flat), r)
        if i in used_hat or j in used_true:
            continue
        Q[i, j] = 1.0 if C[i, j] >= 0 else -1.0
        used_hat.add(i)
        used_true.add(j)
        if len(used_true) == r:
            break
    return Lh @ Q, Q


def rank_criterion(gammas, r_max: int = 30, c1_scale: float = 0.02, c2: float = 0.5, m: int | None = None):
    """Penalized eigenvalue criterion for ``j = 1..r_max``.

    Returns an array whose entry ``j - 1`` is
    ``sum_k [lambda_{k,j} / p + j c1_k {sqrt(log p / sqrt(m)) + log(p) / p}^c2]``
    with ``c1_k = c1_scale * lambda_{k, r_max}``.
    """
    G = _as_stack(gammas)
    n, p, _ = G.shape
    if r_max >= p:
        raise ValueError(f"r_max={r_max} must be < p={p}")
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    if m is None:
        raise ValueError("the sampling frequency m is required")
    lam = np.linalg.eigvalsh(G)[:, ::-1][:, :r_max]
    rate = (np.sqrt(np.log(p) / np.sqrt(m)) + np.log(p) / p) ** c2
    c1 = c1_scale * lam[:, r_max - 1]
    j = np.arange(1, r_max + 1)
    per_day = lam / p + np.outer(c1, j) * rate
    return per_day.sum(axis=0)


def select_rank(gammas, r_max: int = 30, c1_scale: float = 0.02, c2: float = 0.5, m: int | None = None) -> int:
    """Number of factors minimizing :func:`rank_criterion`, minus one.

    ``r_max`` is reduced to ``p - 1`` when ``p`` is small.  The trailing
    offset follows the published selection rule; a result below one is
    returned as-is with a warning.
    """
    p = _as_stack(gammas[:1]).shape[1]
    r_max = min(r_max, p - 1)
    crit = rank_criterion(gammas, r_max=r_max, c1_scale=c1_scale, c2=c2, m=m)
    r_hat = int(np.argmin(crit)) + 1 - 1
    if r_hat < 1:
        warnings.warn(f"selected rank {r_hat} < 1: no dominant factor structure", RuntimeWarning, stacklevel=2)
    return r_hat
