r"""Synthetic high-frequency panels from the factor-based Ito model.

Log prices follow :math:`dX_t = \mu\,dt + L\,df_t + du_t` with
:math:`df_t = \sigma_t^\top dB_t` and a time-constant idiosyncratic
covolatility.  The instantaneous factor volatility
:math:`\Sigma_t = \sigma_t^\top\sigma_t` interpolates an autoregression at
integer times:

.. math::

    \Sigma_t = \Sigma_{[t]} + (t-[t])\Big(\alpha_0\alpha_0^\top - \Sigma_{[t]}
        + \sum_{j=1}^{q-1}\alpha_{j+1}\Psi_{[t]-j+1}\alpha_{j+1}^\top\Big)
        + \alpha_1\Big(\int_{[t]}^t \Sigma_s\,ds\Big)\alpha_1^\top
        + ([t]+1-t)\,Z_tZ_t^\top,

with :math:`Z_t = \int_{[t]}^t \nu^\top dB^1_s`.  The daily integrals
:math:`\Psi_k` then obey an exact vech-AR(q) recursion whose coefficients
are returned by :func:`derive_beta`.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from math import factorial

import numba
import numpy as np

from .realized import TickPanel, write_ticks_csv
from .svmodel import SVParams, build_H, vech, vech_dim

logger = logging.getLogger(__name__)

__all__ = [
    "SimConfig",
    "SimOutput",
    "default_loading",
    "default_idio",
    "phi_functions",
    "derive_beta",
    "paper_config",
    "simulate",
    "simulate_factor_vol",
    "iter_days",
    "conditional_oracle",
    "write_sim_output",
]

PAPER_ALPHA0 = np.diag([0.5, 0.4, 0.3])
PAPER_ALPHA1 = np.array([0.2, 0, 0, 0.5, 0.5, -0.2, 0.8, -0.5, 0.3]).reshape(3, 3, order="F")
PAPER_NU = np.diag([0.5, 0.5, 0.5])


def default_loading(p: int, r: int = 3) -> np.ndarray:
    """Trigonometric loading with ``L'L = p I_3``.

    Columns are ``sqrt(2) cos(2 pi i / p)``, ``sqrt(2) sin(2 pi i / p)`` and
    a column of ones, ``i = 1..p``.
    """
    if r != 3:
        raise ValueError("default_loading only supports r = 3; pass an explicit loading matrix")
    if p < 3:
        raise ValueError("default_loading needs p >= 3")
    i = np.arange(1, p + 1)
    ang = 2.0 * np.pi * i / p
    return np.column_stack([np.sqrt(2.0) * np.cos(ang), np.sqrt(2.0) * np.sin(ang), np.ones(p)])


def default_idio(p: int, scale: float = 0.1, decay: float = 0.5) -> np.ndarray:
    """Banded-decay idiosyncratic matrix ``scale * decay**|i-j|``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    i = np.arange(p)
    return scale * decay ** np.abs(i[:, None] - i[None, :])


def phi_functions(A, order: int = 3, rtol: float = 1e-14, max_terms: int = 500):
    r"""``phi_1(A), ..., phi_order(A)`` with :math:`\phi_k(A) = \sum_{j\ge0} A^j/(j+k)!`.

    Summed as power series, so singular ``A`` (including ``A = 0``) is fine.
    A term stops the series once its Frobenius norm falls below ``rtol``
    times the running sum.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    out = []
    for k in range(1, order + 1):
        term = np.eye(n) / factorial(k)
        total = term.copy()
        for j in range(1, max_terms):
            term = term @ A / (j + k)
            total += term
            if np.linalg.norm(term) < rtol * max(np.linalg.norm(total), 1e-300):
                break
        else:
            raise ArithmeticError("phi-function series did not converge")
        out.append(total)
    return out


def _vech_coefficients(C, r):
    """Map an ``r^2 x r^2`` coefficient on ``vec(Psi)`` to ``d0 x d0`` on ``vech(Psi)``."""
    d0 = vech_dim(r)
    pairs = [(i, j) for j in range(r) for i in range(j, r)]
    out = np.empty((d0, d0))
    for row, (i, j) in enumerate(pairs):
        a = C[i + j * r].reshape(r, r, order="F")
        sym = a + a.T - np.diag(np.diag(a))
        out[row] = [sym[k, l] for k, l in pairs]
    return out


def derive_beta(alpha0, alpha, nu, check_stationary: bool = True) -> SVParams:
    """Exact vech-AR coefficients implied by the continuous-time parameters.

    Parameters
    ----------
    alpha0 : (r, r) array
    alpha : list of (r, r) arrays
        ``alpha_1, ..., alpha_q``.
    nu : (r, r) array
    check_stationary : bool
        Raise ``ValueError("non-stationary ...")`` when the largest
        eigenvalue modulus of ``sum_j beta_j`` is at least one.

    Returns
    -------
    SVParams
    """
    alpha0 = np.asarray(alpha0, dtype=float)
    alpha = [np.asarray(a, dtype=float) for a in alpha]
    nu = np.asarray(nu, dtype=float)
    r = alpha0.shape[0]
    q = len(alpha)
    if q < 1:
        raise ValueError("need at least one alpha matrix")
    A = [np.kron(a, a) for a in alpha]
    rho1, rho2, rho3 = phi_functions(A[0], 3)
    vec = lambda m: m.reshape(-1, order="F")  # noqa: E731
    intercept = rho1 @ vec(alpha0 @ alpha0.T) + (rho2 - 2.0 * rho3) @ vec(nu.T @ nu)
    im = intercept.reshape(r, r, order="F")
    beta0 = vech(0.5 * (im + im.T))
    betas = []
    for j in range(q):
        C = (rho1 - rho2) @ A[j]
        if j + 1 < q:
            C = C + rho2 @ A[j + 1]
        betas.append(_vech_coefficients(C, r))
    theta = SVParams(r=r, q=q, beta0=beta0, betas=betas)
    if check_stationary:
        rad = float(np.max(np.abs(np.linalg.eigvals(np.sum(betas, axis=0)))))
        if rad >= 1.0:
            raise ValueError(f"non-stationary: largest eigenvalue modulus of sum(beta_j) is {rad:.4f} >= 1")
    return theta


@dataclass
class SimConfig:
    """Simulation design; array-valued fields accept nested lists."""

    p: int
    r: int = 3
    q: int = 1
    n: int = 125
    m: int = 390
    substeps_per_obs: int = 10
    alpha0: np.ndarray = field(default_factory=lambda: PAPER_ALPHA0.copy())
    alpha: list = field(default_factory=lambda: [PAPER_ALPHA1.copy()])
    nu: np.ndarray = field(default_factory=lambda: PAPER_NU.copy())
    loading: np.ndarray | None = None
    idio: np.ndarray | None = None
    noise_sd: float = 0.005
    drift: float = 0.0
    seed: int = 0
    burnin_days: int = 50
    thinning: float | None = None
    initial_psi: np.ndarray | None = None

    def __post_init__(self):
        self.alpha0 = np.asarray(self.alpha0, dtype=float)
        self.alpha = [np.asarray(a, dtype=float) for a in self.alpha]
        self.nu = np.asarray(self.nu, dtype=float)
        if self.loading is not None:
            self.loading = np.asarray(self.loading, dtype=float)
        if self.idio is not None:
            self.idio = np.asarray(self.idio, dtype=float)
        if self.initial_psi is not None:
            self.initial_psi = np.asarray(self.initial_psi, dtype=float)
        self.validate()

    def validate(self):
        if not (self.p >= self.r >= 1):
            raise ValueError(f"need p >= r >= 1 (p={self.p}, r={self.r})")
        if self.q < 1 or len(self.alpha) != self.q:
            raise ValueError(f"q={self.q} must be >= 1 and match len(alpha)={len(self.alpha)}")
        if self.n < self.q + 1:
            raise ValueError(f"n={self.n} must be >= q + 1")
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.substeps_per_obs < 1:
            raise ValueError("substeps_per_obs must be >= 1")
        if self.burnin_days < 0:
            raise ValueError("burnin_days must be >= 0")
        for name, a in [("alpha0", self.alpha0), ("nu", self.nu)] + [(f"alpha[{j}]", a) for j, a in enumerate(self.alpha)]:
            if a.shape != (self.r, self.r):
                raise ValueError(f"{name} must be {self.r}x{self.r}, got {a.shape}")
        a1 = self.alpha[0]
        rad = float(np.max(np.abs(np.linalg.eigvals(a1))))
        if not rad < 1.0:
            raise ValueError(f"spectral radius of alpha_1 must be < 1 (got {rad:.4f})")
        if np.linalg.norm(a1, 2) >= 1.0:
            logger.debug("alpha_1 has spectral norm %.4f >= 1; accepted because its spectral radius is %.4f",
                        np.linalg.norm(a1, 2), rad)
        if abs(np.linalg.det(a1)) <= 1e-14:
            raise ValueError("alpha_1 must be invertible")
        self.theta()
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.thinning is not None and not (0.0 < self.thinning <= 1.0):
            raise ValueError("thinning must lie in (0, 1]")
        if self.loading is not None and self.loading.shape != (self.p, self.r):
            raise ValueError(f"loading must be {self.p}x{self.r}")
        if self.idio is not None:
            if self.idio.shape != (self.p, self.p):
                raise ValueError(f"idio must be {self.p}x{self.p}")
            if np.linalg.eigvalsh(0.5 * (self.idio + self.idio.T))[0] < -1e-12:
                raise ValueError("idio must be positive semi-definite")

    def loading_matrix(self) -> np.ndarray:
        if self.loading is not None:
            return self.loading
        L = default_loading(self.p, self.r)
        gram = L.T @ L
        if np.max(np.abs(gram - self.p * np.eye(self.r))) > 1e-10 * self.p:
            raise AssertionError("default loading lost orthogonality")
        return L

    def idio_matrix(self) -> np.ndarray:
        return self.idio if self.idio is not None else default_idio(self.p)

    def theta(self) -> SVParams:
        return derive_beta(self.alpha0, self.alpha, self.nu)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in list(d.items()):
            if isinstance(val, np.ndarray):
                d[key] = val.tolist()
            elif isinstance(val, list):
                d[key] = [v.tolist() if isinstance(v, np.ndarray) else v for v in val]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def paper_config(p=200, n=125, m=390, seed=0, **kw) -> SimConfig:
    """Three-factor AR(1) design with the trigonometric loading and banded idiosyncratic matrix."""
    return SimConfig(p=p, n=n, m=m, seed=seed, **kw)


@dataclass
class SimOutput:
    ticks: TickPanel | None
    true_psi: np.ndarray
    true_sigma_end: np.ndarray
    loading: np.ndarray
    idio: np.ndarray
    config: SimConfig | None = None
    clips: int = 0

    @property
    def true_gamma(self) -> np.ndarray:
        """``L Psi_k L' + Gamma^s`` for every day, shape ``(n, p, p)``."""
        return np.einsum("ia,kab,jb->kij", self.loading, self.true_psi, self.loading) + self.idio


@numba.njit(cache=True)
def _cholesky_lower(S, out):
    # returns False when a pivot is not strictly positive
    r = S.shape[0]
    for j in range(r):
        acc = S[j, j]
        for k in range(j):
            acc -= out[j, k] * out[j, k]
        if acc <= 0.0:
            return False
        out[j, j] = math.sqrt(acc)
        for i in range(j + 1, r):
            acc = S[i, j]
            for k in range(j):
                acc -= out[i, k] * out[j, k]
            out[i, j] = acc / out[j, j]
        for i in range(j):
            out[i, j] = 0.0
    return True


@numba.njit(cache=True)
def _integrate_day(sigma0, base, a1, nu, dB1, dB, obs_every, psd_tol):
    """Euler pass over one day.

    Returns ``(psi, f_inc, clips, worst)``: the left-endpoint Riemann sum of
    Sigma, factor increments aggregated per observation (empty when ``dB``
    has no rows), the number of eigenvalue clips and the most negative
    eigenvalue seen relative to the trace.
    """
    N, r = dB1.shape
    dt = 1.0 / N
    I = np.zeros((r, r))
    Z = np.zeros(r)
    tmp = np.zeros((r, r))
    S = np.zeros((r, r))
    C = np.zeros((r, r))
    with_prices = dB.shape[0] > 0
    n_obs = N // obs_every if with_prices else 0
    f_inc = np.zeros((n_obs, r))
    clips = 0
    worst = 0.0
    for step in range(N):
        s = step * dt
        # tmp = I a1'
        for i in range(r):
            for j in range(r):
                acc = 0.0
                for k in range(r):
                    acc += I[i, k] * a1[j, k]
                tmp[i, j] = acc
        for i in range(r):
            for j in range(i, r):
                acc = 0.0
                for k in range(r):
                    acc += a1[i, k] * tmp[k, j]
                v = (1.0 - s) * sigma0[i, j] + s * base[i, j] + acc + (1.0 - s) * Z[i] * Z[j]
                S[i, j] = v
        for i in range(r):
            for j in range(i):
                S[i, j] = S[j, i]
        ok = _cholesky_lower(S, C)
        if not ok:
            lam, V = np.linalg.eigh(S)
            tr = 0.0
            for i in range(r):
                tr += abs(lam[i])
            if lam[0] < 0.0:
                rel = lam[0] / max(tr, 1e-300)
                if rel < worst:
                    worst = rel
                if rel < -psd_tol:
                    return I, f_inc, clips, worst
                clips += 1
            for i in range(r):
                lam[i] = max(lam[i], 0.0)
            for i in range(r):
                for j in range(r):
                    acc = 0.0
                    acc2 = 0.0
                    for k in range(r):
                        acc += V[i, k] * lam[k] * V[j, k]
                        acc2 += V[i, k] * math.sqrt(lam[k]) * V[j, k]
                    S[i, j] = acc
                    C[i, j] = acc2
        if with_prices:
            o = step // obs_every
            for i in range(r):
                acc = 0.0
                for k in range(r):
                    acc += C[i, k] * dB[step, k]
                f_inc[o, i] += acc
        for i in range(r):
            for j in range(r):
                I[i, j] += S[i, j] * dt
        for i in range(r):
            acc = 0.0
            for k in range(r):
                acc += nu[k, i] * dB1[step, k]
            Z[i] += acc
    return I, f_inc, clips, worst


PSD_TOL = 1e-10


class _FactorState:
    """Instantaneous volatility at the last integer time plus the Psi history."""

    def __init__(self, alpha0, alpha, nu, sigma0, psi_hist):
        self.a0a0 = alpha0 @ alpha0.T
        self.alpha = alpha
        self.nu = nu
        self.sigma = sigma0.copy()
        self.hist = [h.copy() for h in psi_hist]  # most recent first, length q
        self.clips = 0

    def base(self):
        b = self.a0a0.copy()
        for j in range(1, len(self.alpha)):
            a = self.alpha[j]
            b += a @ self.hist[j - 1] @ a.T
        return b

    def step_day(self, dB1, dB, obs_every):
        base = self.base()
        psi, f_inc, clips, worst = _integrate_day(self.sigma, base, self.alpha[0], self.nu, dB1, dB, obs_every, PSD_TOL)
        if worst < -PSD_TOL:
            raise FloatingPointError(
                f"instantaneous volatility left the PSD cone (min eigenvalue / trace = {worst:.3e})"
            )
        self.clips += clips
        psi = 0.5 * (psi + psi.T)
        a1 = self.alpha[0]
        self.sigma = base + a1 @ psi @ a1.T
        self.sigma = 0.5 * (self.sigma + self.sigma.T)
        self.hist = [psi] + self.hist[:-1]
        return psi, f_inc


def _initial_state(config: SimConfig) -> _FactorState:
    if config.initial_psi is not None:
        start = config.initial_psi
    else:
        start = config.theta().stationary_mean()
    return _FactorState(config.alpha0, config.alpha, config.nu, start, [start] * config.q)


def iter_days(config: SimConfig, rng: np.random.Generator | None = None):
    """Yield one simulated day at a time after the burn-in.

    Each item is a dict with ``psi`` (r, r), ``sigma_end`` (r, r),
    ``times`` (m,), ``prices`` (m, p) observed log prices and for day 0 also
    ``initial_prices`` (p,).  Non-synchronous (thinned) days carry
    ``ticks``: a list of per-asset ``(times, prices)`` instead.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    r, p, m = config.r, config.p, config.m
    N = m * config.substeps_per_obs
    sq = math.sqrt(1.0 / N)
    state = _initial_state(config)
    empty = np.zeros((0, r))
    for _ in range(config.burnin_days):
        state.step_day(rng.standard_normal((N, r)) * sq, empty, config.substeps_per_obs)
    L = config.loading_matrix()
    idio = config.idio_matrix()
    lam, V = np.linalg.eigh(0.5 * (idio + idio.T))
    idio_root = (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
    x = np.zeros(p)
    obs_grid = np.arange(1, m + 1) / m
    for k in range(config.n):
        dB1 = rng.standard_normal((N, r)) * sq
        dB = rng.standard_normal((N, r)) * sq
        psi, f_inc = state.step_day(dB1, dB, config.substeps_per_obs)
        u_inc = rng.standard_normal((m, p)) @ idio_root * math.sqrt(1.0 / m)
        incr = f_inc @ L.T + u_inc + config.drift / m
        path = x + np.cumsum(incr, axis=0)
        noise = rng.standard_normal((m, p)) * config.noise_sd
        item = {"day": k, "psi": psi, "sigma_end": state.sigma.copy(), "times": k + obs_grid}
        if k == 0:
            item["initial_prices"] = x + rng.standard_normal(p) * config.noise_sd
        observed = path + noise
        if config.thinning is not None and config.thinning < 1.0:
            keep = rng.random((m, p)) < config.thinning
            keep[0] = True
            keep[-1] = True
            item["ticks"] = [(item["times"][keep[:, i]], observed[keep[:, i], i]) for i in range(p)]
        else:
            item["prices"] = observed
        x = path[-1]
        yield item
    logger.debug("simulation finished with %d eigenvalue clips", state.clips)


def simulate(config: SimConfig) -> SimOutput:
    """Run the full simulation and collect ticks plus truth."""
    rng = np.random.default_rng(config.seed)
    days = []
    psis = []
    sigma_end = None
    init = None
    gen = iter_days(config, rng)
    for item in gen:
        psis.append(item["psi"])
        sigma_end = item["sigma_end"]
        if "initial_prices" in item:
            init = item["initial_prices"]
        days.append(item)
    if "ticks" in days[0]:
        panel = TickPanel(config.n, config.p, ticks=[d["ticks"] for d in days], initial_prices=init,
                          initial_times=np.zeros(config.p))
    else:
        panel = TickPanel(
            config.n,
            config.p,
            prices=np.stack([d["prices"] for d in days]),
            times=np.stack([d["times"] for d in days]),
            initial_prices=init,
            initial_times=np.zeros(config.p),
        )
    return SimOutput(
        ticks=panel,
        true_psi=np.stack(psis),
        true_sigma_end=sigma_end,
        loading=config.loading_matrix(),
        idio=config.idio_matrix(),
        config=config,
    )


def simulate_factor_vol(config: SimConfig, n_days: int | None = None, substeps_per_day: int | None = None,
                        rng: np.random.Generator | None = None):
    """Simulate only the factor volatility, returning exact daily ``Psi_k``.

    No prices are generated, which makes long runs (tens of thousands of
    days) cheap.  Returns ``(psi, sigma_end, clips)`` with ``psi`` shaped
    ``(n_days, r, r)``.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n_days = config.n if n_days is None else n_days
    N = config.m * config.substeps_per_obs if substeps_per_day is None else substeps_per_day
    sq = math.sqrt(1.0 / N)
    state = _initial_state(config)
    empty = np.zeros((0, config.r))
    for _ in range(config.burnin_days):
        state.step_day(rng.standard_normal((N, config.r)) * sq, empty, 1)
    out = np.empty((n_days, config.r, config.r))
    for k in range(n_days):
        out[k], _ = state.step_day(rng.standard_normal((N, config.r)) * sq, empty, 1)
    return out, state.sigma.copy(), state.clips


def conditional_oracle(sim: SimOutput, theta: SVParams, psi_history=None) -> np.ndarray:
    """``L H_{n+1}(theta) L' + Gamma^s`` from the true loading, history and idiosyncratic matrix."""
    psi = sim.true_psi if psi_history is None else np.asarray(psi_history)
    if len(psi) < theta.q:
        raise ValueError("not enough Psi history for the oracle")
    hist = [psi[-1 - j] for j in range(theta.q)]
    H = build_H(theta, hist)
    L = sim.loading
    out = L @ H @ L.T + sim.idio
    return 0.5 * (out + out.T)


def write_sim_output(sim: SimOutput, directory, write_ticks: bool = True):
    """Write ticks CSV, truth matrices and a JSON manifest into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    truth = os.path.join(directory, "truth")
    os.makedirs(truth, exist_ok=True)
    fmt = "%.17g"
    np.savetxt(os.path.join(truth, "loading.csv"), sim.loading, delimiter=",", fmt=fmt)
    np.savetxt(os.path.join(truth, "idio.csv"), sim.idio, delimiter=",", fmt=fmt)
    np.savetxt(os.path.join(truth, "sigma_end.csv"), sim.true_sigma_end, delimiter=",", fmt=fmt)
    for k, psi in enumerate(sim.true_psi):
        np.savetxt(os.path.join(truth, f"psi_{k:05d}.csv"), psi, delimiter=",", fmt=fmt)
    if write_ticks and sim.ticks is not None:
        write_ticks_csv(sim.ticks, os.path.join(directory, "ticks.csv"))
    cfg = sim.config
    manifest = {
        "n_days": int(sim.true_psi.shape[0]),
        "p": int(sim.loading.shape[0]),
        "r": int(sim.loading.shape[1]),
        "m": int(cfg.m) if cfg else None,
        "seed": int(cfg.seed) if cfg else None,
        "synchronous": bool(sim.ticks.synchronous) if sim.ticks is not None else None,
        "day_convention": {"origin": 0.0, "day_length": 1.0, "interval": "(k-1, k]"},
        "config": cfg.to_dict() if cfg else None,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
