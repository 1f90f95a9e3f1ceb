r"""Daily integrated volatility matrices from noisy high-frequency prices.

The estimator is the pre-averaging realized volatility matrix (PRVM).  For a
window of ``k`` increments and weight :math:`g(x) = \min(x, 1-x)`,

.. math::

    \bar Y_j = \sum_{h=1}^{k-1} g(h/k)\,\Delta Y_{j+h}, \qquad
    \widehat\Gamma = \frac{M}{M-k+2}\,\frac{1}{\psi_2 k}\sum_j \bar Y_j \bar Y_j^\top
    - \frac{M \psi_1}{\psi_2 k^2}\,\mathrm{Diag}(\hat\eta),

where ``M`` is the number of increments and :math:`\hat\eta_i` the noise
variance of asset ``i``.  Non-synchronous panels are first aligned on
refresh times.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TickPanel",
    "DailyVolMatrix",
    "prvm",
    "prvm_matrix",
    "psd_project",
    "refresh_time",
    "preaverage_weights",
    "read_ticks_csv",
    "write_ticks_csv",
    "read_generic_ticks",
]


@dataclass
class TickPanel:
    """Intraday log prices for ``n_days`` days and ``n_assets`` assets.

    Synchronous panels keep a dense ``(n_days, m, p)`` price cube with a
    shared ``(n_days, m)`` time grid.  Non-synchronous panels keep
    ``ticks[k][i] = (times, prices)``.  ``initial_prices`` holds one
    observation per asset at the left edge of day 0; together with the last
    tick of each previous day it anchors the first increment of a day, so a
    day's returns span the whole interval ``(k-1, k]``.
    """

    n_days: int
    n_assets: int
    prices: np.ndarray | None = None
    times: np.ndarray | None = None
    ticks: list | None = None
    initial_prices: np.ndarray | None = None
    initial_times: np.ndarray | None = None

    def __post_init__(self):
        if self.prices is None and self.ticks is None:
            raise ValueError("TickPanel needs dense prices or a tick list")
        if self.prices is not None:
            self.prices = np.asarray(self.prices, dtype=float)
            if self.prices.shape[0] != self.n_days or self.prices.shape[2] != self.n_assets:
                raise ValueError(f"price cube shape {self.prices.shape} does not match ({self.n_days}, m, {self.n_assets})")
            self.times = np.asarray(self.times, dtype=float)
            if self.times.shape != self.prices.shape[:2]:
                raise ValueError("times must be (n_days, m)")
            if np.any(np.diff(self.times, axis=1) <= 0):
                raise ValueError("tick times must be strictly increasing within each day")
            if self.prices.shape[1] < 2:
                raise ValueError("need at least 2 ticks per asset and day")

    @property
    def synchronous(self) -> bool:
        return self.prices is not None

    @property
    def m(self) -> float:
        """Average number of ticks per asset and day."""
        if self.synchronous:
            return float(self.prices.shape[1])
        counts = [len(t) for day in self.ticks for (t, _) in day]
        return float(np.mean(counts))

    def day_series(self, day: int):
        """Per-asset ``(times, prices)`` for ``day`` including the anchor tick."""
        if not 0 <= day < self.n_days:
            raise IndexError(f"day {day} outside 0..{self.n_days - 1}")
        out = []
        for i in range(self.n_assets):
            if self.synchronous:
                t, y = self.times[day], self.prices[day, :, i]
            else:
                t, y = self.ticks[day][i]
            anchor = self._anchor(day, i)
            if anchor is not None:
                t = np.concatenate(([anchor[0]], t))
                y = np.concatenate(([anchor[1]], y))
            out.append((np.asarray(t, dtype=float), np.asarray(y, dtype=float)))
        return out

    def _anchor(self, day, i):
        if day > 0:
            if self.synchronous:
                return self.times[day - 1, -1], self.prices[day - 1, -1, i]
            t, y = self.ticks[day - 1][i]
            return t[-1], y[-1]
        if self.initial_prices is not None:
            t0 = self.initial_times[i] if self.initial_times is not None else 0.0
            return t0, self.initial_prices[i]
        return None

    def day_matrix(self, day: int) -> np.ndarray:
        """Dense ``(m + 1, p)`` prices of a synchronous day, anchor first when available."""
        if not self.synchronous:
            raise ValueError("day_matrix requires a synchronous panel")
        y = self.prices[day]
        if day > 0:
            return np.vstack([self.prices[day - 1, -1], y])
        if self.initial_prices is not None:
            return np.vstack([self.initial_prices, y])
        return y


@dataclass
class DailyVolMatrix:
    day: int
    matrix: np.ndarray
    psd_projected: bool = False
    meta: dict = field(default_factory=dict)


def preaverage_weights(k: int):
    """Weights ``g(h/k)``, ``h = 0..k``, and the constants ``psi1``, ``psi2``."""
    h = np.arange(k + 1) / k
    g = np.minimum(h, 1.0 - h)
    psi1 = k * np.sum(np.diff(g) ** 2)
    psi2 = np.sum(g[1:k] ** 2) / k
    return g, psi1, psi2


def window_length(n_incr: int, window_theta: float) -> int:
    return max(2, int(math.ceil(window_theta * math.sqrt(n_incr))))


def prvm_matrix(prices, window_theta: float = 1.0, bias_correction: bool = True, k: int | None = None):
    """PRVM on a synchronous ``(T, p)`` block of log prices.

    Parameters
    ----------
    prices : (T, p) array
        Synchronized log prices (first row is the anchor).
    window_theta : float
        Window constant: ``k = ceil(theta * sqrt(T - 1))``.
    bias_correction : bool
        Subtract the diagonal noise bias.
    k : int, optional
        Explicit window length overriding ``window_theta``.

    Returns
    -------
    (p, p) array
    """
    y = np.asarray(prices, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if not np.all(np.isfinite(y)):
        bad = np.argwhere(~np.isfinite(y))
        raise ValueError(f"non-finite log price at (tick, asset) {tuple(int(v) for v in bad[0])}")
    dy = np.diff(y, axis=0)
    M, p = dy.shape
    if k is None:
        k = window_length(M, window_theta)
    if M < 2 * k:
        raise ValueError(f"window exceeds sample: k={k} needs at least {2 * k} increments, got {M}")
    g, psi1, psi2 = preaverage_weights(k)
    win = np.lib.stride_tricks.sliding_window_view(dy, k - 1, axis=0)  # (M-k+2, p, k-1)
    ybar = win @ g[1:k]
    n_win = ybar.shape[0]
    est = (M / n_win) * (ybar.T @ ybar) / (psi2 * k)
    if bias_correction:
        eta = np.maximum(np.sum(dy**2, axis=0) / (2.0 * M), 0.0)
        est[np.diag_indices(p)] -= M * psi1 / (psi2 * k**2) * eta
        est[np.diag_indices(p)] = np.maximum(np.diag(est), 0.0)
    return 0.5 * (est + est.T)


def refresh_time(series):
    """All-asset refresh-time synchronization with previous-tick interpolation.

    Parameters
    ----------
    series : list of (times, prices)
        One pair of increasing arrays per asset.

    Returns
    -------
    grid : (T,) array
        Refresh times: each is the first instant by which every asset has
        traded again since the previous refresh time.
    prices : (T, p) array
        Last observed price of each asset at or before each refresh time.
    """
    p = len(series)
    times = [np.asarray(t, dtype=float) for t, _ in series]
    vals = [np.asarray(y, dtype=float) for _, y in series]
    for i, t in enumerate(times):
        if t.size == 0:
            raise ValueError(f"asset {i} has no ticks")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"asset {i}: tick times must be strictly increasing")
    grid = []
    current = max(t[0] for t in times)
    while True:
        grid.append(current)
        nxt = -np.inf
        for i in range(p):
            j = np.searchsorted(times[i], current, side="right")
            if j >= times[i].size:
                nxt = None
                break
            nxt = max(nxt, times[i][j])
        if nxt is None:
            break
        current = nxt
    grid = np.asarray(grid)
    out = np.empty((grid.size, p))
    for i in range(p):
        idx = np.searchsorted(times[i], grid, side="right") - 1
        out[:, i] = vals[i][idx]
    return grid, out


def prvm(panel: TickPanel, day: int, window_theta: float = 1.0, bias_correction: bool = True) -> DailyVolMatrix:
    """Pre-averaging realized volatility matrix of one day of ``panel``."""
    if panel.synchronous:
        block = panel.day_matrix(day)
        sync = "grid"
    else:
        series = panel.day_series(day)
        for i, (t, y) in enumerate(series):
            if len(t) < 2:
                raise ValueError(f"asset {i}, day {day}: fewer than 2 ticks")
            if not np.all(np.isfinite(y)):
                raise ValueError(f"asset {i}, day {day}: non-finite log price")
        _, block = refresh_time(series)
        sync = "refresh-time"
    try:
        mat = prvm_matrix(block, window_theta=window_theta, bias_correction=bias_correction)
    except ValueError as exc:
        raise ValueError(f"day {day}: {exc}") from None
    return DailyVolMatrix(day=day, matrix=mat, psd_projected=False, meta={"sync": sync, "n_obs": block.shape[0]})


def psd_project(v):
    """Nearest (Frobenius) PSD matrix by clipping negative eigenvalues at zero.

    Accepts a :class:`DailyVolMatrix` or a bare array; returns the same kind.
    """
    if isinstance(v, DailyVolMatrix):
        return DailyVolMatrix(day=v.day, matrix=psd_project(v.matrix), psd_projected=True, meta=dict(v.meta))
    a = np.asarray(v, dtype=float)
    a = 0.5 * (a + a.T)
    lam, vec = np.linalg.eigh(a)
    if lam[0] >= 0:
        return a
    lam = np.clip(lam, 0.0, None)
    out = (vec * lam) @ vec.T
    return 0.5 * (out + out.T)


TICK_COLUMNS = ("day", "asset_index", "tick_index", "time", "log_price")


def write_ticks_csv(panel: TickPanel, path):
    """Write ``panel`` in long format; the day-0 anchor is written with ``day = -1``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TICK_COLUMNS)
        if panel.initial_prices is not None:
            for i in range(panel.n_assets):
                t0 = panel.initial_times[i] if panel.initial_times is not None else 0.0
                w.writerow([-1, i, 0, repr(float(t0)), repr(float(panel.initial_prices[i]))])
        for k in range(panel.n_days):
            for i in range(panel.n_assets):
                if panel.synchronous:
                    t, y = panel.times[k], panel.prices[k, :, i]
                else:
                    t, y = panel.ticks[k][i]
                for j, (tt, yy) in enumerate(zip(t, y)):
                    w.writerow([k, i, j, repr(float(tt)), repr(float(yy))])


def read_ticks_csv(path) -> TickPanel:
    """Read the long tick format written by :func:`write_ticks_csv`."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    day = data["day"].astype(int)
    asset = data["asset_index"].astype(int)
    n_assets = int(asset.max()) + 1
    init = day < 0
    initial_prices = None
    initial_times = None
    if np.any(init):
        initial_prices = np.zeros(n_assets)
        initial_times = np.zeros(n_assets)
        initial_prices[asset[init]] = data["log_price"][init]
        initial_times[asset[init]] = data["time"][init]
    body = ~init
    n_days = int(day[body].max()) + 1
    return _panel_from_long(day[body], asset[body], data["time"][body], data["log_price"][body], n_days, n_assets,
                            initial_prices, initial_times)


def _panel_from_long(day, asset, time, price, n_days, n_assets, initial_prices=None, initial_times=None):
    order = np.lexsort((time, asset, day))
    day, asset, time, price = day[order], asset[order], time[order], price[order]
    ticks = [[None] * n_assets for _ in range(n_days)]
    starts = np.flatnonzero(np.r_[True, (np.diff(day) != 0) | (np.diff(asset) != 0)])
    ends = np.r_[starts[1:], day.size]
    for s, e in zip(starts, ends):
        ticks[day[s]][asset[s]] = (time[s:e], price[s:e])
    for k in range(n_days):
        for i in range(n_assets):
            if ticks[k][i] is None or len(ticks[k][i][0]) < 2:
                raise ValueError(f"asset {i}, day {k}: fewer than 2 ticks")
    # collapse to the dense fast path when every asset shares one grid
    same = all(
        len(ticks[k][i][0]) == len(ticks[k][0][0]) and np.array_equal(ticks[k][i][0], ticks[k][0][0])
        for k in range(n_days)
        for i in range(n_assets)
    )
    if same and len({len(ticks[k][0][0]) for k in range(n_days)}) == 1:
        times = np.array([ticks[k][0][0] for k in range(n_days)])
        prices = np.stack([np.column_stack([ticks[k][i][1] for i in range(n_assets)]) for k in range(n_days)])
        return TickPanel(n_days, n_assets, prices=prices, times=times,
                         initial_prices=initial_prices, initial_times=initial_times)
    return TickPanel(n_days, n_assets, ticks=ticks, initial_prices=initial_prices, initial_times=initial_times)


def read_generic_ticks(path, manifest_path=None) -> TickPanel:
    """Read a generic ``asset_id, timestamp, log_price`` CSV.

    The day boundary convention comes from a JSON manifest with keys
    ``origin`` (default 0) and ``day_length`` (default 1): a tick at time
    ``t`` belongs to day ``ceil((t - origin) / day_length) - 1``, i.e. the
    half-open interval ``(k-1, k]`` in day units.  Optional ``assets`` lists
    asset ids in the desired column order.
    """
    manifest = {}
    if manifest_path is not None and os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    origin = float(manifest.get("origin", 0.0))
    day_length = float(manifest.get("day_length", 1.0))
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no ticks")
    ids = manifest.get("assets") or sorted({r["asset_id"] for r in rows})
    pos = {a: i for i, a in enumerate(ids)}
    asset = np.array([pos[r["asset_id"]] for r in rows])
    time = np.array([float(r["timestamp"]) for r in rows])
    price = np.array([float(r["log_price"]) for r in rows])
    bad = ~np.isfinite(price)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite log price for asset {rows[j]['asset_id']} at time {time[j]}")
    u = (time - origin) / day_length
    day = np.ceil(u).astype(int) - 1
    day -= day.min()
    return _panel_from_long(day, asset, u, price, int(day.max()) + 1, len(ids))
