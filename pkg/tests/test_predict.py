import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svito.factor import build_factor_state
from svito.predict import (
    ERROR_FIELDS,
    PoetConfig,
    baseline_threshold,
    matrix_errors,
    poet_estimate,
    poet_idio,
    sim_threshold,
    sv_poet,
    threshold_matrix,
)
from svito.sim import default_idio, default_loading
from svito.svmodel import SVParams, unvech, vech


def test_threshold_constants():
    assert sim_threshold(200, 125, 390) == pytest.approx(math.sqrt(2 * math.log(200) / (125 * math.sqrt(390) + 390)))
    assert baseline_threshold(100, 390) == pytest.approx(math.sqrt(2 * math.log(100) / math.sqrt(390)))
    assert sim_threshold(200, 500, 2340) < sim_threshold(200, 125, 390)


def test_threshold_matrix_hand_example():
    R = np.array([[4.0, 0.5, 1.9], [0.5, 1.0, -0.1], [1.9, -0.1, 1.0]])
    out = threshold_matrix(R, 0.3)
    # cut_ij = 0.3 sqrt(d_i d_j): 0.6 for (0,1) and (0,2), 0.3 for (1,2)
    np.testing.assert_array_equal(out, [[4.0, 0.0, 1.9], [0.0, 1.0, 0.0], [1.9, 0.0, 1.0]])
    np.testing.assert_array_equal(threshold_matrix(R, 0.0), R)
    np.testing.assert_array_equal(threshold_matrix(R, 10.0), np.diag([4.0, 1.0, 1.0]))


def test_threshold_negative_diagonal_floored():
    out = threshold_matrix(np.array([[-1.0, 0.2], [0.2, 1.0]]), 0.1)
    assert out[0, 0] == 0.0


def test_sector_mode():
    R = np.arange(16, dtype=float).reshape(4, 4)
    R = R + R.T
    cfg = PoetConfig(r=0, mode="sector", sector_map=["a", "b", "a", "b"])
    out = poet_idio(R, cfg)
    assert out[0, 1] == 0 and out[0, 2] == R[0, 2] and out[1, 3] == R[1, 3]
    with pytest.raises(ValueError):
        PoetConfig(r=0, mode="sector")
    with pytest.raises(ValueError):
        PoetConfig(r=0, threshold_omega=-1)


def test_poet_without_threshold_reproduces_input(rng):
    a = rng.standard_normal((8, 8))
    G = a @ a.T + np.eye(8)
    np.testing.assert_allclose(poet_estimate(G, PoetConfig(r=2, threshold_omega=0.0)), G, atol=1e-12)


def test_poet_idio_removes_spikes():
    p = 60
    L = default_loading(p)
    idio = np.diag(np.linspace(0.05, 0.1, p))
    G = L @ np.diag([4.0, 3.0, 2.0]) @ L.T + idio
    est = poet_idio(G, PoetConfig(r=3, threshold_omega=sim_threshold(p, 125, 390)))
    assert np.abs(est - idio).max() < 0.01
    with pytest.raises(ValueError, match="must be < p"):
        poet_idio(G, PoetConfig(r=p))


def _state(rng, p=20, n=10):
    L = default_loading(p)
    psi = []
    for _ in range(n):
        a = rng.standard_normal((3, 3))
        psi.append(a @ a.T + 0.1 * np.eye(3))
    gam = np.einsum("ia,kab,jb->kij", L, np.stack(psi), L)
    return build_factor_state(gam, 3)


def test_sv_poet_constant_model(rng):
    state = _state(rng)
    beta0 = vech(np.diag([0.4, 0.3, 0.2]))
    th = SVParams(r=3, q=1, beta0=beta0, betas=[np.zeros((6, 6))])
    idio = default_idio(20)
    out = sv_poet(state, th, idio, day=7)
    np.testing.assert_allclose(out.factor_part, state.loading @ unvech(beta0) @ state.loading.T)
    np.testing.assert_allclose(out.total, out.factor_part + idio)
    assert out.is_psd and out.day == 7


def test_sv_poet_martingale_uses_last_day(rng):
    state = _state(rng)
    th = SVParams(r=3, q=1, beta0=np.zeros(6), betas=[np.eye(6)])
    out = sv_poet(state, th, np.zeros((20, 20)))
    np.testing.assert_allclose(out.factor_part, state.loading @ state.psi_hat[-1] @ state.loading.T, atol=1e-12)


def test_sv_poet_projection_and_short_history(rng, tmp_path):
    state = _state(rng)
    th = SVParams(r=3, q=1, beta0=np.zeros(6), betas=[np.zeros((6, 6))])
    idio = -0.01 * np.eye(20)
    raw = sv_poet(state, th, idio)
    assert not raw.is_psd and not raw.projected
    proj = sv_poet(state, th, idio, project=True)
    assert proj.projected and np.linalg.eigvalsh(proj.total)[0] >= -1e-12
    proj.save(tmp_path)
    assert json.loads((tmp_path / "predicted.json").read_text())["projected"] is True
    state.psi_hat = state.psi_hat[:1]
    th2 = SVParams(r=3, q=2, beta0=np.zeros(6), betas=[np.zeros((6, 6))] * 2)
    with pytest.raises(ValueError, match="q=2"):
        sv_poet(state, th2, idio)


def test_matrix_errors_hand_example():
    T = 2.0 * np.eye(2)
    A = np.array([[3.0, 0.0], [0.0, 2.0]])
    e = matrix_errors(A, T)
    assert set(ERROR_FIELDS) <= set(e)
    assert e["spectral"] == pytest.approx(1.0)
    assert e["frobenius"] == pytest.approx(1.0)
    assert e["max"] == pytest.approx(1.0)
    assert e["relative_spectral"] == pytest.approx(0.5)
    assert e["relative_frobenius_norm"] == pytest.approx(1 / math.sqrt(8))
    assert e["relative_max"] == pytest.approx(0.5)
    assert e["relative_frobenius_weighted"] == pytest.approx(0.5 / math.sqrt(2))


def test_matrix_errors_non_pd_truth():
    e = matrix_errors(np.eye(2), np.diag([1.0, 0.0]))
    assert math.isnan(e["relative_frobenius_weighted"])
    assert "not positive definite" in e["weighted_skipped"]
    with pytest.raises(ValueError, match="shape mismatch"):
        matrix_errors(np.eye(2), np.eye(3))


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_weighted_error_congruence_invariant(p, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((p, p))
    T = a @ a.T + 0.5 * np.eye(p)
    b = rng.standard_normal((p, p))
    A = T + 0.1 * (b + b.T)
    B = rng.standard_normal((p, p)) + 3 * np.eye(p)
    e1 = matrix_errors(A, T)["relative_frobenius_weighted"]
    e2 = matrix_errors(B @ A @ B.T, B @ T @ B.T)["relative_frobenius_weighted"]
    assert e2 == pytest.approx(e1, rel=1e-6)


def test_weighted_error_closed_form():
    e = matrix_errors(2 * np.eye(4), np.eye(4))
    assert e["spectral"] == pytest.approx(1.0)
    assert e["relative_frobenius_weighted"] == pytest.approx(1.0)
    zero = matrix_errors(np.eye(3), np.eye(3))
    assert all(zero[k] == 0 for k in ERROR_FIELDS)


def test_singleton_sectors_give_diagonal(rng):
    a = rng.standard_normal((6, 6))
    G = a @ a.T
    out = poet_idio(G, PoetConfig(r=0, mode="sector", sector_map=np.arange(6)))
    np.testing.assert_array_equal(out, np.diag(np.diag(G)))


def test_plug_in_truth_equals_conditional_oracle():
    from svito.factor import FactorState
    from svito.sim import conditional_oracle, paper_config, simulate

    cfg = paper_config(p=15, n=6, m=40, seed=4, burnin_days=2)
    out = simulate(cfg)
    th = cfg.theta()
    state = FactorState(r=3, loading=out.loading, psi_hat=out.true_psi, s_matrix=np.eye(15), eigvals=np.ones(3))
    np.testing.assert_allclose(sv_poet(state, th, out.idio).total, conditional_oracle(out, th), atol=1e-14)


def test_threshold_improves_idiosyncratic_error():
    from svito.harness.study import _daily_matrices
    from svito.sim import paper_config

    cfg = paper_config(p=60, n=60, m=390, seed=5, substeps_per_obs=1, burnin_days=5)
    gam, _, _ = _daily_matrices(cfg, np.random.default_rng(5), 1.0)
    gbar = gam.mean(0)
    raw = poet_idio(gbar, PoetConfig(r=3, threshold_omega=0.0))
    thr = poet_idio(gbar, PoetConfig(r=3, threshold_omega=sim_threshold(60, 60, 390)))
    truth = cfg.idio_matrix()
    # the diagonal is never thresholded, so the max-norm error can only tie
    assert np.abs(thr - truth).max() <= np.abs(raw - truth).max()
    assert np.linalg.norm(thr - truth) < np.linalg.norm(raw - truth)
    assert np.count_nonzero(thr) < np.count_nonzero(raw)
