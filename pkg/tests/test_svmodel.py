import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svito.svmodel import (
    SVParams,
    build_H,
    build_H_series,
    lse_fit,
    qmle_fit,
    qmle_objective,
    select_order,
    unvech,
    vech,
    vech_dim,
)


def test_vech_small_case():
    np.testing.assert_array_equal(vech(np.array([[1.0, 2.0], [2.0, 3.0]])), [1.0, 2.0, 3.0])


def test_vech_dimension_matches_three_factors():
    assert vech_dim(3) == 6


def test_vech_rejects_asymmetric():
    with pytest.raises(ValueError):
        vech(np.array([[1.0, 2.0], [2.1, 3.0]]))


def test_unvech_rejects_bad_length():
    with pytest.raises(ValueError):
        unvech(np.ones(5))


@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_vech_roundtrip(r, seed):
    a = np.random.default_rng(seed).standard_normal((r, r))
    m = a + a.T
    np.testing.assert_array_equal(unvech(vech(m), r), m)


def test_vech_column_major_order():
    m = np.array([[1.0, 2.0, 4.0], [2.0, 3.0, 5.0], [4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(vech(m), [1, 2, 4, 3, 5, 6])


def _random_theta(rng, r, q, scale=0.2):
    d0 = vech_dim(r)
    beta0 = vech(np.eye(r)) * 0.3
    betas = [rng.uniform(-scale, scale, (d0, d0)) / d0 for _ in range(q)]
    return SVParams(r=r, q=q, beta0=beta0, betas=betas)


def test_theta_vector_roundtrip(rng):
    th = _random_theta(rng, 3, 2)
    back = SVParams.from_vector(th.to_vector(), 3, 2)
    np.testing.assert_array_equal(back.to_vector(), th.to_vector())
    assert th.dim == 6 + 2 * 36


def test_theta_json_roundtrip(tmp_path, rng):
    th = _random_theta(rng, 2, 1)
    th.to_json(tmp_path / "t.json")
    back = SVParams.from_json(tmp_path / "t.json")
    np.testing.assert_array_equal(back.to_vector(), th.to_vector())
    assert json.loads((tmp_path / "t.json").read_text())["stationary"] is True


def test_build_H_constant_model(rng):
    th = SVParams(r=2, q=1, beta0=[1.0, 0.2, 0.5], betas=[np.zeros((3, 3))])
    a = rng.standard_normal((2, 2))
    h = build_H(th, [a + a.T])
    np.testing.assert_array_equal(h, [[1.0, 0.2], [0.2, 0.5]])


def test_build_H_martingale_limit():
    th = SVParams(r=2, q=1, beta0=np.zeros(3), betas=[np.eye(3)])
    psi = np.array([[0.4, 0.1], [0.1, 0.3]])
    np.testing.assert_allclose(build_H(th, [psi]), psi)


def test_build_H_fixed_point(rng):
    th = _random_theta(rng, 3, 1)
    mean = th.stationary_mean()
    np.testing.assert_allclose(build_H(th, [mean]), mean, atol=1e-12)


def test_lse_exact_recovery_noiseless():
    rng = np.random.default_rng(3)
    d0 = 3
    Q, _ = np.linalg.qr(rng.standard_normal((d0, d0)))
    th = SVParams(r=2, q=1, beta0=[0.2, 0.05, 0.1], betas=[0.9 * Q])
    x = [unvech(np.array([1.0, -0.4, 0.2]), 2)]
    for _ in range(11):
        x.append(build_H(th, [x[-1]]))
    rep = lse_fit(np.stack(x), 1)
    np.testing.assert_allclose(rep.theta.to_vector(), th.to_vector(), atol=1e-10)


def _psd_theta(r, a=0.6):
    d0 = vech_dim(r)
    return SVParams(r=r, q=1, beta0=vech(0.3 * np.eye(r) + 0.05), betas=[a * np.eye(d0)])


def _noisy_series(rng, th, n):
    r = th.r
    out = [th.stationary_mean()]
    for _ in range(n - 1):
        h = build_H(th, [out[-1]])
        c = np.linalg.cholesky(h)
        z = rng.standard_normal((r, 5)) / np.sqrt(5)
        out.append(c @ (z @ z.T) @ c.T)
    return np.stack(out)


def test_lse_normal_equations(rng):
    psi = _noisy_series(rng, _psd_theta(2), 300)
    rep = lse_fit(psi, 2)
    assert rep.converged
    X = np.column_stack(
        [np.ones(len(psi) - 2), np.stack([vech(p) for p in psi[1:-1]]), np.stack([vech(p) for p in psi[:-2]])]
    )
    scale = np.abs(X).max() * np.abs(rep.residuals).max() * len(X)
    assert np.abs(X.T @ rep.residuals).max() <= 1e-8 * scale


def test_lse_too_short():
    with pytest.raises(ValueError):
        lse_fit(np.stack([np.eye(3)] * 5), 1)


def test_lse_rank_deficient():
    with pytest.raises(np.linalg.LinAlgError, match="condition number"):
        lse_fit(np.stack([np.eye(2)] * 50), 1)


def test_fits_depend_only_on_the_window(rng):
    th = _psd_theta(2)
    psi = _noisy_series(rng, th, 300)
    window = psi[37:237]
    relabeled = np.array(window, copy=True)
    np.testing.assert_array_equal(lse_fit(window, 1).theta.to_vector(), lse_fit(relabeled, 1).theta.to_vector())
    np.testing.assert_array_equal(qmle_fit(window, 1).theta.to_vector(), qmle_fit(relabeled, 1).theta.to_vector())


def test_qmle_iid_constant(rng):
    mean = np.array([[0.5, 0.1], [0.1, 0.3]])
    c = np.linalg.cholesky(mean)
    psi = []
    for _ in range(800):
        z = rng.standard_normal((2, 20)) / np.sqrt(20)
        psi.append(c @ (z @ z.T) @ c.T)
    psi = np.stack(psi)
    rep = qmle_fit(psi, 1)
    assert rep.converged
    np.testing.assert_allclose(rep.theta.beta0, vech(psi.mean(0)), atol=0.05)
    assert np.abs(rep.theta.betas[0]).max() < 0.2


def test_qmle_improves_on_lse_objective(rng):
    th = _psd_theta(2)
    psi = _noisy_series(rng, th, 300)
    lse = lse_fit(psi, 1)
    rep = qmle_fit(psi, 1, init=lse.theta)
    assert qmle_objective(rep.theta, psi) >= qmle_objective(lse.theta, psi) - 1e-12
    hist = rep.history
    assert all(b >= a - 1e-10 for a, b in zip(hist, hist[1:]))


def test_qmle_rejects_bad_init(rng):
    th = _psd_theta(2)
    psi = _noisy_series(rng, th, 200)
    bad = SVParams(r=2, q=1, beta0=[np.nan, 0, 1], betas=[np.zeros((3, 3))])
    with pytest.raises(ValueError, match="init"):
        qmle_fit(psi, 1, init=bad)


def test_qmle_floor_repairs_negative_H(rng):
    th = _psd_theta(2)
    psi = _noisy_series(rng, th, 200)
    neg = SVParams(r=2, q=1, beta0=[-1.0, 0, -1.0], betas=[np.zeros((3, 3))])
    assert np.isfinite(qmle_objective(neg, psi))


def test_build_H_series_matches_loop(rng):
    th = _random_theta(rng, 2, 2)
    psi = _noisy_series(rng, _psd_theta(2), 50)
    H = build_H_series(th, psi)
    np.testing.assert_allclose(H[0], build_H(th, [psi[1], psi[0]]))
    np.testing.assert_allclose(H[-1], build_H(th, [psi[-2], psi[-3]]))


def test_select_order_prefers_true_order(rng):
    psi = _noisy_series(rng, _psd_theta(2), 1500)
    best, scores = select_order(psi, orders=(1, 2, 3), criterion="bic")
    assert best == 1
    assert set(scores) == {1, 2, 3}


@pytest.mark.parametrize("q", [1, 2])
def test_qmle_gradient_matches_finite_differences(rng, q):
    from svito.svmodel import _central_gradient, _Likelihood

    psi = _noisy_series(rng, _psd_theta(3), 120)
    nll = _Likelihood(psi, q, 1e-10, 1.0)
    th = SVParams(r=3, q=q, beta0=vech(0.3 * np.eye(3) + 0.05), betas=[0.5 / q * np.eye(6)] * q)
    x = th.to_vector() + 0.001 * rng.standard_normal(6 + q * 36)
    exact = nll.gradient(x)
    assert exact is not None
    approx = _central_gradient(nll, x)
    np.testing.assert_allclose(exact, approx, rtol=1e-5, atol=1e-7)
