import numpy as np
import pytest

from conftest import random_conv2d
from specclip._linalg import householder_qr, jacobi_singular_values
from specclip.linops import ConvSpec, DenseSpec, circular_conv1d, gram_apply, scale_params, with_params
from specclip.spectral import (
    PowerQRConfig,
    RankDeficientError,
    deflated_power_baseline,
    make_rng,
    power_qr,
    svd_oracle,
    track_step,
)


def test_diag_two_by_two():
    est = power_qr(DenseSpec(np.diag([3.0, 1.0])), PowerQRConfig(k=2, iterations=50))
    np.testing.assert_allclose(est.sigmas, [3.0, 1.0], atol=1e-8)
    np.testing.assert_allclose(np.abs(est.V), np.eye(2), atol=1e-8)


def test_circulant_pair_filter():
    est = power_qr(circular_conv1d([1.0, 1.0], 4), PowerQRConfig(k=4))
    np.testing.assert_allclose(est.sigmas, [2.0, np.sqrt(2), np.sqrt(2), 0.0], atol=1e-6)


def test_random_conv_stride2_top5():
    rng = make_rng(7)
    op = ConvSpec(rng.standard_normal((2, 2, 3, 3)), (2, 8, 8), stride=2, padding="zeros", pad_amount=1)
    est = power_qr(op, PowerQRConfig(k=5))
    np.testing.assert_allclose(est.sigmas, svd_oracle(op)[:5], rtol=1e-7)


def test_orthonormal_every_iteration(rng):
    op = random_conv2d(rng, size=5, padding="reflect")
    errs = []
    power_qr(op, PowerQRConfig(k=6, iterations=40, tol=0), callback=lambda i, Q: errs.append(
        np.linalg.norm(Q.T @ Q - np.eye(6))))
    assert len(errs) == 40 and max(errs) <= 1e-8


def test_shift_invariance():
    op = DenseSpec(np.diag([5.0, 3.0, 2.0, 1.0, 0.5]))
    a = power_qr(op, PowerQRConfig(k=3, mu=0.5, iterations=500))
    b = power_qr(op, PowerQRConfig(k=3, mu=1.0, iterations=500))
    assert a.converged and b.converged
    np.testing.assert_allclose(a.sigmas, b.sigmas, atol=1e-8)


def test_subspace_residual(rng):
    # zero padding: circular layers have exact duplicates that can straddle the block edge
    op = random_conv2d(rng, size=5, padding="zeros")
    est = power_qr(op, PowerQRConfig(k=4, iterations=3000, tol=0))
    G = gram_apply(op, est.V)
    for i, s in enumerate(est.sigmas):
        assert np.linalg.norm(G[:, i] - s**2 * est.V[:, i]) <= 1e-6 * s**2


def test_estimators_share_limit(rng):
    op = DenseSpec(rng.standard_normal((20, 15)))
    ref = svd_oracle(op)[:4]
    for est in ("r", "rayleigh", "ritz"):
        np.testing.assert_allclose(power_qr(op, PowerQRConfig(k=4, iterations=3000), estimator=est).sigmas,
                                   ref, rtol=1e-8)
    with pytest.raises(ValueError):
        power_qr(op, estimator="lanczos")


def test_rank_deficient_start_rejected():
    op = DenseSpec(np.eye(3))
    with pytest.raises(RankDeficientError):
        power_qr(op, PowerQRConfig(k=2), X0=np.ones((3, 2)))
    with pytest.raises(ValueError):
        power_qr(op, PowerQRConfig(k=4))


def test_track_step_fixed_point():
    op = DenseSpec(np.diag([3.0, 2.0, 1.0]))
    est = power_qr(op, PowerQRConfig(k=2, iterations=400))
    for mu in (1.0, 0.0):
        nxt = track_step(op, est, mu)
        np.testing.assert_allclose(nxt.sigmas, est.sigmas, atol=1e-10)


def test_track_step_follows_perturbation(rng):
    op = random_conv2d(rng, size=6, padding="zeros")
    est = power_qr(op, PowerQRConfig(k=1, iterations=1000))
    k = op.kernel
    moved = with_params(op, [k + 1e-3 * np.linalg.norm(k) / np.sqrt(k.size) * rng.standard_normal(k.shape)])
    for _ in range(5):
        est = track_step(moved, est)
    assert abs(est.sigma1 - svd_oracle(moved)[0]) <= 1e-4


def test_track_step_shape_mismatch():
    est = power_qr(DenseSpec(np.eye(3)), PowerQRConfig(k=1))
    with pytest.raises(ValueError):
        track_step(DenseSpec(np.eye(4)), est)


def test_deflated_diag():
    est = deflated_power_baseline(DenseSpec(np.diag([3.0, 2.0, 1.0])), 3)
    np.testing.assert_allclose(est.sigmas, [3.0, 2.0, 1.0], atol=1e-6)


def test_deflated_matches_power_qr():
    rng = make_rng(11)
    op = DenseSpec(rng.standard_normal((50, 50)))
    a = deflated_power_baseline(op, 10, iters_per_vector=5000, tol=1e-14)
    b = power_qr(op, PowerQRConfig(k=10, iterations=5000))
    np.testing.assert_allclose(a.sigmas, b.sigmas, rtol=1e-5)


def test_deflated_flags_budget_exhaustion():
    op = DenseSpec(np.diag([1.0, 0.999, 0.5]))
    assert not deflated_power_baseline(op, 2, iters_per_vector=3).converged


def test_oracle_small_cases():
    np.testing.assert_allclose(svd_oracle(DenseSpec(np.eye(6))), np.ones(6), atol=1e-14)
    np.testing.assert_allclose(svd_oracle(DenseSpec(np.array([[0.0, 2.0], [0.0, 0.0]]))), [2.0, 0.0], atol=1e-14)
    rng = make_rng(2)
    op = DenseSpec(rng.standard_normal((5, 7)))
    np.testing.assert_allclose(svd_oracle(op)[:5], power_qr(op, PowerQRConfig(k=5, iterations=5000)).sigmas,
                               atol=1e-9)


def test_oracle_two_by_two_closed_form():
    # singular values of [[a, b], [0, d]] from the characteristic polynomial of M^T M
    a, b, d = 2.0, 1.5, 0.25
    M = np.array([[a, b], [0.0, d]])
    tr, det = np.trace(M.T @ M), (a * d) ** 2
    lam = np.array([tr + np.sqrt(tr**2 - 4 * det), tr - np.sqrt(tr**2 - 4 * det)]) / 2
    np.testing.assert_allclose(svd_oracle(DenseSpec(M)), np.sqrt(lam), rtol=1e-14)


def test_jacobi_repeated_values_and_tiny_ones():
    # exactly repeated values used to make the rotation threshold cycle
    s, _ = jacobi_singular_values(np.kron(np.eye(8), np.array([[1.0, 1.0], [-1.0, 1.0]])))
    np.testing.assert_allclose(s, np.full(16, np.sqrt(2)), rtol=1e-14)
    rng = np.random.default_rng(0)
    U, _ = np.linalg.qr(rng.standard_normal((30, 30)))
    W, _ = np.linalg.qr(rng.standard_normal((30, 30)))
    sig = np.logspace(0, -12, 30)
    s, _ = jacobi_singular_values(U @ np.diag(sig) @ W.T)
    np.testing.assert_allclose(s, sig, rtol=1e-3)


def test_householder_signs(rng):
    A = rng.standard_normal((9, 4))
    Q, R = householder_qr(A)
    assert np.all(np.diag(R) >= 0)
    np.testing.assert_allclose(Q @ R, A, atol=1e-12)
    np.testing.assert_allclose(Q.T @ Q, np.eye(4), atol=1e-12)


def test_seeded_runs_are_identical(rng):
    op = random_conv2d(rng, size=5)
    a = power_qr(op, PowerQRConfig(k=3, seed=9))
    b = power_qr(op, PowerQRConfig(k=3, seed=9))
    assert np.array_equal(a.sigmas, b.sigmas) and np.array_equal(a.V, b.V)


def test_scaling_scales_spectrum(rng):
    op = random_conv2d(rng, size=4, padding="replicate")
    np.testing.assert_allclose(svd_oracle(scale_params(op, 0.3)), 0.3 * svd_oracle(op), atol=1e-12)
