import numpy as np
import pytest

from specclip.linops import ConvSpec, DenseSpec, apply, materialize
from specclip.spectral import PowerQRConfig, make_rng, power_qr, svd_oracle
from specclip.specmod import (
    SpectrumEditPlan,
    fit_parameters,
    identity_projection_floor,
    make_plan,
    target_action,
)


def dense_plan(seed=0, edit=lambda s: np.minimum(s, 1.0)):
    rng = make_rng(seed)
    op = DenseSpec(rng.standard_normal((6, 6)), rng.standard_normal(6))
    est = power_qr(op, PowerQRConfig(k=6, iterations=3000))
    return make_plan(op, est, edit(est.sigmas))


def test_identity_edit(rng):
    plan = dense_plan(edit=lambda s: s)
    x = rng.standard_normal(6)
    np.testing.assert_allclose(target_action(plan, x), apply(plan.source, x) - apply(plan.source, np.zeros(6)),
                               atol=1e-9)


def test_diag_edit():
    op = DenseSpec(np.diag([3.0, 1.0]), np.array([2.0, 2.0]))
    plan = SpectrumEditPlan(op, [3.0, 1.0], np.eye(2), [1.0, 1.0])
    for x in np.eye(2):
        np.testing.assert_allclose(target_action(plan, x), x, atol=1e-12)


def test_uniform_scaling_edit(rng):
    plan = dense_plan(edit=lambda s: 0.5 * s)
    X = rng.standard_normal((4, 6))
    base = np.stack([apply(plan.source, x) - apply(plan.source, np.zeros(6)) for x in X])
    np.testing.assert_allclose(target_action(plan, X), 0.5 * base, atol=1e-9)


def test_zero_singular_value_cannot_be_rescaled():
    with pytest.raises(ValueError):
        SpectrumEditPlan(DenseSpec(np.eye(2)), [1.0, 0.0], np.eye(2), [1.0, 0.5])
    with pytest.raises(ValueError):
        SpectrumEditPlan(DenseSpec(np.eye(2)), [1.0, 1.0], np.eye(2), [1.0])


def test_dense_fit_is_exact():
    plan = dense_plan()
    rep = fit_parameters(plan, samples=24, seed=0, lr=0.5, epochs=500)
    assert rep.residual_rms <= 1e-6
    np.testing.assert_allclose(svd_oracle(rep.fitted), np.sort(plan.S_prime)[::-1], atol=1e-5)


def test_fit_objective_non_increasing():
    rep = fit_parameters(dense_plan(1), samples=24, seed=1, lr=0.05, epochs=200)
    h = rep.history
    assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))


def test_unchanged_spectrum_keeps_source():
    plan = dense_plan(edit=lambda s: s)
    rep = fit_parameters(plan, samples=12, seed=0)
    assert rep.residual_rms <= 1e-8
    np.testing.assert_allclose(rep.fitted.weight, plan.source.weight, atol=1e-8)


def one_by_one_plan():
    op = ConvSpec(np.full((1, 1, 1, 1), 2.0), (1, 1, 2))
    return SpectrumEditPlan(op, [2.0, 2.0], np.eye(2), [2.0, 1.0])


def test_one_by_one_conv_has_floor():
    plan = one_by_one_plan()
    floor = identity_projection_floor(plan)
    assert floor == pytest.approx(np.sqrt(0.5))
    rep = fit_parameters(plan, samples=4096, seed=0, lr=0.1, epochs=300)
    assert rep.fitted.kernel.item() == pytest.approx(1.5, abs=0.03)
    assert rep.residual_rms >= 0.9 * floor


def test_divergence_backs_off():
    rep = fit_parameters(one_by_one_plan(), samples=64, seed=0, lr=50.0, epochs=50)
    assert rep.lr < 50.0 and not rep.diverged


def test_divergence_flagged_when_backoff_exhausted():
    rep = fit_parameters(one_by_one_plan(), samples=64, seed=0, lr=1e4, epochs=50, max_backoffs=1)
    assert rep.diverged and rep.residual_rms == float("inf")


def test_fit_reports_iterations():
    rep = fit_parameters(dense_plan(), samples=24, seed=0, lr=0.1, epochs=17)
    assert rep.iterations == 17 and len(rep.history) == 18


def test_low_rank_edit_leaves_complement():
    rng = make_rng(3)
    op = DenseSpec(rng.standard_normal((5, 5)))
    est = power_qr(op, PowerQRConfig(k=2, iterations=3000))
    plan = make_plan(op, est, est.sigmas * 0.5)
    T = np.stack([target_action(plan, e) for e in np.eye(5)], axis=1)
    s = svd_oracle(op)
    expected = np.sort(np.concatenate([0.5 * s[:2], s[2:]]))[::-1]
    np.testing.assert_allclose(np.linalg.svd(T, compute_uv=False), expected, atol=1e-8)
    assert materialize(op).shape == T.shape
