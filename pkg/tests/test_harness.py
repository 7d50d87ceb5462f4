import json

import numpy as np
import pytest

from specclip.clipping import FastClipConfig, fast_clip_run
from specclip.harness import (
    FIG1_SETTINGS,
    TrainConfig,
    bn_sigma,
    concat_operators,
    fig1_operator,
    make_trainer,
    run_fig1_reproduction,
    run_setting,
    tracking_errors,
    write_reports,
)
from specclip.linops import DenseSpec, apply_batch, params, with_params
from specclip.spectral import make_rng, svd_oracle


def test_frozen_trainer_bit_identical():
    op = fig1_operator("k3_reflect", 0, sigma=0.7)
    out, rows = fast_clip_run(op, make_trainer(TrainConfig("frozen", 50)), FastClipConfig(probe_every=0), 50)
    assert np.array_equal(out.kernel, op.kernel)
    assert not any(r.clip_event for r in rows)


def test_least_squares_at_optimum_is_fixed():
    teacher = fig1_operator("k3_zeros_same", 1)
    ps, loss = make_trainer(TrainConfig("least_squares", 10, lr=0.1), teacher)(teacher, 1)
    assert loss == 0.0
    np.testing.assert_array_equal(ps[0], teacher.kernel)


def test_least_squares_gradient_matches_finite_difference():
    rng = make_rng(5)
    student = DenseSpec(rng.standard_normal((3, 4)), rng.standard_normal(3))
    teacher = DenseSpec(rng.standard_normal((3, 4)), rng.standard_normal(3))
    cfg = TrainConfig("least_squares", 10, lr=1.0, batch=5, seed=2)
    new, loss = make_trainer(cfg, teacher)(student, 4)
    grad = (params(student)[0] - new[0]) / cfg.lr

    x = make_rng(cfg.seed, 1, 4).standard_normal((cfg.batch, 4))
    y = apply_batch(teacher, x)

    def f(W):
        r = apply_batch(with_params(student, [W]), x) - y
        return 0.5 * np.sum(r * r) / cfg.batch

    W, h = student.weight, 1e-6
    fd = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        E = np.zeros_like(W)
        E[idx] = h
        fd[idx] = (f(W + E) - f(W - E)) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)
    assert loss == pytest.approx(f(W))


def test_below_target_never_clips():
    op = fig1_operator("k3_zeros_stride2", 0, sigma=0.5)
    rep = run_setting("low", op, make_trainer(TrainConfig("frozen", 300)), FastClipConfig(probe_every=100), 300)
    assert rep.clip_events == 0 and rep.sigma_final == pytest.approx(0.5)


@pytest.mark.xfail(strict=True, reason="a single rank-one pass overshoots on 1-channel conv layers")
def test_frozen_single_clip_lands_on_target():
    op = fig1_operator("k3_reflect", 0, sigma=1.5)
    out, _ = fast_clip_run(op, make_trainer(TrainConfig("frozen", 100)), FastClipConfig(probe_every=0), 100)
    assert 0.99 <= svd_oracle(out)[0] <= 1.01


def test_fig1_operator_settings():
    for name, (k, pad, stride, amount) in FIG1_SETTINGS.items():
        op = fig1_operator(name, 3, sigma=2.0)
        assert op.kernel.shape == (1, 1, k, k) and op.padding == pad
        assert svd_oracle(op)[0] == pytest.approx(2.0)


def test_reproduction_is_deterministic(tmp_path):
    kw = dict(seed=4, steps=200, settings=["k3_zeros_same"], probe_every=100)
    a = run_fig1_reproduction(**kw)
    b = run_fig1_reproduction(**kw)
    fa, fb = a["k3_zeros_same"]["fastclip"], b["k3_zeros_same"]["fastclip"]
    assert fa.sigma_final == fb.sigma_final
    assert [r.sigma_tracked for r in fa.rows] == [r.sigma_tracked for r in fb.rows]
    assert a["k3_zeros_same"]["scale"].ratio_spread <= 1e-6

    path = write_reports(a, tmp_path, timing=False)
    summary = json.loads(path.read_text())
    assert {s["method"] for s in summary} == {"fastclip", "scale"}
    assert all(s["wall_ms"] == 0 for s in summary)
    assert (tmp_path / "k3_zeros_same.fastclip.csv").exists()


def test_tracking_errors_skip_early_rows():
    op = fig1_operator("k3_reflect", 2, sigma=0.8)
    _, rows = fast_clip_run(op, make_trainer(TrainConfig("frozen", 300)), FastClipConfig(probe_every=100), 300)
    errs = tracking_errors(rows)
    assert [s for s, _ in errs] == [200, 300]
    # frozen weights: warm-started tracking can only get closer
    assert errs[1][1] <= errs[0][1]


def test_concat_operators_shape_bn_above_one():
    conv, bn = concat_operators(0)
    assert svd_oracle(conv)[0] == pytest.approx(1.0)
    assert bn_sigma(bn) > 1
    assert bn_sigma(bn) == pytest.approx(svd_oracle(bn.__class__(bn.gamma, bn.beta, bn.running_mean,
                                                                 bn.running_var, bn.epsilon,
                                                                 conv.out_shape))[0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig("sgd")
    with pytest.raises(ValueError):
        make_trainer(TrainConfig("least_squares"))
