"""Desk-scale training loops for exercising FastClip.

A teacher-student least-squares task stands in for real training: the
student is an operator spec, targets come from a fixed teacher, and the
gradient is exact (``weight_grad`` on the batch residual). A random-walk
trainer and a frozen trainer cover the drift-only and no-update cases.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .clipping import (
    ClipConfig,
    FastClipConfig,
    MetricsRow,
    fast_clip_run,
    metrics_to_csv,
    scale_clip,
)
from .linops import (
    BatchNormSpec,
    CompositionSpec,
    ConvSpec,
    ShapeError,
    apply_batch,
    params,
    scale_params,
    weight_grad,
    with_params,
)
from .spectral import make_rng, svd_oracle

__all__ = [
    "TASKS",
    "TrainConfig",
    "make_trainer",
    "FIG1_SETTINGS",
    "fig1_operator",
    "SettingReport",
    "run_setting",
    "scale_clip_run",
    "run_fig1_reproduction",
    "tracking_errors",
    "ConcatReport",
    "bn_sigma",
    "concat_operators",
    "run_concat_experiment",
    "write_reports",
]

TASKS = ("least_squares", "random_walk", "frozen")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "least_squares"
    steps: int = 1000
    lr: float = 1e-2
    noise_scale: float = 0.0
    batch: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.task == "least_squares" and not self.lr > 0:
            raise ValueError("least_squares needs lr > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def make_trainer(cfg: TrainConfig, teacher=None):
    """Step callback ``trainer(op, step) -> (params, loss)``.

    least_squares
        Draws a standard normal batch, targets ``teacher(x)`` plus
        ``noise_scale`` noise, and takes one gradient step on the mean of
        ``0.5 ||f(x) - y||^2``. ``loss`` is that mean before the step.
    random_walk
        Adds ``noise_scale`` normal noise to every parameter.
    frozen
        Returns the parameters unchanged; ``loss`` is None.

    Every step's randomness comes from its own stream keyed on
    ``(seed, step)``, so runs are reproducible regardless of call order.
    """
    if cfg.task == "least_squares":
        if teacher is None:
            raise ValueError("least_squares needs a teacher operator")

        def trainer(op, step):
            if teacher.in_shape != op.in_shape or teacher.out_shape != op.out_shape:
                raise ShapeError(f"teacher maps {teacher.in_shape}->{teacher.out_shape}, "
                                 f"student {op.in_shape}->{op.out_shape}")
            rng = make_rng(cfg.seed, 1, step)
            x = rng.standard_normal((cfg.batch,) + tuple(op.in_shape))
            y = apply_batch(teacher, x)
            if cfg.noise_scale:
                y = y + cfg.noise_scale * rng.standard_normal(y.shape)
            r = apply_batch(op, x) - y
            loss = 0.5 * float(np.sum(r * r)) / cfg.batch
            g = weight_grad(op, x, r)
            return [p - (cfg.lr / cfg.batch) * d for p, d in zip(params(op), g)], loss

        return trainer
    if cfg.task == "random_walk":
        def trainer(op, step):
            rng = make_rng(cfg.seed, 2, step)
            return [p + cfg.noise_scale * rng.standard_normal(p.shape) for p in params(op)], None

        return trainer

    def trainer(op, step):
        return params(op), None

    return trainer


# (kernel size, padding, stride, pad amount) for the four reproduction layers
FIG1_SETTINGS = {
    "k3_reflect": (3, "reflect", 1, 1),
    "k3_zeros_same": (3, "zeros", 1, 1),
    "k3_zeros_stride2": (3, "zeros", 2, 1),
    "k5_replicate_stride2": (5, "replicate", 2, 2),
}


def fig1_operator(setting: str, seed: int, sigma: float | None = None, channels: int = 1,
                  size: int = 16) -> ConvSpec:
    """Random normal conv layer for one reproduction setting; rescaled so its top
    singular value is ``sigma`` when given."""
    k, pad, stride, amount = FIG1_SETTINGS[setting]
    kernel = make_rng(seed, 3, list(FIG1_SETTINGS).index(setting)).standard_normal((channels, channels, k, k))
    op = ConvSpec(kernel, (channels, size, size), stride=(stride, stride), padding=pad, pad_amount=amount)
    if sigma is not None:
        op = scale_params(op, sigma / svd_oracle(op)[0])
    return op


@dataclass
class SettingReport:
    setting: str
    sigma_initial: float
    sigma_final: float
    clip_events: int
    wall_ms: float
    rows: list = dataclasses.field(default_factory=list, repr=False)
    ratio_spread: Optional[float] = None

    def summary(self) -> dict:
        out = {"setting": self.setting, "sigma_final": self.sigma_final,
               "clip_events": self.clip_events, "wall_ms": self.wall_ms}
        if self.ratio_spread is not None:
            out["ratio_spread"] = self.ratio_spread
        return out


def run_setting(name: str, op, trainer, cfg: FastClipConfig, steps: int) -> SettingReport:
    """FastClip training on one operator, summarized by the oracle."""
    s0 = float(svd_oracle(op)[0])
    t0 = time.perf_counter_ns()
    op, rows = fast_clip_run(op, trainer, cfg, steps)
    wall = (time.perf_counter_ns() - t0) / 1e6
    return SettingReport(name, s0, float(svd_oracle(op)[0]), sum(r.clip_event for r in rows), wall, rows)


def _ratio_spread(before: np.ndarray, after: np.ndarray) -> float:
    keep = before > 1e-8 * before[0]
    ratio = after[keep] / before[keep]
    return float((ratio.max() - ratio.min()) / ratio.mean())


def scale_clip_run(name: str, op, trainer, target: float, steps: int, clip_every: int = 100,
                   P: int = 300, seed: int = 0) -> SettingReport:
    """Training with the whole-spectrum scaling baseline every ``clip_every``
    steps. ``ratio_spread`` is the worst relative spread, over scaling
    events, of the post/pre ratio of the full oracle spectrum."""
    s0 = float(svd_oracle(op)[0])
    t0 = time.perf_counter_ns()
    rows, events, spread = [], 0, 0.0
    for step in range(1, steps + 1):
        out = trainer(op, step)
        ps, loss = out if isinstance(out, tuple) else (out, None)
        op = with_params(op, ps)
        clipped = False
        if step % clip_every == 0:
            new = scale_clip(op, target, P=P, seed=seed * 1_000_003 + step)
            if new is not op:
                clipped = True
                events += 1
                spread = max(spread, _ratio_spread(svd_oracle(op), svd_oracle(new)))
                op = new
        rows.append(MetricsRow(step, float("nan"), None, loss, clipped, 0))
    wall = (time.perf_counter_ns() - t0) / 1e6
    return SettingReport(name, s0, float(svd_oracle(op)[0]), events, wall, rows, spread)


def run_fig1_reproduction(seed: int = 0, steps: int = 2000, target: float = 1.0,
                          trainer_task: str = "least_squares", lr: float = 1e-5,
                          student_sigma: float = 1.5, teacher_sigma: float = 1.5,
                          settings=None, with_scale: bool = True, probe_every: int = 100):
    """FastClip on each reproduction conv setting, plus the scaling baseline.

    Student and teacher are random 1-channel kernels on a 16x16 input, both
    rescaled to top singular value 1.5 by default so the layer starts above
    the target and training keeps it there. Returns ``{setting:
    {"fastclip": SettingReport, "scale": SettingReport}}``.
    """
    out = {}
    for name in settings or FIG1_SETTINGS:
        student = fig1_operator(name, seed, sigma=student_sigma * target)
        teacher = fig1_operator(name, seed + 1, sigma=teacher_sigma * target)
        tcfg = TrainConfig(trainer_task, steps, lr, 0.0, 8, seed)
        fcfg = FastClipConfig(target=target, seed=seed, probe_every=probe_every)
        entry = {"fastclip": run_setting(name, student, make_trainer(tcfg, teacher), fcfg, steps)}
        if with_scale:
            entry["scale"] = scale_clip_run(name, student, make_trainer(tcfg, teacher), target, steps,
                                            fcfg.clip_every, seed=seed)
        out[name] = entry
    return out


def tracking_errors(rows, after: int = 100) -> list[tuple[int, float]]:
    """``(step, |tracked - true| / true)`` at every probe row past ``after``."""
    return [(r.step, abs(r.sigma_tracked - r.sigma_true) / r.sigma_true)
            for r in rows if r.sigma_true is not None and r.step > after]


@dataclass
class ConcatReport:
    steps: list
    sigma_conv: list
    sigma_bn: list
    sigma_comp: list
    rows: list = dataclasses.field(default_factory=list, repr=False)
    conv: Optional[ConvSpec] = None
    bn: Optional[BatchNormSpec] = None

    @property
    def final(self) -> dict:
        return {"conv": self.sigma_conv[-1], "bn": self.sigma_bn[-1], "composition": self.sigma_comp[-1]}


def bn_sigma(bn: BatchNormSpec) -> float:
    return float(np.max(np.abs(bn.gamma) / np.sqrt(bn.running_var + bn.epsilon)))


def concat_operators(seed: int, channels: int = 2, size: int = 8, gamma_scale: float = 3.0):
    """Conv layer with top singular value 1 followed by a batch norm whose
    ``gamma`` is inflated to ``gamma_scale`` times a random positive draw."""
    rng = make_rng(seed, 4)
    conv = ConvSpec(rng.standard_normal((channels, channels, 3, 3)), (channels, size, size),
                    padding="zeros", pad_amount=1)
    conv = scale_params(conv, 1.0 / svd_oracle(conv)[0])
    bn = BatchNormSpec(gamma_scale * rng.uniform(0.8, 1.2, channels), rng.standard_normal(channels) * 0.1,
                       rng.standard_normal(channels) * 0.1, rng.uniform(0.5, 1.5, channels))
    return conv, bn


def run_concat_experiment(seed: int = 0, steps: int = 2000, target: float = 1.0,
                          concat_every: int = 500, concat_lam: float = 0.05, concat_inner: int = 50,
                          lr: float = 1e-4, teacher_conv_scale: float = 1.0,
                          gamma_scale: float = 3.0, probe_every: int = 100) -> ConcatReport:
    """FastClip on a conv + batch-norm pair in concat mode.

    The conv stage is clipped every 100 steps and the composition every
    ``concat_every`` steps with step size ``concat_lam``; the batch norm is
    never clipped on its own. A least-squares teacher of the same shape
    drives training. Oracle values of all three are recorded at every probe.
    """
    conv, bn = concat_operators(seed, gamma_scale=gamma_scale)
    tconv, tbn = concat_operators(seed + 1, gamma_scale=gamma_scale)
    comp = CompositionSpec((conv, bn))
    teacher = CompositionSpec((scale_params(tconv, teacher_conv_scale), tbn))
    trainer = make_trainer(TrainConfig("least_squares", steps, lr, 0.0, 8, seed), teacher)
    fcfg = FastClipConfig(target=target, seed=seed, probe_every=probe_every)
    ccfg = ClipConfig(target=target, lam=concat_lam, inner_n=concat_inner, seed=seed)
    report = ConcatReport([], [], [], [])

    def probe(step, op):
        c, b = op.stages
        report.steps.append(step)
        report.sigma_conv.append(float(svd_oracle(c)[0]))
        report.sigma_bn.append(bn_sigma(b))

    op, rows = fast_clip_run(comp, trainer, fcfg, steps, on_probe=probe,
                             concat_every=concat_every, concat_cfg=ccfg)
    report.sigma_comp = [r.sigma_true for r in rows if r.sigma_true is not None]
    # probes see the operator before that step's clips; replace the last
    # entry with the final state
    c, b = op.stages
    report.steps.append(steps)
    report.sigma_conv.append(float(svd_oracle(c)[0]))
    report.sigma_bn.append(bn_sigma(b))
    report.sigma_comp.append(float(svd_oracle(op)[0]))
    report.rows, report.conv, report.bn = rows, c, b
    return report


def write_reports(reports: dict, out_dir, timing: bool = True) -> Path:
    """One metrics CSV per run plus ``summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for name, entry in reports.items():
        for method, rep in entry.items():
            metrics_to_csv(rep.rows, out_dir / f"{name}.{method}.csv", timing=timing)
            s = rep.summary()
            s["method"] = method
            if not timing:
                s["wall_ms"] = 0
            summary.append(s)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=1))
    return path
