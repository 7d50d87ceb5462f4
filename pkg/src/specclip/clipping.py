"""Clipping the spectral norm of implicit operators.

:func:`clip_top` shrinks singular values above a target one at a time with a
rank-one gradient step expressed in the operator's own parameters.
:func:`fast_clip_run` interleaves that with training steps, tracking the top
singular pair by one warm-started subspace iteration per step.
:func:`scale_clip` is the whole-spectrum scaling baseline and
:func:`bn_direct_clip` clips a batch-norm layer through its diagonal.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .linops import (
    BatchNormSpec,
    CompositionSpec,
    ConvSpec,
    ShapeError,
    apply,
    params,
    scale_params,
    weight_grad,
    with_params,
)
from .spectral import PowerQRConfig, SpectrumEstimate, power_qr, svd_oracle, track_step

__all__ = [
    "ClipConfig",
    "FastClipConfig",
    "ClipResult",
    "MetricsRow",
    "default_lambda",
    "rank_one_descent",
    "clip_top",
    "scale_clip",
    "bn_direct_clip",
    "concat_clip",
    "fast_clip_run",
    "METRICS_HEADER",
    "metrics_to_csv",
]


def default_lambda(op) -> float:
    """Step size used when :class:`ClipConfig` leaves ``lam`` unset.

    Weight sharing in convolutions raises the curvature of the clipping
    objective above one, and compositions are bilinear in their parameters,
    so both get smaller steps than dense or batch-norm layers.
    """
    if isinstance(op, CompositionSpec):
        return 0.05
    if isinstance(op, ConvSpec):
        return 0.5
    return 1.0


@dataclass(frozen=True)
class ClipConfig:
    target: float = 1.0
    lam: Optional[float] = None
    inner_n: int = 1
    probe_iters: int = 300
    probe_tol: float = 1e-10
    tol: float = 1e-3
    max_passes: int = 32
    mu: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.target > 0:
            raise ValueError("clip target must be positive")
        if self.lam is not None and not 0 < self.lam <= 1:
            raise ValueError("step size lam must lie in (0, 1]")
        if self.inner_n < 1 or self.probe_iters < 1 or self.max_passes < 1:
            raise ValueError("inner_n, probe_iters and max_passes must be >= 1")

    def step_size(self, op) -> float:
        return default_lambda(op) if self.lam is None else self.lam


@dataclass(frozen=True)
class FastClipConfig(ClipConfig):
    clip_every: int = 100
    track_per_step: int = 1
    warmstart_iters: int = 10
    clip_while_passes: int = 1
    clip_inner_N: int = 1
    fresh_probe_iters: int = 10
    probe_every: int = 100

    def __post_init__(self):
        super().__post_init__()
        if self.clip_every < 1:
            raise ValueError("clip_every must be >= 1")
        if self.track_per_step < 0 or self.warmstart_iters < 1:
            raise ValueError("track_per_step must be >= 0 and warmstart_iters >= 1")

    def clip_config(self, seed: int) -> ClipConfig:
        """Settings for one in-training clip event."""
        return ClipConfig(target=self.target, lam=self.lam, inner_n=self.clip_inner_N,
                          probe_iters=self.fresh_probe_iters, tol=self.tol,
                          max_passes=self.clip_while_passes, mu=self.mu, seed=seed)


class ClipResult(NamedTuple):
    op: object
    estimate: SpectrumEstimate
    passes: int
    converged: bool


@dataclass(frozen=True)
class MetricsRow:
    step: int
    sigma_tracked: float
    sigma_true: Optional[float] = None
    loss: Optional[float] = None
    clip_event: bool = False
    wall_ns: int = 0


METRICS_HEADER = "step,sigma_tracked,sigma_true,loss,clip_event,wall_ns"


def metrics_to_csv(rows, path=None, timing: bool = True) -> str:
    """Render rows as CSV (``wall_ns`` written as 0 when ``timing`` is off)."""
    def fmt(x):
        return "" if x is None else repr(float(x))

    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r.step},{fmt(r.sigma_tracked)},{fmt(r.sigma_true)},{fmt(r.loss)},"
                     f"{int(r.clip_event)},{r.wall_ns if timing else 0}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def rank_one_descent(op, v1, sigma1: float, target: float, lam: float, n_steps: int,
                     trace: bool = False):
    """Gradient steps on ``0.5 ||f_W'(v1) - f_W(target / sigma1 * v1)||^2``.

    ``f_W`` is ``op`` frozen at entry; ``W'`` starts at ``W``. For a dense
    layer one step with ``lam = 1`` replaces ``sigma1`` by ``target`` and
    leaves the rest of the spectrum alone.

    A step that raises the objective is rejected and retried with half the
    step size; the reduced size is kept for later steps. Weight sharing can
    push the curvature well past ``1 / lam`` (about 5 for a 3x3 kernel), and
    without this the iteration diverges.

    Returns ``(op, lam_used)``, plus the objective before each step and after
    the last when ``trace`` is set.
    """
    goal = apply(op, (target / sigma1) * v1)
    cur = op
    r = apply(cur, v1) - goal
    obj = 0.5 * float(np.vdot(r, r))
    values = [obj]
    for _ in range(n_steps):
        if obj == 0.0:
            break
        g = weight_grad(cur, v1, r)
        base = params(cur)
        for _ in range(60):
            cand = with_params(cur, [p - lam * d for p, d in zip(base, g)])
            r_new = apply(cand, v1) - goal
            obj_new = 0.5 * float(np.vdot(r_new, r_new))
            if obj_new <= obj:
                break
            lam *= 0.5
        else:
            break
        cur, r, obj = cand, r_new, obj_new
        values.append(obj)
    if trace:
        return cur, lam, values
    return cur, lam


def _probe(op, cfg: ClipConfig, key: int) -> SpectrumEstimate:
    return power_qr(op, PowerQRConfig(k=1, iterations=cfg.probe_iters, mu=cfg.mu, tol=cfg.probe_tol,
                                      seed=int(np.random.SeedSequence([cfg.seed, key]).generate_state(1)[0])))


def clip_top(op, cfg: ClipConfig, warm: SpectrumEstimate | None = None) -> ClipResult:
    """Clip every singular value of ``op`` above ``cfg.target``.

    Starting from ``warm`` (or a fresh probe), while the top singular value
    exceeds ``target * (1 + tol)``: run ``inner_n`` rank-one descent steps on
    it, then re-estimate the top pair from a new random vector with
    ``probe_iters`` PowerQR iterations. Values already at or below the target
    are never touched. Stops after ``max_passes``; ``converged`` says whether
    the final estimate is within tolerance.
    """
    if not params(op):
        raise ValueError("operator has no trainable parameters")
    est = warm if warm is not None else _probe(op, cfg, 0)
    c = cfg.target
    lam = cfg.step_size(op)
    passes = 0
    while est.sigma1 > c * (1 + cfg.tol) and passes < cfg.max_passes:
        op, lam = rank_one_descent(op, est.v1, est.sigma1, c, lam, cfg.inner_n)
        passes += 1
        est = _probe(op, cfg, passes)
    return ClipResult(op, est, passes, est.sigma1 <= c * (1 + cfg.tol))


def scale_clip(op, c: float, P: int = 300, seed: int = 0, mu: float = 1.0):
    """Divide the whole spectrum by ``sigma_1 / c`` when ``sigma_1 > c``."""
    if not c > 0:
        raise ValueError("clip target must be positive")
    est = power_qr(op, PowerQRConfig(k=1, iterations=P, mu=mu, seed=seed))
    if est.sigma1 > c:
        return scale_params(op, c / est.sigma1)
    return op


def bn_direct_clip(bn: BatchNormSpec, c: float) -> BatchNormSpec:
    """Rescale each ``gamma_i`` whose ``|gamma_i| / sqrt(var_i + eps)`` exceeds ``c``."""
    if not c > 0:
        raise ValueError("clip target must be positive")
    denom = np.sqrt(bn.running_var + bn.epsilon)
    over = np.abs(bn.gamma) / denom > c
    if not over.any():
        return bn
    gamma = np.where(over, np.sign(bn.gamma) * c * denom, bn.gamma)
    return dataclasses.replace(bn, gamma=gamma)


def concat_clip(conv, bn: BatchNormSpec, cfg: ClipConfig, warm: SpectrumEstimate | None = None):
    """Clip the composition ``bn(conv(x))`` as one operator.

    The rank-one steps update the kernel and ``gamma`` together through the
    chain rule. Returns ``(conv, bn, ClipResult)``; both specs come back as
    the same objects when nothing needed clipping.
    """
    comp = CompositionSpec((conv, bn))
    res = clip_top(comp, cfg, warm)
    if res.passes == 0:
        return conv, bn, res
    new_conv, new_bn = res.op.stages
    return new_conv, dataclasses.replace(new_bn, input_shape=bn.input_shape), res


Trainer = Callable[[object, int], tuple]


def _train_step(op, trainer, step):
    out = trainer(op, step)
    ps, loss = out if isinstance(out, tuple) else (out, None)
    try:
        return with_params(op, ps), loss
    except (ShapeError, ValueError) as exc:
        raise ShapeError(f"trainer returned incompatible parameters at step {step}: {exc}") from exc


def fast_clip_run(op, trainer: Trainer, cfg: FastClipConfig, steps: int,
                  on_probe: Callable[[int, object], None] | None = None,
                  concat_every: int | None = None, concat_cfg: ClipConfig | None = None):
    """Train with periodic clipping of the top singular value.

    Per step: apply the trainer update, run ``track_per_step`` warm-started
    PowerQR iterations on the tracked pair, record a :class:`MetricsRow`
    and, every ``clip_every`` steps, run :func:`clip_top` seeded with the
    tracked pair (``clip_while_passes`` passes, ``clip_inner_N`` inner steps,
    ``fresh_probe_iters`` iterations for the re-probe). Rows describe the
    operator before that step's clip. Every ``probe_every`` steps the row
    also carries the oracle ``sigma_true`` and ``on_probe(step, op)`` is
    called.

    ``trainer(op, step)`` returns the new parameter list, optionally paired
    with a loss value.

    Concat mode (``concat_every`` set, ``op`` a two-stage conv/batch-norm
    composition): the conv stage is the one clipped every ``clip_every``
    steps, and the whole composition is clipped every ``concat_every`` steps
    with ``concat_cfg``. Rows then track the composition.

    Returns ``(op, rows)``.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    concat = concat_every is not None
    if concat and not (isinstance(op, CompositionSpec) and len(op.stages) == 2):
        raise ValueError("concat mode needs a two-stage composition")
    concat_cfg = concat_cfg or ClipConfig(target=cfg.target, max_passes=1, probe_iters=cfg.fresh_probe_iters)

    def warm(target_op, key):
        return power_qr(target_op, PowerQRConfig(k=1, iterations=cfg.warmstart_iters, mu=cfg.mu,
                                                 seed=int(np.random.SeedSequence([cfg.seed, 7, key]).generate_state(1)[0])))

    est = warm(op.stages[0] if concat else op, 0)
    est_comp = warm(op, 1) if concat else None
    rows = []
    for step in range(1, steps + 1):
        t0 = time.perf_counter_ns()
        op, loss = _train_step(op, trainer, step)
        main = op.stages[0] if concat else op
        for _ in range(cfg.track_per_step):
            est = track_step(main, est, cfg.mu)
            if concat:
                est_comp = track_step(op, est_comp, cfg.mu)
        watched = est_comp if concat else est
        wall = time.perf_counter_ns() - t0

        sigma_true = None
        if cfg.probe_every and step % cfg.probe_every == 0:
            sigma_true = float(svd_oracle(op)[0])
            if on_probe is not None:
                on_probe(step, op)

        t1 = time.perf_counter_ns()
        clipped = False
        # composition first, so the conv stage ends each step freshly clipped
        if concat and step % concat_every == 0:
            ccfg = dataclasses.replace(concat_cfg, seed=concat_cfg.seed * 1_000_003 + step)
            res = clip_top(op, ccfg, warm=est_comp)
            if res.passes:
                clipped = True
                op = res.op
                est_comp = res.estimate
                est = track_step(op.stages[0], est, cfg.mu)
        if step % cfg.clip_every == 0:
            main = op.stages[0] if concat else op
            res = clip_top(main, cfg.clip_config(seed=cfg.seed * 1_000_003 + step), warm=est)
            if res.passes:
                clipped = True
                est = res.estimate
                op = CompositionSpec((res.op, op.stages[1])) if concat else res.op
                if concat:
                    est_comp = track_step(op, est_comp, cfg.mu)
        rows.append(MetricsRow(step, float(watched.sigma1), sigma_true, loss, clipped,
                               wall + time.perf_counter_ns() - t1))
    return op, rows
