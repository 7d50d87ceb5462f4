"""Rewriting an operator's spectrum and refitting it in its own parameters.

Given extracted ``(S, V)`` and desired values ``S'``, the edited operator
acts as ``x -> f_W(V S^-1 S' V^T x) - f_W(0)`` on the top-``k`` subspace and
leaves the orthogonal complement alone. :func:`fit_parameters` then looks
for parameters of the original form reproducing that action by least
squares over random inputs. For dense layers this is exact; structured
layers such as convolutions generally cannot realize arbitrary spectra, and
the fit stalls at a positive residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linops import (
    _as_batch,
    apply_batch,
    input_dim,
    params,
    weight_grad,
    with_params,
)
from .spectral import make_rng

__all__ = [
    "SpectrumEditPlan",
    "FitReport",
    "make_plan",
    "target_action",
    "fit_parameters",
    "identity_projection_floor",
]


@dataclass(frozen=True, eq=False)
class SpectrumEditPlan:
    source: object
    S: np.ndarray
    V: np.ndarray
    S_prime: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64).ravel()
        Sp = np.asarray(self.S_prime, dtype=np.float64).ravel()
        V = np.asarray(self.V, dtype=np.float64)
        if S.shape != Sp.shape:
            raise ValueError(f"S has {S.size} values, S_prime {Sp.size}")
        if V.shape != (input_dim(self.source), S.size):
            raise ValueError(f"V must be ({input_dim(self.source)}, {S.size}), got {V.shape}")
        if np.any((S == 0) & (Sp != S)):
            raise ValueError("cannot rescale a zero singular value")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "S_prime", Sp)
        object.__setattr__(self, "V", V)

    @property
    def ratio(self) -> np.ndarray:
        """``S' / S``, with 1 wherever the value is unchanged."""
        same = self.S_prime == self.S
        return np.where(same, 1.0, self.S_prime / np.where(same, 1.0, self.S))


def make_plan(op, estimate, S_prime) -> SpectrumEditPlan:
    """Plan from a :class:`~specclip.spectral.SpectrumEstimate`."""
    return SpectrumEditPlan(op, estimate.sigmas, estimate.V, S_prime)


def _edit_inputs(plan, X):
    Xf = X.reshape(X.shape[0], -1)
    Z = Xf + ((Xf @ plan.V) * (plan.ratio - 1.0)) @ plan.V.T
    return Z.reshape(X.shape)


def target_action(plan: SpectrumEditPlan, x) -> np.ndarray:
    """``f_W(V S^-1 S' V^T x) - f_W(0)`` for one input or a batch."""
    op = plan.source
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(op.in_shape) or (x.ndim == 1 and x.size == input_dim(op))
    X = _as_batch(op, x.reshape((1,) + tuple(op.in_shape)) if single else x, op.in_shape, "target_action")
    out = apply_batch(op, _edit_inputs(plan, X)) - apply_batch(op, np.zeros((1,) + tuple(op.in_shape)))
    return out[0] if single else out


@dataclass
class FitReport:
    fitted: object
    residual_rms: float
    iterations: int
    lr: float = 0.0
    diverged: bool = False
    history: list = field(default_factory=list, repr=False)


def fit_parameters(plan: SpectrumEditPlan, samples: int, seed: int = 0, lr: float = 1e-2,
                   epochs: int = 500, max_backoffs: int = 3, heldout: int | None = None) -> FitReport:
    """Full-batch gradient descent on ``mean 0.5 ||f_W'(x) - f_W(V S^-1 S' V^T x)||^2``.

    Starts from the source parameters, over ``samples`` standard normal
    inputs. If the objective grows past 10x its starting value the run is
    restarted with ``lr / 10``, at most ``max_backoffs`` times; after that
    the last attempt is returned with ``diverged=True``. ``residual_rms`` is
    ``sqrt(mean ||r||^2)`` over a separate held-out set of
    ``max(n, 64)`` inputs. ``history`` holds the objective before each epoch
    and after the last.
    """
    op = plan.source
    if samples < 1 or epochs < 0:
        raise ValueError("samples must be >= 1 and epochs >= 0")
    shape = (samples,) + tuple(op.in_shape)
    X = make_rng(seed, 0).standard_normal(shape)
    T = apply_batch(op, _edit_inputs(plan, X))

    def objective(cand):
        R = apply_batch(cand, X) - T
        return R, 0.5 * float(np.sum(R * R)) / samples

    diverged = False
    for attempt in range(max_backoffs + 1):
        cur = op
        R, obj = objective(cur)
        start = obj
        history = [obj]
        diverged = False
        it = 0
        for it in range(1, epochs + 1):
            if obj == 0.0:
                it -= 1
                break
            g = weight_grad(cur, X, R)
            cur = with_params(cur, [p - (lr / samples) * d for p, d in zip(params(cur), g)])
            R, obj = objective(cur)
            history.append(obj)
            if not np.isfinite(obj) or obj > 10.0 * start:
                diverged = True
                break
        if not diverged or attempt == max_backoffs:
            break
        lr /= 10.0

    n_held = heldout if heldout is not None else max(input_dim(op), 64)
    Xh = make_rng(seed, 1).standard_normal((n_held,) + tuple(op.in_shape))
    if diverged:
        rms = float("inf")
    else:
        Rh = apply_batch(cur, Xh) - apply_batch(op, _edit_inputs(plan, Xh))
        rms = float(np.sqrt(np.sum(Rh * Rh) / n_held))
    return FitReport(cur, rms, it, lr, diverged, history)


def identity_projection_floor(plan: SpectrumEditPlan) -> float:
    """Smallest achievable residual RMS when the fitted map can only be
    ``a * I + const`` (e.g. a single-channel 1x1 convolution).

    For standard normal inputs the expected squared residual of the map
    ``a I`` against target matrix ``T`` is ``||a I - T||_F^2``, minimized
    at ``a = tr(T) / n``.
    """
    n = input_dim(plan.source)
    T = np.stack([target_action(plan, e).ravel() for e in np.eye(n)], axis=1)
    if T.shape[0] != n:
        raise ValueError("target must be square to compare with a scaled identity")
    a = np.trace(T) / n
    return float(np.linalg.norm(T - a * np.eye(n)))
