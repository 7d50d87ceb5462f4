"""Top-k singular values of implicit operators.

:func:`power_qr` runs shifted subspace iteration on ``M^T M + mu I`` using
only :func:`~specclip.linops.gram_apply`. :func:`track_step` is a single
warm-started iteration for following a slowly changing operator, and
:func:`deflated_power_baseline` extracts the same values one vector at a time.
:func:`svd_oracle` is the brute-force reference used by the tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ._linalg import householder_qr, jacobi_singular_values
from .linops import DimensionCapError, gram_apply, input_dim, linear_batch, materialize

__all__ = [
    "RankDeficientError",
    "SpectrumEstimate",
    "PowerQRConfig",
    "make_rng",
    "random_probe",
    "power_qr",
    "track_step",
    "deflated_power_baseline",
    "rayleigh_sigmas",
    "ritz_values",
    "svd_oracle",
    "ORACLE_CAP",
]

ORACLE_CAP = 2048


class RankDeficientError(ValueError):
    """Starting block for subspace iteration does not have full column rank."""


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    """Top-k singular values (descending) with right singular vectors as the
    columns of ``V``."""

    sigmas: np.ndarray
    V: np.ndarray
    iterations_used: int
    converged: bool = True
    wall_ns: int = 0

    @property
    def k(self) -> int:
        return len(self.sigmas)

    @property
    def sigma1(self) -> float:
        return float(self.sigmas[0])

    @property
    def v1(self) -> np.ndarray:
        return self.V[:, 0]


@dataclass(frozen=True)
class PowerQRConfig:
    k: int = 1
    iterations: int = 300
    mu: float = 1.0
    seed: int = 0
    tol: float = 1e-10
    check_every: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mu < 0:
            raise ValueError("shift mu must be non-negative")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional key path.

    Distinct key paths give independent streams, so results never depend on
    the order in which streams are created.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=keys)))


def random_probe(n: int, k: int, seed: int, *keys: int) -> np.ndarray:
    return make_rng(seed, *keys).standard_normal((n, k))


def _sigmas_from_r(R, mu):
    return np.sqrt(np.maximum(np.diag(R) - mu, 0.0))


def _sorted(sig, V):
    order = np.argsort(-sig, kind="stable")
    return sig[order], V[:, order]


def rayleigh_sigmas(op, V: np.ndarray) -> np.ndarray:
    """``||f(v_i) - f(0)||`` for each column of ``V``."""
    F = linear_batch(op, V.T)
    return np.linalg.norm(F.reshape(V.shape[1], -1), axis=1)


def ritz_values(op, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ritz singular values and vectors of ``op`` on the span of ``X``
    (orthonormal columns)."""
    F = linear_batch(op, X.T).reshape(X.shape[1], -1)
    _, s, Wt = np.linalg.svd(F.T, full_matrices=False)
    return s, X @ Wt.T


def power_qr(op, config: PowerQRConfig | None = None, X0: np.ndarray | None = None,
             estimator: str = "r", callback=None) -> SpectrumEstimate:
    """Shifted subspace iteration through the Gram operator.

    Each iteration forms ``X <- mu X + M^T M X`` and re-orthonormalizes with a
    Householder QR whose ``R`` has a non-negative diagonal. Singular values
    are read off as ``sqrt(max(R_ii - mu, 0))`` (``estimator="r"``, the
    default), as the Rayleigh norms ``||M v_i||`` (``"rayleigh"``), or from a
    final Rayleigh-Ritz projection onto the block (``"ritz"``). The Ritz
    readout is immune to mixing between close values inside the block; all
    three share the same limit.

    The loop stops early when, checked every ``config.check_every``
    iterations, no singular value moved by more than ``config.tol * sigma_1``.

    Parameters
    ----------
    op
        Any operator spec.
    config
        Block size, iteration budget, shift and seed.
    X0
        Optional ``(n, k)`` starting block; random normal from ``config.seed``
        otherwise.
    callback
        Called as ``callback(iteration, Q)`` after each QR.
    """
    config = config or PowerQRConfig()
    n, k, mu = input_dim(op), config.k, config.mu
    if k > n:
        raise ValueError(f"k={k} exceeds operator input dimension {n}")
    X = random_probe(n, k, config.seed) if X0 is None else np.array(X0, dtype=np.float64)
    if X.shape != (n, k):
        raise ValueError(f"X0 must have shape ({n}, {k}), got {X.shape}")
    _, R0 = householder_qr(X)
    d0 = np.abs(np.diag(R0))
    if d0.min() <= 1e-12 * max(d0.max(), 1e-300):
        raise RankDeficientError(f"X0 is rank deficient (|R_ii| ranges {d0.min():.3g}..{d0.max():.3g})")

    t0 = time.perf_counter_ns()
    prev = None
    converged = False
    it = 0
    for it in range(1, config.iterations + 1):
        X = mu * X + gram_apply(op, X)
        X, R = householder_qr(X)
        if callback is not None:
            callback(it, X)
        if it % config.check_every == 0:
            sig = _sigmas_from_r(R, mu)
            if prev is not None and np.max(np.abs(sig - prev)) <= config.tol * max(sig.max(), 1e-300):
                converged = True
                break
            prev = sig
    wall = time.perf_counter_ns() - t0
    if estimator == "r":
        sig = _sigmas_from_r(R, mu)
    elif estimator == "rayleigh":
        sig = rayleigh_sigmas(op, X)
    elif estimator == "ritz":
        sig, X = ritz_values(op, X)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    sig, V = _sorted(sig, X)
    return SpectrumEstimate(sig, V, it, converged, wall)


def track_step(op, prev: SpectrumEstimate, mu: float = 1.0) -> SpectrumEstimate:
    """One shifted subspace iteration started from ``prev.V``."""
    n = input_dim(op)
    if prev.V.shape[0] != n:
        raise ValueError(f"previous estimate has {prev.V.shape[0]} rows, operator takes {n}")
    t0 = time.perf_counter_ns()
    X = mu * prev.V + gram_apply(op, prev.V)
    Q, R = householder_qr(X)
    sig, V = _sorted(_sigmas_from_r(R, mu), Q)
    return SpectrumEstimate(sig, V, 1, True, time.perf_counter_ns() - t0)


def deflated_power_baseline(op, k: int, iters_per_vector: int = 300, seed: int = 0,
                            tol: float = 1e-10) -> SpectrumEstimate:
    """``k`` successive power-method runs on ``M^T M`` with deflation.

    Each run re-orthogonalizes its iterate against the vectors already found.
    A run stops when the Rayleigh quotient changes by at most ``tol``
    (relative); ``converged`` is False if any run exhausted its budget.
    """
    n = input_dim(op)
    if k > n:
        raise ValueError(f"k={k} exceeds operator input dimension {n}")
    t0 = time.perf_counter_ns()
    found = np.zeros((n, 0))
    lams = []
    all_ok = True
    total = 0
    for i in range(k):
        v = make_rng(seed, i).standard_normal(n)
        v -= found @ (found.T @ v)
        v /= np.linalg.norm(v)
        lam_prev = None
        ok = False
        lam = 0.0
        for _ in range(iters_per_vector):
            total += 1
            w = gram_apply(op, v[:, None])[:, 0]
            w -= found @ (found.T @ w)
            lam = float(v @ w)
            nrm = np.linalg.norm(w)
            if nrm == 0.0:
                ok = True
                break
            v = w / nrm
            if lam_prev is not None and abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
                ok = True
                break
            lam_prev = lam
        all_ok &= ok
        v -= found @ (found.T @ v)
        v /= np.linalg.norm(v)
        found = np.column_stack([found, v])
        lams.append(lam)
    sig, V = _sorted(np.sqrt(np.maximum(np.array(lams), 0.0)), found)
    return SpectrumEstimate(sig, V, total, all_ok, time.perf_counter_ns() - t0)


def svd_oracle(op, cap: int = ORACLE_CAP) -> np.ndarray:
    """Every singular value of ``op`` (descending), from its materialized
    matrix by cyclic Jacobi."""
    n = input_dim(op)
    if n > cap:
        raise DimensionCapError(f"input dimension {n} exceeds oracle cap {cap}")
    sig, _ = jacobi_singular_values(materialize(op, cap=cap))
    return sig
