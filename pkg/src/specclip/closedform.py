"""Exact spectra of circular 1-D convolutions with one input or one output
channel, plus the padding-gap experiment for 2-D layers.

For ``m`` length-``k`` filters ``f^(l)`` on a length-``n`` signal the
singular values are::

    sigma_j = sqrt( sum_l [ c_0^(l) + 2 sum_{i>=1} c_i^(l) cos(2 pi j i / n) ] )

with autocorrelations ``c_i^(l) = sum_t f_t^(l) f_{t+i}^(l)``, ``j = 0..n-1``.
The formula applies to both 1-in/m-out and m-in/1-out layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linops import ConvSpec, InvariantError
from .spectral import PowerQRConfig, make_rng, power_qr

__all__ = [
    "ClosedFormResult",
    "BoundsResult",
    "GapStats",
    "autocorrelations",
    "closed_form_spectrum",
    "spectral_bounds",
    "duplicate_check",
    "padding_gap_experiment",
    "GAP_PADDINGS",
]


def _filters(filters) -> np.ndarray:
    f = np.asarray(filters, dtype=np.float64)
    if f.ndim == 1:
        f = f[None, :]
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise ValueError(f"filters must be m equal-length 1-D kernels, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("filters contain non-finite values")
    return f


@dataclass(frozen=True, eq=False)
class ClosedFormResult:
    """``sigmas[j]`` is the value for root ``omega^j``; use :meth:`sorted`
    for the descending multiset."""

    sigmas: np.ndarray
    per_channel_c: np.ndarray
    n: int

    def sorted(self) -> np.ndarray:
        return np.sort(self.sigmas)[::-1]

    def to_csv(self, path=None) -> str:
        text = "j,sigma\n" + "".join(f"{j},{s!r}\n" for j, s in enumerate(self.sigmas.tolist()))
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True)
class BoundsResult:
    lower: float
    upper: float


def autocorrelations(filters) -> np.ndarray:
    """``(m, k)`` array of ``c_i^(l)``, ``i = 0..k-1``."""
    f = _filters(filters)
    k = f.shape[1]
    return np.stack([np.array([f[l, : k - i] @ f[l, i:] for i in range(k)]) for l in range(f.shape[0])])


def closed_form_spectrum(filters, n: int) -> ClosedFormResult:
    f = _filters(filters)
    k = f.shape[1]
    if n < 1:
        raise ValueError("n must be >= 1")
    if k > n:
        raise InvariantError(f"filter length {k} exceeds n={n}")
    c = autocorrelations(f)
    total = c.sum(axis=0)
    j = np.arange(n)[:, None]
    i = np.arange(1, k)[None, :]
    sq = total[0] + 2.0 * (np.cos(2.0 * np.pi * ((j * i) % n) / n) @ total[1:])
    return ClosedFormResult(np.sqrt(np.maximum(sq, 0.0)), c, n)


def spectral_bounds(filters) -> BoundsResult:
    """Sandwich on the top singular value; both sides are equal to it when
    every filter entry is non-negative."""
    f = _filters(filters)
    return BoundsResult(float(np.sqrt(np.sum(f.sum(axis=1) ** 2))),
                        float(np.sqrt(np.sum(np.abs(f).sum(axis=1) ** 2))))


def duplicate_check(result: ClosedFormResult, tol: float | None = None) -> int:
    """Number of singular values with no partner within ``tol``.

    Values are grouped by chaining sorted neighbours closer than the
    tolerance (default ``1e-9 * (1 + sigma)``); singleton groups are counted.
    """
    s = np.sort(np.asarray(result.sigmas))
    if s.size == 0:
        return 0
    gaps = np.diff(s)
    limit = tol if tol is not None else 1e-9 * (1.0 + s[1:])
    joined = gaps <= limit
    count = 0
    for idx in range(s.size):
        left = idx > 0 and joined[idx - 1]
        right = idx < s.size - 1 and joined[idx]
        count += not (left or right)
    return count


GAP_PADDINGS = ("zeros", "reflect", "replicate")


@dataclass(frozen=True)
class GapStats:
    padding: str
    channels: int
    kernel: int
    mean_gap: float
    max_gap: float


def _top_sigma(op, iterations, seed):
    return power_qr(op, PowerQRConfig(k=1, iterations=iterations, seed=seed)).sigma1


def padding_gap_experiment(kernel_size: int, channels: int, n: int, trials: int, seed: int,
                           paddings=GAP_PADDINGS, iterations: int = 300, kernels=None) -> list[GapStats]:
    """How far the circular-padding top singular value is from the true one.

    For each trial a normal random ``(channels, channels, k, k)`` kernel is
    applied to a ``channels x n x n`` input with ``floor(k/2)`` padding and
    stride 1; the gap ``|sigma_1(circular) - sigma_1(p)|`` is measured with
    PowerQR for each padding ``p``. ``kernels`` overrides the random draws.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k = kernel_size
    pad = k // 2
    gaps = {p: [] for p in paddings}
    for t in range(trials):
        if kernels is not None:
            kern = np.asarray(kernels[t], dtype=np.float64)
        else:
            kern = make_rng(seed, k, channels, n, t).standard_normal((channels, channels, k, k))
        shape = (channels, n, n)
        # same starting vector for every padding so only the operator differs
        pseed = int(np.random.SeedSequence([seed, k, channels, n, t]).generate_state(1)[0])
        base = _top_sigma(ConvSpec(kern, shape, padding="circular", pad_amount=pad), iterations, pseed)
        for p in paddings:
            s = _top_sigma(ConvSpec(kern, shape, padding=p, pad_amount=pad), iterations, pseed)
            gaps[p].append(abs(base - s))
    return [GapStats(p, channels, k, float(np.mean(g)), float(np.max(g))) for p, g in gaps.items()]


def gap_stats_csv(stats, path=None) -> str:
    text = "padding,channels,kernel,mean_gap,max_gap\n" + "".join(
        f"{s.padding},{s.channels},{s.kernel},{s.mean_gap!r},{s.max_gap!r}\n" for s in stats)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
