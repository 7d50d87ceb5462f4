"""Implicitly linear operators.

Every operator computes an affine map ``f(x) = M x + b`` where ``M`` is never
stored. Each spec type knows how to run the linear part on a batch, run its
adjoint, report the constant offset ``f(0)`` and pull an output residual back
to its trainable parameters. The module-level functions (:func:`apply`,
:func:`adjoint_apply`, :func:`gram_apply`, ...) are the public surface; they
dispatch to those methods.

Arrays are float64 numpy arrays throughout. Batched internals use a leading
batch axis, i.e. shape ``(B, *in_shape)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

__all__ = [
    "PADDING_MODES",
    "ShapeError",
    "InvariantError",
    "DimensionCapError",
    "DenseSpec",
    "ConvSpec",
    "BatchNormSpec",
    "CompositionSpec",
    "OperatorSpec",
    "conv1d",
    "circular_conv1d",
    "apply",
    "adjoint_apply",
    "apply_batch",
    "linear_batch",
    "adjoint_batch",
    "gram_apply",
    "weight_grad",
    "materialize",
    "scale_params",
    "params",
    "with_params",
    "input_dim",
    "output_dim",
]

PADDING_MODES = ("zeros", "circular", "reflect", "replicate")
DEFAULT_MATERIALIZE_CAP = 4096


class ShapeError(ValueError):
    """Input or parameter shapes do not match the operator."""


class InvariantError(ValueError):
    """An operator description violates one of its invariants."""


class DimensionCapError(ValueError):
    """Refusing to build a dense matrix above the configured size cap."""


def _frozen_array(a, shape=None, name="array") -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{name}: expected {tuple(shape)}, got {arr.shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _pad_index(size: int, before: int, after: int, mode: str) -> np.ndarray:
    """Source index for every position of a 1-D padded signal, -1 for zeros."""
    if mode == "circular" and (before > size or after > size):
        raise InvariantError(f"circular padding {before, after} exceeds extent {size}")
    if mode == "reflect" and (before >= size or after >= size) and (before or after):
        raise InvariantError(f"reflect padding {before, after} needs pad < extent {size}")
    i = np.arange(-before, size + after)
    if mode == "zeros":
        return np.where((i >= 0) & (i < size), i, -1)
    if mode == "circular":
        return i % size
    if mode == "reflect":
        return np.where(i < 0, -i, np.where(i >= size, 2 * (size - 1) - i, i))
    return np.clip(i, 0, size - 1)


def _pad_axis(X, src, axis):
    out = np.take(X, np.maximum(src, 0), axis=axis)
    if np.any(src < 0):
        idx = [slice(None)] * X.ndim
        idx[axis] = src < 0
        out[tuple(idx)] = 0.0
    return out


def _unpad_axis(G, src, before, size, axis):
    """Adjoint of :func:`_pad_axis`: the interior plus scatter-added borders."""
    idx = [slice(None)] * G.ndim
    idx[axis] = slice(before, before + size)
    out = G[tuple(idx)].copy()
    for q in np.flatnonzero((np.arange(src.size) < before) | (np.arange(src.size) >= before + size)):
        if src[q] >= 0:
            dst = [slice(None)] * G.ndim
            dst[axis], idx[axis] = src[q], q
            out[tuple(dst)] += G[tuple(idx)]
    return out


@dataclass(frozen=True, eq=False)
class DenseSpec:
    """Dense layer ``f(x) = W x + b`` with ``W`` of shape (m, n)."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise InvariantError(f"dense weight must be rank 2, got shape {w.shape}")
        object.__setattr__(self, "weight", _frozen_array(w, name="weight"))
        b = np.zeros(w.shape[0]) if self.bias is None else self.bias
        object.__setattr__(self, "bias", _frozen_array(b, (w.shape[0],), "bias"))

    @property
    def in_shape(self) -> tuple:
        return (self.weight.shape[1],)

    @property
    def out_shape(self) -> tuple:
        return (self.weight.shape[0],)

    def forward(self, X):
        return X @ self.weight.T

    def adjoint(self, Y):
        return Y @ self.weight

    def offset(self):
        return np.array(self.bias)

    def param_grad(self, X, R):
        return [R.T @ X]

    def params(self):
        return [self.weight]

    def with_params(self, ps):
        (w,) = ps
        return dataclasses.replace(self, weight=_frozen_array(w, self.weight.shape, "weight"))


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Strided, padded 2-D cross-correlation (PyTorch ``Conv2d`` semantics).

    ``pad_amount`` is either ``(p_h, p_w)`` (symmetric) or
    ``(top, bottom, left, right)``. A 1-D convolution is the ``h == 1``,
    ``k_h == 1`` special case with ``dims=1``.
    """

    kernel: np.ndarray
    input_shape: tuple
    bias: np.ndarray | None = None
    stride: tuple = (1, 1)
    padding: str = "zeros"
    pad_amount: tuple = (0, 0, 0, 0)
    dims: int = 2

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 4:
            raise InvariantError(f"conv kernel must be rank 4, got shape {k.shape}")
        c_out, c_in, kh, kw = k.shape
        object.__setattr__(self, "kernel", _frozen_array(k, name="kernel"))
        b = np.zeros(c_out) if self.bias is None else self.bias
        object.__setattr__(self, "bias", _frozen_array(b, (c_out,), "bias"))

        shape = tuple(int(s) for s in self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise InvariantError(f"input_shape must be (c_in, h, w), got {self.input_shape}")
        if shape[0] != c_in:
            raise ShapeError(f"kernel expects {c_in} input channels, input_shape has {shape[0]}")
        object.__setattr__(self, "input_shape", shape)

        stride = tuple(int(s) for s in np.broadcast_to(self.stride, (2,)))
        if min(stride) < 1:
            raise InvariantError(f"stride must be positive, got {stride}")
        object.__setattr__(self, "stride", stride)

        pads = tuple(int(p) for p in np.atleast_1d(self.pad_amount))
        if len(pads) == 1:
            pads = pads * 4
        if len(pads) == 2:
            pads = (pads[0], pads[0], pads[1], pads[1])
        if len(pads) != 4 or min(pads) < 0:
            raise InvariantError(f"pad_amount must be 2 or 4 non-negative ints, got {self.pad_amount}")
        object.__setattr__(self, "pad_amount", pads)

        if self.padding not in PADDING_MODES:
            raise InvariantError(f"unknown padding mode {self.padding!r}")
        if self.dims not in (1, 2):
            raise InvariantError("dims must be 1 or 2")
        if self.dims == 1 and (shape[1] != 1 or kh != 1 or pads[0] or pads[1]):
            raise InvariantError("1-D convolutions need h == 1, k_h == 1 and no vertical padding")

        # builds (and validates) the padding maps eagerly
        _ = self._src_h, self._src_w
        if self.out_shape[1] < 1 or self.out_shape[2] < 1:
            raise InvariantError("kernel larger than padded input")

    @cached_property
    def _src_h(self):
        return _pad_index(self.input_shape[1], self.pad_amount[0], self.pad_amount[1], self.padding)

    @cached_property
    def _src_w(self):
        return _pad_index(self.input_shape[2], self.pad_amount[2], self.pad_amount[3], self.padding)

    @property
    def in_shape(self) -> tuple:
        return self.input_shape

    @cached_property
    def out_shape(self) -> tuple:
        c_out, _, kh, kw = self.kernel.shape
        H = self.input_shape[1] + self.pad_amount[0] + self.pad_amount[1]
        W = self.input_shape[2] + self.pad_amount[2] + self.pad_amount[3]
        return (c_out, (H - kh) // self.stride[0] + 1, (W - kw) // self.stride[1] + 1)

    def _padded(self, X):
        return _pad_axis(_pad_axis(X, self._src_h, 2), self._src_w, 3)

    def _windows(self, Xp):
        """Yield ((u, v), strided slice of padded input) per kernel tap."""
        _, oh, ow = self.out_shape
        sh, sw = self.stride
        for u in range(self.kernel.shape[2]):
            for v in range(self.kernel.shape[3]):
                yield (u, v), (slice(u, u + sh * (oh - 1) + 1, sh), slice(v, v + sw * (ow - 1) + 1, sw))

    def _im2col(self, Xp):
        """``(B, c_in * k_h * k_w, oh * ow)`` patch matrix of the padded input."""
        B, c_in = Xp.shape[:2]
        _, _, kh, kw = self.kernel.shape
        _, oh, ow = self.out_shape
        sh, sw = self.stride
        win = np.lib.stride_tricks.sliding_window_view(Xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(B, c_in * kh * kw, oh * ow)

    def forward(self, X):
        B = X.shape[0]
        c_out, oh, ow = self.out_shape
        cols = self._im2col(self._padded(X))
        return (self.kernel.reshape(c_out, -1) @ cols).reshape(B, c_out, oh, ow)

    def adjoint(self, Y):
        B = Y.shape[0]
        c_out, c_in, kh, kw = self.kernel.shape
        _, oh, ow = self.out_shape
        Gp = np.zeros((B, c_in, self._src_h.size, self._src_w.size))
        cols = (self.kernel.reshape(c_out, -1).T @ Y.reshape(B, c_out, oh * ow)).reshape(B, c_in, kh, kw, oh, ow)
        for (u, v), (rs, cs) in self._windows(Gp):
            Gp[:, :, rs, cs] += cols[:, :, u, v]
        _, h, w = self.input_shape
        G = _unpad_axis(Gp, self._src_h, self.pad_amount[0], h, 2)
        return _unpad_axis(G, self._src_w, self.pad_amount[2], w, 3)

    def offset(self):
        return np.broadcast_to(self.bias[:, None, None], self.out_shape).copy()

    def param_grad(self, X, R):
        B = X.shape[0]
        c_out, oh, ow = self.out_shape
        cols = self._im2col(self._padded(X))
        G = np.einsum("bop,bqp->oq", R.reshape(B, c_out, oh * ow), cols)
        return [G.reshape(self.kernel.shape)]

    def params(self):
        return [self.kernel]

    def with_params(self, ps):
        (k,) = ps
        return dataclasses.replace(self, kernel=_frozen_array(k, self.kernel.shape, "kernel"))


@dataclass(frozen=True, eq=False)
class BatchNormSpec:
    """Inference-mode batch norm: ``(x - mean) / sqrt(var + eps) * gamma + beta``.

    ``input_shape`` is ``(c, *spatial)``; it may be left as ``None`` inside a
    composition, where it is inherited from the preceding stage.
    """

    gamma: np.ndarray
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    epsilon: float = 1e-5
    input_shape: tuple | None = None

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        if g.ndim != 1:
            raise InvariantError("gamma must be a vector")
        c = g.shape[0]
        object.__setattr__(self, "gamma", _frozen_array(g, name="gamma"))
        for name, default in (("beta", 0.0), ("running_mean", 0.0), ("running_var", 1.0)):
            val = getattr(self, name)
            val = np.full(c, default) if val is None else np.atleast_1d(val)
            object.__setattr__(self, name, _frozen_array(val, (c,), name))
        if np.any(self.running_var < 0):
            raise InvariantError("running_var entries must be non-negative")
        if not self.epsilon > 0:
            raise InvariantError("epsilon must be positive")
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if self.input_shape is not None:
            shape = tuple(int(s) for s in self.input_shape)
            if not shape or shape[0] != c or min(shape) < 1:
                raise ShapeError(f"batch-norm over {c} channels cannot take input {shape}")
            object.__setattr__(self, "input_shape", shape)

    @property
    def scale(self) -> np.ndarray:
        """Per-channel diagonal entry ``gamma / sqrt(var + eps)``."""
        return self.gamma / np.sqrt(self.running_var + self.epsilon)

    @property
    def in_shape(self) -> tuple:
        if self.input_shape is None:
            raise ShapeError("batch-norm spec has no input_shape; set one or use it in a composition")
        return self.input_shape

    @property
    def out_shape(self) -> tuple:
        return self.in_shape

    def _bcast(self, v):
        return v.reshape((-1,) + (1,) * (len(self.in_shape) - 1))

    def forward(self, X):
        return X * self._bcast(self.scale)

    def adjoint(self, Y):
        return Y * self._bcast(self.scale)

    def offset(self):
        off = self.beta - self.scale * self.running_mean
        return np.broadcast_to(self._bcast(off), self.in_shape).copy()

    def param_grad(self, X, R):
        normed = (X - self._bcast(self.running_mean)) / self._bcast(np.sqrt(self.running_var + self.epsilon))
        axes = (0,) + tuple(range(2, X.ndim))
        return [np.sum(R * normed, axis=axes)]

    def params(self):
        return [self.gamma]

    def with_params(self, ps):
        (g,) = ps
        return dataclasses.replace(self, gamma=_frozen_array(g, self.gamma.shape, "gamma"))


@dataclass(frozen=True, eq=False)
class CompositionSpec:
    """Stages evaluated first to last. Adjacent shapes must agree in size;
    outputs are reshaped to the next stage's input shape."""

    stages: tuple

    def __post_init__(self):
        stages = list(self.stages)
        if not stages:
            raise InvariantError("composition needs at least one stage")
        for i in range(1, len(stages)):
            prev_out = stages[i - 1].out_shape
            st = stages[i]
            if isinstance(st, BatchNormSpec) and st.input_shape is None:
                st = dataclasses.replace(st, input_shape=prev_out)
                stages[i] = st
            if int(np.prod(prev_out)) != int(np.prod(st.in_shape)):
                raise ShapeError(f"stage {i - 1} emits {prev_out}, stage {i} takes {st.in_shape}")
        object.__setattr__(self, "stages", tuple(stages))

    @property
    def in_shape(self) -> tuple:
        return self.stages[0].in_shape

    @property
    def out_shape(self) -> tuple:
        return self.stages[-1].out_shape

    def forward(self, X):
        for st in self.stages:
            X = st.forward(X.reshape((X.shape[0],) + st.in_shape))
        return X

    def adjoint(self, Y):
        for i in range(len(self.stages) - 1, -1, -1):
            st = self.stages[i]
            Y = st.adjoint(Y.reshape((Y.shape[0],) + st.out_shape))
        return Y

    def offset(self):
        return _affine_batch(self, np.zeros((1,) + self.in_shape))[0]

    def param_grad(self, X, R):
        inputs = []
        for st in self.stages:
            X = X.reshape((X.shape[0],) + st.in_shape)
            inputs.append(X)
            X = st.forward(X) + st.offset()
        grads = []
        for st, Xi in zip(reversed(self.stages), reversed(inputs)):
            R = R.reshape((R.shape[0],) + st.out_shape)
            grads = st.param_grad(Xi, R) + grads
            R = st.adjoint(R)
        return grads

    def params(self):
        return [p for st in self.stages for p in st.params()]

    def with_params(self, ps):
        ps = list(ps)
        stages = []
        for st in self.stages:
            n = len(st.params())
            stages.append(st.with_params(ps[:n]))
            ps = ps[n:]
        if ps:
            raise ShapeError("too many parameter arrays for composition")
        return CompositionSpec(tuple(stages))


OperatorSpec = Union[DenseSpec, ConvSpec, BatchNormSpec, CompositionSpec]


def conv1d(kernel, n: int, bias=None, stride: int = 1, padding: str = "zeros", pad_amount=0) -> ConvSpec:
    """1-D convolution over length-``n`` signals; ``kernel`` is (c_out, c_in, k).

    ``pad_amount`` is an int (both sides) or a ``(left, right)`` pair.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 3:
        raise InvariantError(f"1-D kernel must be (c_out, c_in, k), got {k.shape}")
    left, right = np.broadcast_to(pad_amount, (2,))
    return ConvSpec(
        kernel=k[:, :, None, :],
        input_shape=(k.shape[1], 1, n),
        bias=bias,
        stride=(1, stride),
        padding=padding,
        pad_amount=(0, 0, int(left), int(right)),
        dims=1,
    )


def circular_conv1d(filters, n: int, orientation: str = "out") -> ConvSpec:
    """Circular 1-D convolution with ``m`` length-``k`` filters.

    ``orientation="out"`` builds 1 input / m output channels, ``"in"`` builds
    m input / 1 output channel. Padding is ``floor(k/2)`` on the left and the
    remainder on the right, so the single-channel matrix is the circulant with
    first row ``[f_m, ..., f_{k-1}, 0, ..., 0, f_0, ..., f_{m-1}]``.
    """
    f = np.atleast_2d(np.asarray(filters, dtype=np.float64))
    k = f.shape[1]
    if k > n:
        raise InvariantError(f"filter length {k} exceeds signal length {n}")
    kern = f[:, None, :] if orientation == "out" else f[None, :, :]
    return conv1d(kern, n, padding="circular", pad_amount=(k // 2, k - 1 - k // 2))


# -- public operations ---------------------------------------------------------


def input_dim(op) -> int:
    return int(np.prod(op.in_shape))


def output_dim(op) -> int:
    return int(np.prod(op.out_shape))


def _as_batch(op, X, shape, what):
    X = np.asarray(X, dtype=np.float64)
    size = int(np.prod(shape))
    if X.shape[1:] == tuple(shape):
        pass
    elif X.ndim == 2 and X.shape[1] == size:
        X = X.reshape((X.shape[0],) + tuple(shape))
    else:
        raise ShapeError(f"{what}: expected batch of {tuple(shape)}, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{what}: non-finite input")
    return X


def _as_single(X, shape, what):
    X = np.asarray(X, dtype=np.float64)
    if X.shape != tuple(shape):
        if X.ndim != 1 or X.size != int(np.prod(shape)):
            raise ShapeError(f"{what}: expected {tuple(shape)}, got {X.shape}")
        X = X.reshape(shape)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{what}: non-finite input")
    return X


def _affine_batch(op, X):
    if isinstance(op, CompositionSpec):
        for st in op.stages:
            X = X.reshape((X.shape[0],) + st.in_shape)
            X = st.forward(X) + st.offset()
        return X
    return op.forward(X) + op.offset()


def _zero_response(op):
    # f(0), cached on the (immutable) spec
    f0 = op.__dict__.get("_f0")
    if f0 is None:
        f0 = _affine_batch(op, np.zeros((1,) + tuple(op.in_shape)))
        op.__dict__["_f0"] = f0
    return f0


def apply(op, x) -> np.ndarray:
    """Evaluate ``f(x) = M x + b``. ``x`` may be given flat or in ``op.in_shape``."""
    x = _as_single(x, op.in_shape, "apply")
    return _affine_batch(op, x[None])[0]


def apply_batch(op, X) -> np.ndarray:
    """Affine map on a batch ``(B, *in_shape)`` or ``(B, n)``."""
    return _affine_batch(op, _as_batch(op, X, op.in_shape, "apply_batch"))


def linear_batch(op, X) -> np.ndarray:
    """``M x`` for each row of a batch, without the offset."""
    return op.forward(_as_batch(op, X, op.in_shape, "linear_batch"))


def adjoint_batch(op, Y) -> np.ndarray:
    return op.adjoint(_as_batch(op, Y, op.out_shape, "adjoint_batch"))


def adjoint_apply(op, y) -> np.ndarray:
    """``M^T y``; the bias plays no part."""
    y = _as_single(y, op.out_shape, "adjoint_apply")
    return op.adjoint(y[None])[0]


def gram_apply(op, X) -> np.ndarray:
    """``M^T M X`` for an ``(n, k)`` matrix, computed as the adjoint of
    ``f(X) - f(0)`` so that any bias cancels."""
    X = np.asarray(X, dtype=np.float64)
    n = input_dim(op)
    if X.ndim != 2 or X.shape[0] != n:
        raise ShapeError(f"gram_apply: expected ({n}, k), got {X.shape}")
    Xb = _as_batch(op, X.T, op.in_shape, "gram_apply")
    F = _affine_batch(op, Xb) - _zero_response(op)
    return op.adjoint(F).reshape(X.shape[1], n).T


def weight_grad(op, x, residual) -> list:
    """Gradient of ``0.5 * ||f_W(x) - t||^2`` w.r.t. the trainable parameters,
    given ``residual = f_W(x) - t``.

    ``x``/``residual`` may also be batches with a leading axis, in which case
    the gradients are summed over the batch. Returns one array per entry of
    :func:`params`.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(residual, dtype=np.float64)
    if x.shape == tuple(op.in_shape) or (x.ndim == 1 and x.size == input_dim(op)):
        X = _as_single(x, op.in_shape, "weight_grad")[None]
        R = _as_single(r, op.out_shape, "weight_grad residual")[None]
    else:
        X = _as_batch(op, x, op.in_shape, "weight_grad")
        R = _as_batch(op, r, op.out_shape, "weight_grad residual")
        if R.shape[0] != X.shape[0]:
            raise ShapeError("weight_grad: batch sizes differ")
    return op.param_grad(X, R)


def materialize(op, cap: int = DEFAULT_MATERIALIZE_CAP) -> np.ndarray:
    """Explicit ``(m, n)`` matrix whose column ``j`` is ``f(e_j) - f(0)``."""
    n = input_dim(op)
    if n > cap:
        raise DimensionCapError(f"input dimension {n} exceeds materialization cap {cap}")
    E = np.eye(n).reshape((n,) + tuple(op.in_shape))
    F = _affine_batch(op, E) - _affine_batch(op, np.zeros((1,) + op.in_shape))
    return F.reshape(n, -1).T


def params(op) -> list:
    """Trainable linear parameters (weight / kernel / gamma), biases excluded."""
    return list(op.params())


def with_params(op, ps: Sequence[np.ndarray]):
    """Copy of ``op`` with its trainable parameters replaced."""
    ps = list(ps)
    if len(ps) != len(op.params()):
        raise ShapeError(f"expected {len(op.params())} parameter arrays, got {len(ps)}")
    return op.with_params(ps)


def scale_params(op, factor: float):
    """Multiply the linear parameters by ``factor`` so that every singular
    value scales by ``factor``; biases and beta stay.

    A composition is scaled through its first stage only, since scaling every
    stage would scale the product by ``factor ** len(stages)``.
    """
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if factor == 1:
        return op
    if isinstance(op, CompositionSpec):
        first = scale_params(op.stages[0], factor)
        return CompositionSpec((first,) + op.stages[1:])
    return op.with_params([p * factor for p in op.params()])
