"""JSON operator files.

Parameter arrays are stored inline as (nested) JSON number arrays, or as a
reference ``{"path": "<file>", "dtype": "f64le"}`` to a raw little-endian
float64 file in row-major order (``[c_out][c_in][k_h][k_w]`` for kernels).
Relative paths resolve against the directory of the JSON document.

Document shapes::

    {"type": "dense", "weight": ..., "bias": ...}
    {"type": "conv2d", "kernel": ..., "bias": ..., "input_shape": [c, h, w],
     "stride": [s_h, s_w], "padding": "zeros", "pad_amount": [p_h, p_w]}
    {"type": "conv1d", "kernel": ..., "bias": ..., "input_shape": [c, n],
     "stride": s, "padding": "circular", "pad_amount": [left, right]}
    {"type": "batchnorm", "gamma": ..., "beta": ..., "running_mean": ...,
     "running_var": ..., "epsilon": 1e-5, "input_shape": [c, ...]}
    {"type": "composition", "stages": [<document>, ...]}

Array shapes for the ``path`` form come from ``"shape"`` inside the reference
or, failing that, from the other fields (``out_features``/``in_features``,
``kernel_size``, channel counts).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .linops import (
    PADDING_MODES,
    BatchNormSpec,
    CompositionSpec,
    ConvSpec,
    DenseSpec,
    InvariantError,
    ShapeError,
)

__all__ = ["SpecFormatError", "spec_to_dict", "spec_from_dict", "save_spec", "load_spec", "specs_equal"]


class SpecFormatError(ValueError):
    """Malformed operator document."""


def _load_array(value, base: Path, shape=None, name="array") -> np.ndarray:
    if isinstance(value, dict):
        if "path" not in value:
            raise SpecFormatError(f"{name}: reference object needs a 'path'")
        if value.get("dtype", "f64le") != "f64le":
            raise SpecFormatError(f"{name}: unsupported dtype {value.get('dtype')!r}")
        p = Path(value["path"])
        if not p.is_absolute():
            p = base / p
        arr = np.fromfile(p, dtype="<f8").astype(np.float64)
        shape = value.get("shape", shape)
    elif isinstance(value, (list, int, float)):
        try:
            arr = np.array(value, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise SpecFormatError(f"{name}: not a numeric array") from exc
    else:
        raise SpecFormatError(f"{name}: expected array or path reference")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{name}: {arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    return arr


def _dump_array(arr: np.ndarray, name: str, binary_dir: Path | None):
    if binary_dir is None:
        return np.asarray(arr).tolist()
    path = binary_dir / f"{name}.f64"
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)
    return {"path": path.name, "dtype": "f64le", "shape": list(arr.shape)}


def spec_to_dict(op, binary_dir: Path | None = None, prefix: str = "op") -> dict:
    """Serializable form of ``op``; arrays go to ``binary_dir`` when given."""
    dump = lambda a, n: _dump_array(a, f"{prefix}.{n}", binary_dir)  # noqa: E731
    if isinstance(op, DenseSpec):
        m, n = op.weight.shape
        return {"type": "dense", "out_features": m, "in_features": n,
                "weight": dump(op.weight, "weight"), "bias": dump(op.bias, "bias")}
    if isinstance(op, ConvSpec):
        c_out, c_in, kh, kw = op.kernel.shape
        t, b, l, r = op.pad_amount
        if op.dims == 1:
            return {"type": "conv1d", "out_channels": c_out, "in_channels": c_in, "kernel_size": kw,
                    "kernel": dump(op.kernel[:, :, 0, :], "kernel"), "bias": dump(op.bias, "bias"),
                    "input_shape": [op.input_shape[0], op.input_shape[2]], "stride": op.stride[1],
                    "padding": op.padding, "pad_amount": [l, r]}
        return {"type": "conv2d", "out_channels": c_out, "in_channels": c_in, "kernel_size": [kh, kw],
                "kernel": dump(op.kernel, "kernel"), "bias": dump(op.bias, "bias"),
                "input_shape": list(op.input_shape), "stride": list(op.stride),
                "padding": op.padding, "pad_amount": [t, b, l, r]}
    if isinstance(op, BatchNormSpec):
        d = {"type": "batchnorm", "channels": int(op.gamma.shape[0]), "epsilon": op.epsilon}
        for name in ("gamma", "beta", "running_mean", "running_var"):
            d[name] = dump(getattr(op, name), name)
        if op.input_shape is not None:
            d["input_shape"] = list(op.input_shape)
        return d
    if isinstance(op, CompositionSpec):
        return {"type": "composition",
                "stages": [spec_to_dict(st, binary_dir, f"{prefix}.{i}") for i, st in enumerate(op.stages)]}
    raise TypeError(f"not an operator spec: {type(op).__name__}")


def _require(doc, key):
    if key not in doc:
        raise SpecFormatError(f"{doc.get('type', '?')} document missing {key!r}")
    return doc[key]


def spec_from_dict(doc: dict, base: Path | str = ".", _nested: bool = False):
    """Inverse of :func:`spec_to_dict`; validates every invariant."""
    base = Path(base)
    if not isinstance(doc, dict) or "type" not in doc:
        raise SpecFormatError("operator document must be an object with a 'type'")
    kind = doc["type"]
    if kind == "dense":
        shape = None
        if "out_features" in doc and "in_features" in doc:
            shape = (doc["out_features"], doc["in_features"])
        w = _load_array(_require(doc, "weight"), base, shape, "weight")
        b = doc.get("bias")
        b = None if b is None else _load_array(b, base, (w.shape[0],), "bias")
        return DenseSpec(w, b)
    if kind in ("conv1d", "conv2d"):
        padding = doc.get("padding", "zeros")
        if padding not in PADDING_MODES:
            raise InvariantError(f"unknown padding mode {padding!r}")
        in_shape = [int(s) for s in _require(doc, "input_shape")]
        c_in = in_shape[0]
        c_out = doc.get("out_channels")
        ks = doc.get("kernel_size")
        if kind == "conv1d":
            shape = None if c_out is None or ks is None else (c_out, c_in, int(np.atleast_1d(ks)[-1]))
            k = _load_array(_require(doc, "kernel"), base, shape, "kernel")
            if k.ndim != 3:
                raise ShapeError(f"conv1d kernel must be (c_out, c_in, k), got {k.shape}")
            if len(in_shape) != 2:
                raise ShapeError("conv1d input_shape must be [c_in, n]")
            pads = np.broadcast_to(doc.get("pad_amount", 0), (2,))
            stride = int(np.atleast_1d(doc.get("stride", 1))[-1])
            b = doc.get("bias")
            b = None if b is None else _load_array(b, base, (k.shape[0],), "bias")
            return ConvSpec(k[:, :, None, :], (c_in, 1, in_shape[1]), b, (1, stride), padding,
                            (0, 0, int(pads[0]), int(pads[1])), dims=1)
        shape = None
        if c_out is not None and ks is not None:
            kh, kw = np.broadcast_to(ks, (2,))
            shape = (c_out, c_in, int(kh), int(kw))
        k = _load_array(_require(doc, "kernel"), base, shape, "kernel")
        b = doc.get("bias")
        b = None if b is None else _load_array(b, base, (k.shape[0],), "bias")
        return ConvSpec(k, tuple(in_shape), b, tuple(np.broadcast_to(doc.get("stride", 1), (2,))),
                        padding, tuple(np.atleast_1d(doc.get("pad_amount", 0))))
    if kind == "batchnorm":
        c = doc.get("channels")
        shape = None if c is None else (c,)
        arrays = {}
        arrays["gamma"] = _load_array(_require(doc, "gamma"), base, shape, "gamma")
        for name in ("beta", "running_mean", "running_var"):
            if doc.get(name) is not None:
                arrays[name] = _load_array(doc[name], base, arrays["gamma"].shape, name)
        return BatchNormSpec(epsilon=doc.get("epsilon", 1e-5), input_shape=doc.get("input_shape"), **arrays)
    if kind == "composition":
        stages = _require(doc, "stages")
        if not isinstance(stages, list):
            raise SpecFormatError("composition 'stages' must be a list")
        return CompositionSpec(tuple(spec_from_dict(s, base, True) for s in stages))
    raise SpecFormatError(f"unknown operator type {kind!r}")


def save_spec(op, path, binary: bool = False) -> None:
    """Write ``op`` to ``path`` as JSON; ``binary=True`` puts arrays in
    sibling ``.f64`` files."""
    path = Path(path)
    binary_dir = path.parent if binary else None
    doc = spec_to_dict(op, binary_dir, prefix=path.stem)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, path)


def load_spec(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecFormatError(f"{path}: invalid JSON ({exc})") from exc
    return spec_from_dict(doc, path.parent)


def specs_equal(a, b) -> bool:
    """Field-by-field, bit-exact comparison of two specs."""
    if type(a) is not type(b):
        return False
    if isinstance(a, CompositionSpec):
        return len(a.stages) == len(b.stages) and all(specs_equal(x, y) for x, y in zip(a.stages, b.stages))
    for f in a.__dataclass_fields__:
        x, y = getattr(a, f), getattr(b, f)
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if x is None or y is None or x.shape != y.shape or not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True
