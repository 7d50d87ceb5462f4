import json

import numpy as np
import pytest

from conftest import operator_zoo
from specclip.linops import InvariantError, ShapeError
from specclip.serialize import SpecFormatError, load_spec, save_spec, spec_from_dict, specs_equal


@pytest.mark.parametrize("binary", [False, True])
@pytest.mark.parametrize("op", operator_zoo(7), ids=lambda o: type(o).__name__)
def test_round_trip(op, binary, tmp_path):
    path = tmp_path / "op.json"
    save_spec(op, path, binary=binary)
    assert specs_equal(load_spec(path), op)


def test_inline_kernel_bit_exact(tmp_path):
    vals = [[[[0.1, 1 / 3], [np.pi, -2.5e-300]]]]
    doc = {"type": "conv2d", "kernel": vals, "input_shape": [1, 4, 4], "padding": "zeros", "pad_amount": [1, 1]}
    (tmp_path / "k.json").write_text(json.dumps(doc))
    op = load_spec(tmp_path / "k.json")
    assert np.array_equal(op.kernel, np.array(vals))


def test_reflect_pad_too_large_rejected(tmp_path):
    doc = {"type": "conv2d", "kernel": np.ones((1, 1, 3, 3)).tolist(), "input_shape": [1, 3, 3],
           "padding": "reflect", "pad_amount": [3, 3]}
    with pytest.raises(InvariantError):
        spec_from_dict(doc)


def test_bad_documents():
    with pytest.raises(InvariantError):
        spec_from_dict({"type": "conv2d", "kernel": [[[[1.0]]]], "input_shape": [1, 2, 2], "padding": "mirror"})
    with pytest.raises(SpecFormatError):
        spec_from_dict({"type": "lstm"})
    with pytest.raises(SpecFormatError):
        spec_from_dict({"type": "dense"})
    with pytest.raises(ShapeError):
        spec_from_dict({"type": "dense", "weight": [1.0, 2.0, 3.0], "out_features": 2, "in_features": 2})


def test_binary_reference_relative_to_document(tmp_path):
    w = np.arange(6.0).reshape(2, 3)
    w.astype("<f8").tofile(tmp_path / "w.f64")
    doc = {"type": "dense", "out_features": 2, "in_features": 3, "weight": {"path": "w.f64", "dtype": "f64le"}}
    (tmp_path / "d.json").write_text(json.dumps(doc))
    assert np.array_equal(load_spec(tmp_path / "d.json").weight, w)
