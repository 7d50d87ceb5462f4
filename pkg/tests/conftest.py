import itertools

import numpy as np
import pytest

from specclip.linops import BatchNormSpec, CompositionSpec, ConvSpec, DenseSpec, conv1d

PADDINGS = ("zeros", "circular", "reflect", "replicate")


def random_conv2d(rng, c_in=2, c_out=3, size=6, k=3, stride=1, padding="zeros", pad=1):
    kern = rng.standard_normal((c_out, c_in, k, k))
    return ConvSpec(kern, (c_in, size, size), rng.standard_normal(c_out), (stride, stride), padding, pad)


def random_conv1d(rng, c_in=2, c_out=2, n=9, k=3, stride=1, padding="zeros", pad=1):
    return conv1d(rng.standard_normal((c_out, c_in, k)), n, rng.standard_normal(c_out), stride, padding, pad)


def random_bn(rng, shape):
    c = shape[0]
    return BatchNormSpec(rng.standard_normal(c), rng.standard_normal(c), rng.standard_normal(c),
                         rng.uniform(0.2, 2.0, c), 1e-5, shape)


def operator_zoo(seed=0):
    """One of each operator family, for tests that loop over all of them."""
    rng = np.random.default_rng(seed)
    ops = [DenseSpec(rng.standard_normal((5, 7)), rng.standard_normal(5))]
    for pad, stride in itertools.product(PADDINGS, (1, 2)):
        ops.append(random_conv2d(rng, stride=stride, padding=pad))
        ops.append(random_conv1d(rng, stride=stride, padding=pad))
    ops.append(random_bn(rng, (3, 4, 4)))
    conv = random_conv2d(rng, c_in=2, c_out=3, size=5)
    ops.append(CompositionSpec((conv, random_bn(rng, conv.out_shape))))
    return ops


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
