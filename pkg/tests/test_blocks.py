import copy

import numpy as np
import pytest

from oracles import conv2d_loop
from raunet.blocks import (
    BlockShapeError,
    BranchParams,
    ConvParams,
    ResNeXtBlockParams,
    bottleneck_forward,
    branch_equivalence_check,
    branch_width,
    init_conv,
    init_resnet_block,
    init_resnext_block,
    named_tensors,
    resnet_block_forward,
    resnext_block_forward,
)
from raunet.gradcheck import check_gradients
from raunet.tensor import Tensor


def _zero(params):
    for _, t in named_tensors(params):
        t.data = np.zeros_like(t.data)
    return params


def _branch_oracle(x, br: BranchParams):
    """Loop-convolution evaluation of one bottleneck branch."""

    def conv(h, c: ConvParams):
        return conv2d_loop(h, c.weight.data, c.bias.data, c.stride, c.padding)

    h = np.maximum(conv(x, br.reduce), 0)
    h = np.maximum(conv(h, br.conv), 0)
    return conv(h, br.expand)


def _nonneg(rng, *shape):
    return rng.uniform(0, 2, shape)


# -- ResNet ---------------------------------------------------------------------------


def test_resnet_zero_residual_identity(f64, rng):
    params = _zero(init_resnet_block(rng, 3, 3))
    x = rng.standard_normal((2, 3, 5, 5))
    np.testing.assert_array_equal(resnet_block_forward(Tensor(x), params).data, np.maximum(x, 0))
    xp = _nonneg(rng, 2, 3, 5, 5)
    np.testing.assert_array_equal(resnet_block_forward(Tensor(xp), params).data, xp)


def test_resnet_zero_input_zero_bias(f64, rng):
    params = init_resnet_block(rng, 2, 4)
    assert not resnet_block_forward(Tensor(np.zeros((1, 2, 6, 6))), params).data.any()


def test_resnet_gradient(f64, rng):
    params = init_resnet_block(rng, 2, 2)
    for name, t in named_tensors(params):
        if name.endswith("bias"):
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    leaves = [x] + [t for _, t in named_tensors(params)]
    readout = Tensor(rng.standard_normal((1, 2, 5, 5)))
    assert check_gradients(lambda: (resnet_block_forward(x, params) * readout).sum(), leaves) < 1e-4


def test_resnet_shape_error(rng):
    with pytest.raises(BlockShapeError):
        resnet_block_forward(Tensor(np.zeros((1, 3, 4, 4))), init_resnet_block(rng, 2, 2))


def test_resnet_strided_projection(rng):
    out = resnet_block_forward(Tensor(np.ones((1, 2, 8, 8))), init_resnet_block(rng, 2, 4, stride=2))
    assert out.shape == (1, 4, 4, 4)


# -- ResNeXt -----------------------------------------------------------------------------


def test_resnext_zero_branches_identity(f64, rng):
    params = init_resnext_block(rng, 4, 4, cardinality=4)
    for br in params.branches:
        _zero(br)
    x = rng.standard_normal((1, 4, 6, 6))
    np.testing.assert_array_equal(resnext_block_forward(Tensor(x), params).data, np.maximum(x, 0))
    xp = _nonneg(rng, 1, 4, 6, 6)
    np.testing.assert_array_equal(resnext_block_forward(Tensor(xp), params).data, xp)


def test_cardinality_one_equals_bottleneck(f64, rng):
    params = init_resnext_block(rng, 3, 5, cardinality=1)
    br = params.branches[0]
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    np.testing.assert_array_equal(
        resnext_block_forward(x, params).data, bottleneck_forward(x, br.reduce, br.conv, br.expand, params.proj).data
    )


@pytest.mark.parametrize("cardinality", [1, 2, 3, 4, 8])
def test_resnext_additivity_against_loop_oracle(f64, rng, cardinality):
    params = init_resnext_block(rng, 4, 4, cardinality)
    for name, t in named_tensors(params):
        if name.endswith("bias"):
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    x = rng.standard_normal((1, 4, 5, 5))
    total = sum(_branch_oracle(x, br) for br in params.branches)
    expected = np.maximum(total + x, 0)
    np.testing.assert_allclose(resnext_block_forward(Tensor(x), params).data, expected, atol=1e-6)


def test_appending_zero_branch_is_neutral(f64, rng):
    params = init_resnext_block(rng, 4, 8, cardinality=2)
    x = Tensor(rng.standard_normal((1, 4, 5, 5)))
    before = resnext_block_forward(x, params).data
    params.branches.append(_zero(copy.deepcopy(params.branches[0])))
    np.testing.assert_allclose(resnext_block_forward(x, params).data, before, atol=1e-7)


def test_resnext_strided_block(rng):
    params = init_resnext_block(rng, 4, 8, cardinality=2, stride=2)
    assert resnext_block_forward(Tensor(np.ones((1, 4, 8, 8))), params).shape == (1, 8, 4, 4)


def test_branch_width_rule():
    assert branch_width(64, 8) == 8
    assert branch_width(16, 8) == 4
    assert branch_width(32, 1) == 32


# -- equivalence check ---------------------------------------------------------------------


def test_equivalence_fresh_block(rng):
    assert branch_equivalence_check(init_resnext_block(rng, 8, 8, cardinality=4))


def test_equivalence_single_branch(rng):
    assert branch_equivalence_check(init_resnext_block(rng, 8, 8, cardinality=1))


def test_equivalence_mismatched_widths(rng):
    wide = BranchParams(init_conv(rng, 8, 6, 1), init_conv(rng, 6, 6, 3, 1, 1), init_conv(rng, 6, 8, 1))
    narrow = BranchParams(init_conv(rng, 8, 4, 1), init_conv(rng, 4, 4, 3, 1, 1), init_conv(rng, 4, 8, 1))
    params = ResNeXtBlockParams([wide, narrow])
    assert not branch_equivalence_check(params)
    with pytest.raises(BlockShapeError):
        resnext_block_forward(Tensor(np.zeros((1, 8, 4, 4))), params)


def test_equivalence_mismatched_stride(rng):
    a = BranchParams(init_conv(rng, 4, 4, 1), init_conv(rng, 4, 4, 3, 1, 1), init_conv(rng, 4, 4, 1))
    b = BranchParams(init_conv(rng, 4, 4, 1), init_conv(rng, 4, 4, 3, 2, 1), init_conv(rng, 4, 4, 1))
    assert not branch_equivalence_check(ResNeXtBlockParams([a, b]))


def test_init_is_he_uniform(rng):
    conv = init_conv(rng, 16, 32, 3)
    fan_in = 16 * 9
    assert np.abs(conv.weight.data).max() <= np.sqrt(6 / fan_in)
    assert abs(conv.weight.data.var() / (2 / fan_in) - 1) < 0.1
    assert not conv.bias.data.any()
