import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multiexit.blocks import (BranchSpec, SEBSpec, build_branch, build_se_b,
                              reduction_conv_for_stage)
from multiexit.cost import flops_of_layer, module_flops
from multiexit.gradcheck import grad_check
from multiexit.nn import Conv2d, GlobalAvgPool, Linear
from multiexit.tensor import Tensor, add, mul, relu, tsum

from kinkfree import condition_se_b, relu_margins


def resnet_branch(level, stage, num_classes=1000, **kw):
    shapes = {1: (64, 56), 2: (128, 28), 3: (256, 14)}
    c, h = shapes[stage]
    return build_branch(BranchSpec(level, stage, c, h, num_classes, 256, 14, **kw))


# -- SE-B ---------------------------------------------------------------------

def test_se_b_reference_cost():
    macs, out = flops_of_layer(build_se_b(SEBSpec(512, 512, 1)), (512, 7, 7))
    trunk = 512 * 128 * 49 + 128 * 128 * 9 * 49 + 128 * 512 * 49
    assert out == (512, 7, 7)
    assert trunk < macs < trunk * 1.01
    assert abs(macs - 13.7e6) / 13.7e6 < 0.05


def test_downsampling_se_b_shape():
    blk = build_se_b(SEBSpec(256, 512, 2))
    assert blk.out_shape((256, 14, 14)) == (512, 7, 7)
    assert blk.shortcut is not None
    assert blk.conv2.stride == 2 and blk.conv1.stride == 1


def test_se_b_identity_shortcut_when_shape_kept():
    assert build_se_b(SEBSpec(64, 64, 1)).shortcut is None


@pytest.mark.parametrize("kw,msg", [
    (dict(in_channels=32, out_channels=48, stride=2), "double"),
    (dict(in_channels=30, out_channels=30), "divisible by 4"),
    (dict(in_channels=24, out_channels=24, se_ratio=16), "SE ratio"),
    (dict(in_channels=32, out_channels=32, stride=3), "stride"),
])
def test_se_b_spec_errors(kw, msg):
    with pytest.raises(ValueError, match=msg):
        SEBSpec(**kw)


def test_se_gate_zero_weights_gives_half(rng):
    blk = build_se_b(SEBSpec(16, 32, 2)).materialize(rng)
    for fc in (blk.se.fc1, blk.se.fc2):
        fc.weight.data[:] = 0
        fc._params["bias"].data[:] = 0
    x = Tensor(rng.normal(size=(2, 16, 8, 8)).astype(np.float32))
    trunk = blk.trunk(x)
    expected = relu(add(mul(trunk, 0.5), blk.shortcut(x))).data
    np.testing.assert_allclose(blk(x).data, expected, rtol=1e-6, atol=1e-6)


def test_se_b_op_count():
    assert build_se_b(SEBSpec(16, 32, 2)).op_count() == 8 + 6 + 2 + 2


@pytest.mark.parametrize("seed", [0, 1])
def test_se_b_composite_gradcheck(seed):
    rng = np.random.default_rng(seed)
    blk = build_se_b(SEBSpec(16, 32, 2)).materialize(rng)
    x = Tensor(rng.normal(size=(2, 16, 6, 6)).astype(np.float32), requires_grad=True)
    condition_se_b(blk, x, weight_scale=10.0)
    x.data *= 10.0  # every path from x meets a batch norm, so this is function-preserving
    with relu_margins() as margins:
        out = blk(x)
    assert min(margins) > 0.03
    w = Tensor(rng.normal(size=out.shape).astype(np.float32))
    inputs = [x] + blk.parameters()
    fn = lambda: tsum(mul(blk(x), w))
    assert grad_check(fn, inputs, step=1e-3) < 1e-4
    assert grad_check(fn, inputs, step=1e-3, analytic_dtype=np.float32) < 1e-2


def test_se_b_gradcheck_random_instance_small_step(rng):
    # no conditioning: a tiny step keeps central differences off the ReLU kinks
    blk = build_se_b(SEBSpec(16, 16, 1)).materialize(rng)
    x = Tensor(rng.normal(size=(2, 16, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 16, 4, 4)))
    assert grad_check(lambda: tsum(mul(blk(x), w)), [x] + blk.parameters(), step=1e-6) < 1e-4


# -- reduction convolution ----------------------------------------------------

@pytest.mark.parametrize("args,expected", [
    ((64, 56, 256, 14), (6, 4, 1)),
    ((128, 28, 256, 14), (4, 2, 1)),
    ((256, 14, 256, 14), (3, 1, 1)),
])
def test_reduction_conv_table(args, expected):
    assert reduction_conv_for_stage(*args) == expected


def test_reduction_conv_errors():
    with pytest.raises(ValueError, match="multiple"):
        reduction_conv_for_stage(64, 30, 256, 14)
    with pytest.raises(ValueError, match="multiple"):
        reduction_conv_for_stage(64, 7, 256, 14)


@given(st.sampled_from([8, 16, 32, 64, 128, 256]), st.sampled_from([1, 2, 4, 8]),
       st.sampled_from([7, 8, 14]), st.sampled_from([64, 128, 256]))
def test_reduction_conv_hits_target(cin, ratio, target, cout):
    try:
        k, s, p = reduction_conv_for_stage(cin, target * ratio, cout, target)
    except ValueError:
        return
    assert s == ratio
    out = Conv2d(cin, cout, k, s, p).out_shape((cin, target * ratio, target * ratio))
    assert out == (cout, target, target)


# -- branches -----------------------------------------------------------------

def test_naive_branch_is_gap_fc():
    b = resnet_branch(0, 2)
    layers = list(b)
    assert len(layers) == 2 and isinstance(layers[0], GlobalAvgPool) and isinstance(layers[1], Linear)
    assert b.op_count() == 2


def test_level3_stage1_structure():
    b = resnet_branch(3, 1)
    names = [n for n, _ in b.children()]
    assert names == ["red", "red_bn", "red_relu", "seb1", "seb2", "seb3", "gap", "fc"]
    assert (b.red.kernel, b.red.stride) == (6, 4) if hasattr(b, "red") else True
    assert b.out_shape((64, 56, 56)) == (1000,)
    red_out = b[0].out_shape((64, 56, 56))
    assert red_out == (256, 14, 14)
    assert b[3].out_shape(red_out) == (512, 7, 7)


def test_reduction_bn_can_be_disabled():
    names = [n for n, _ in resnet_branch(1, 2, reduction_bn=False).children()]
    assert names == ["red", "seb1", "gap", "fc"]


def test_negative_level_rejected():
    with pytest.raises(ValueError, match="level"):
        BranchSpec(-1, 1, 64, 56, 10, 256, 14)


@pytest.mark.parametrize("level", [0, 1, 2, 4])
@pytest.mark.parametrize("stage", [1, 2, 3])
def test_branch_output_contract(level, stage):
    shapes = {1: (64, 56, 56), 2: (128, 28, 28), 3: (256, 14, 14)}
    assert resnet_branch(level, stage, num_classes=37).out_shape(shapes[stage]) == (37,)


def _branch_macs(level, stage):
    shapes = {1: (64, 56, 56), 2: (128, 28, 28), 3: (256, 14, 14)}
    return module_flops(resnet_branch(level, stage), shapes[stage])


def _tail_macs(level, stage):
    b = resnet_branch(level, stage)
    shapes = {1: (64, 56, 56), 2: (128, 28, 28), 3: (256, 14, 14)}
    red = module_flops(b[0], shapes[stage])
    return _branch_macs(level, stage) - red


def test_level2_tail_equal_across_stages():
    assert _tail_macs(2, 1) == _tail_macs(2, 3) == _tail_macs(2, 2)
    assert abs(_branch_macs(2, 1) - _branch_macs(2, 3)) / _branch_macs(2, 3) < 0.01


def test_level_monotonicity_exact():
    per_level = module_flops(build_se_b(SEBSpec(512, 512, 1)), (512, 7, 7))
    for stage in (1, 2, 3):
        costs = [_branch_macs(level, stage) for level in range(1, 6)]
        assert all(b - a == per_level for a, b in zip(costs, costs[1:]))


def test_reduction_cost_spread_bounded_by_kernel_rule():
    # the rule equalizes k^2 * C_in only up to rounding: 2304 vs 2048
    costs = [_branch_macs(1, s) for s in (1, 2, 3)]
    assert (max(costs) - min(costs)) / max(costs) <= 1 - 2048 / 2304


@pytest.mark.xfail(strict=True, reason="k^2*C_in rounding (2304 vs 2048) leaves ~10% spread at low levels")
@pytest.mark.parametrize("level", [1, 2, 3])
def test_cost_equalization_within_five_percent(level):
    costs = [_branch_macs(level, s) for s in (1, 2, 3)]
    assert (max(costs) - min(costs)) / min(costs) < 0.05
