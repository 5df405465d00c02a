import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from faultdistill.backbone import (FPN, AxialShiftConfig, FaultMLP, InputShapeError, MLPBlock,
                                   StudentDetectorBody, axial_shift, backbone_forward,
                                   count_parameters, fpn_forward, mlp_block, shift_offsets,
                                   table1_stages)
from faultdistill.config import ConfigError

from oracles import fd_check, naive_axial_shift, tally_backbone, tally_fpn


def test_single_channel_identity():
    x = torch.randn(1, 5, 5, dtype=torch.float64)
    w = torch.ones(1, 1, dtype=torch.float64)
    cfg = AxialShiftConfig(1, 1, 1)
    for direction in ("horizontal", "vertical"):
        assert torch.equal(axial_shift(x, w, cfg, direction), x)


def test_three_channel_hand_case():
    x = torch.tensor([[[1.0, 2, 3]], [[4, 5, 6]], [[7, 8, 9]]])
    y = axial_shift(x, torch.ones(1, 3), AxialShiftConfig(3, 3, 1), "horizontal")
    assert y[0, 0, 1].item() == 15.0


def test_random_instance_matches_loop():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(8, 6, 6, generator=g, dtype=torch.float64)
    w = torch.randn(8, 8, generator=g, dtype=torch.float64)
    for direction in ("horizontal", "vertical"):
        y = axial_shift(x, w, AxialShiftConfig(8, 5, 1), direction).numpy()
        np.testing.assert_allclose(y, naive_axial_shift(x, w, 5, 1, direction), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(c=st.integers(1, 16), h=st.integers(1, 16), w=st.integers(1, 16),
       s=st.sampled_from([1, 3, 5]), d=st.sampled_from([1, 2]),
       direction=st.sampled_from(["horizontal", "vertical"]), seed=st.integers(0, 2**16))
def test_axial_shift_equals_loop_oracle(c, h, w, s, d, direction, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w))
    wt = rng.standard_normal((3, c))
    y = axial_shift(torch.from_numpy(x), torch.from_numpy(wt), AxialShiftConfig(c, s, d), direction)
    np.testing.assert_allclose(y.numpy(), naive_axial_shift(x, wt, s, d, direction), atol=1e-6)


@given(c=st.integers(1, 64), s=st.sampled_from([1, 3, 5, 7]), d=st.integers(1, 3))
def test_shift_groups_partition_channels(c, s, d):
    offs = shift_offsets(c, s, d)
    group = math.ceil(c / s)
    # contiguous groups, one per distinct offset, non-decreasing in channel index
    assert offs == sorted(offs)
    assert len(set(offs)) == math.ceil(c / group)
    assert len(set(offs)) <= min(s, c)
    if c % s == 0 or c <= s:
        assert len(set(offs)) == min(s, c)
    if c >= s:
        # full groups cover every offset in the symmetric range
        assert set(offs) <= {k * d for k in range(-(s // 2), s // 2 + 1)}
    if c % s == 0:
        assert sorted(set(offs)) == [-o for o in sorted(set(offs), reverse=True)]


def test_group_count_can_fall_short_of_shift_size():
    # ceil(8/5) = 2 channels per group leaves only 4 groups for s=5
    assert len(set(shift_offsets(8, 5))) == 4


def test_axial_shift_channel_mismatch():
    with pytest.raises(ConfigError):
        axial_shift(torch.zeros(4, 3, 3), torch.zeros(4, 4), AxialShiftConfig(3, 3))


@pytest.mark.parametrize("bad", [dict(channels=0), dict(channels=4, shift_size=2),
                                 dict(channels=4, dilation=0)])
def test_shift_config_validation(bad):
    with pytest.raises(ConfigError):
        AxialShiftConfig(**bad)


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 12), h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 999))
def test_mlp_block_zero_path_is_identity(c, h, w, seed):
    torch.manual_seed(seed)
    block = MLPBlock(AxialShiftConfig(c, 3))
    block.zero_path_()
    x = torch.randn(2, c, h, w)
    y = mlp_block(x, block)
    assert y.shape == x.shape
    assert torch.equal(y, x)


@pytest.mark.parametrize("shape", [(4, 8, 8), (6, 5, 7), (3, 4, 4)])
def test_mlp_block_gradients(shape):
    torch.manual_seed(sum(shape))
    c = shape[0]
    block = MLPBlock(AxialShiftConfig(c, 3), mlp_ratio=2).double()
    with torch.no_grad():
        for p in block.parameters():
            p.add_(0.3 * torch.randn_like(p))
    x = torch.randn(1, *shape, dtype=torch.float64, requires_grad=True)
    target = torch.randn(1, *shape, dtype=torch.float64)
    err = fd_check(lambda: ((block(x) - target) ** 2).sum(), [x, *block.parameters()])
    assert err < 1e-4


def test_table1_shapes_224():
    torch.manual_seed(0)
    body = StudentDetectorBody(table1_stages(), fpn_channels=64)
    with torch.no_grad():
        feats = body.backbone(torch.randn(1, 3, 224, 224))
        pyr = fpn_forward(feats, body.fpn)
    assert [tuple(f.shape[1:]) for f in feats] == [(64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)]
    assert [tuple(p.shape[1:]) for p in pyr] == [(64, 56, 56), (64, 28, 28), (64, 14, 14), (64, 7, 7)]


@settings(max_examples=5, deadline=None)
@given(h=st.integers(1, 3), w=st.integers(1, 3))
def test_shape_contract_any_valid_size(h, w):
    net = FaultMLP(table1_stages(dims=(8, 16, 24, 32), depths=(1, 1, 1, 1)))
    with torch.no_grad():
        feats = backbone_forward(torch.randn(3, 32 * h, 32 * w), net)
    for f, s, d in zip(feats, (4, 8, 16, 32), (8, 16, 24, 32)):
        assert tuple(f.shape) == (d, 32 * h // s, 32 * w // s)


def test_non_divisible_input_names_multiple():
    net = FaultMLP(table1_stages(dims=(8, 16, 24, 32), depths=(1, 1, 1, 1)))
    with pytest.raises(InputShapeError, match="32"):
        net(torch.randn(1, 3, 48, 64))


def test_parameter_count_matches_tally():
    assert count_parameters(FaultMLP(table1_stages())) == tally_backbone()
    dims = (64, 128, 256, 512)
    for c in (32, 64, 128, 256):
        assert count_parameters(FPN(dims, c)) == tally_fpn(dims, c)
    assert count_parameters(FPN(dims, 256)) > count_parameters(FPN(dims, 64))


def test_fpn_rejects_nonpositive_width():
    with pytest.raises(ConfigError):
        FPN((8, 16, 24, 32), 0)


def test_fpn_levels_share_width_and_halve():
    fpn = FPN((8, 16, 24, 32), 12)
    feats = [torch.randn(2, d, 16 // 2**i, 16 // 2**i) for i, d in enumerate((8, 16, 24, 32))]
    out = fpn(feats)
    assert [tuple(o.shape) for o in out] == [(2, 12, 16 // 2**i, 16 // 2**i) for i in range(4)]
