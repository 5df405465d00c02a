import numpy as np
import torch
from hypothesis import given, settings, strategies as st

from faultdistill.appearance import AppearanceEncoder, appearance_embed, masked_mean_pool, rasterize_masks
from faultdistill.label_encoder import LabelSet

from oracles import cell_in_box, loop_masked_mean

boxes_st = st.tuples(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.01, 1), st.floats(0.01, 1)).map(
    lambda t: (t[0], t[1], min(1.0, t[0] + t[2]), min(1.0, t[1] + t[3]))).filter(
    lambda b: b[0] < b[2] and b[1] < b[3])


def identity_encoder(c):
    enc = AppearanceEncoder(c).double()
    with torch.no_grad():
        enc.proj.weight.copy_(torch.eye(c)[:, :, None, None])
        enc.proj.bias.zero_()
    return enc


def test_full_box_all_cells():
    m = rasterize_masks(LabelSet([[0, 0, 1, 1]], [0]), [(7, 7)])[0]
    assert m.shape == (2, 7, 7)
    assert m.all()


def test_half_box_top_left_block():
    m = rasterize_masks(LabelSet([[0, 0, 0.5, 0.5]], [0]), [(8, 8)])[0][0]
    expected = torch.zeros(8, 8, dtype=torch.bool)
    expected[:4, :4] = True
    assert torch.equal(m, expected)


def test_tiny_centre_box_single_cell():
    m = rasterize_masks(LabelSet([[0.49, 0.49, 0.51, 0.51]], [0]), [(7, 7)])[0][0]
    assert m.sum() == 1 and m[3, 3]


def test_empty_box_clamps_to_one_cell():
    m = rasterize_masks(LabelSet([[0.01, 0.01, 0.02, 0.02]], [0]), [(4, 4)])[0][0]
    assert m.sum() == 1 and m[0, 0]


@settings(max_examples=40, deadline=None)
@given(boxes=st.lists(boxes_st, min_size=0, max_size=4), h=st.integers(1, 12), w=st.integers(1, 12))
def test_masks_match_cell_centre_oracle(boxes, h, w):
    labels = LabelSet(torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4), [0] * len(boxes))
    m = rasterize_masks(labels, [(h, w), (1, 1)])
    assert m[0].shape == (len(boxes) + 1, h, w)
    assert m[0][-1].all() and m[1][-1].all()
    for lvl in m:
        assert lvl.flatten(1).any(1).all()
    for i, b in enumerate(boxes):
        ref = np.array([[cell_in_box(r, c, h, w, b) for c in range(w)] for r in range(h)])
        if ref.any():
            assert np.array_equal(m[0][i].numpy(), ref)
        else:
            assert m[0][i].sum() == 1


def test_two_by_two_virtual_pool():
    enc = identity_encoder(1)
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    out = appearance_embed(x, torch.ones(1, 2, 2, dtype=torch.bool), enc)
    assert out.item() == 2.5


def test_single_cell_mask_picks_projected_feature():
    torch.manual_seed(0)
    enc = AppearanceEncoder(3).double()
    x = torch.randn(3, 4, 4, dtype=torch.float64)
    mask = torch.zeros(1, 4, 4, dtype=torch.bool)
    mask[0, 0, 0] = True
    proj = enc.proj(x[None])[0]
    torch.testing.assert_close(appearance_embed(x, mask, enc)[0], proj[:, 0, 0], rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), boxes=st.lists(boxes_st, min_size=1, max_size=3))
def test_pooling_matches_loop_oracle(seed, boxes):
    torch.manual_seed(seed)
    enc = AppearanceEncoder(4).double()
    x = torch.randn(4, 6, 6, dtype=torch.float64)
    masks = rasterize_masks(LabelSet(boxes, [0] * len(boxes)), [(6, 6)])[0]
    out = appearance_embed(x, masks, enc).detach().numpy()
    proj = enc.proj(x[None])[0].detach().numpy()
    for i in range(len(masks)):
        np.testing.assert_allclose(out[i], loop_masked_mean(proj, masks[i].numpy()), atol=1e-6)
    # virtual row is the global mean of the projected map
    np.testing.assert_allclose(out[-1], proj.mean(axis=(1, 2)), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(k=st.integers(1, 4), value=st.floats(-5, 5))
def test_size_invariance(k, value):
    feats = torch.full((2, 8, 8), value, dtype=torch.float64)
    small = torch.zeros(1, 8, 8, dtype=torch.bool)
    small[0, :1, :k] = True
    large = torch.zeros(1, 8, 8, dtype=torch.bool)
    large[0, :2 * k, :2 * k] = True
    torch.testing.assert_close(masked_mean_pool(feats, small), masked_mean_pool(feats, large))


def test_linearity_in_features():
    torch.manual_seed(3)
    masks = rasterize_masks(LabelSet([[0.1, 0.2, 0.6, 0.9]], [1]), [(6, 6)])[0]
    a, b = torch.randn(2, 4, 6, 6, dtype=torch.float64)
    torch.testing.assert_close(masked_mean_pool(2 * a - 3 * b, masks),
                               2 * masked_mean_pool(a, masks) - 3 * masked_mean_pool(b, masks))
