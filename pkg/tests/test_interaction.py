import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from faultdistill.config import ConfigError
from faultdistill.interaction import AttentionConfig, InteractionEncoder, interact, stable_softmax

from oracles import fd_check, loop_attention


def encoder(c=8, heads=2, seed=0):
    torch.manual_seed(seed)
    return InteractionEncoder(AttentionConfig(c, heads)).double()


def weights(enc):
    return [t.detach().numpy() for lin in (enc.q, enc.k, enc.v, enc.out) for t in (lin.weight, lin.bias)]


def test_single_label_gives_value_row():
    enc = encoder()
    with torch.no_grad():
        enc.out.weight.copy_(torch.eye(8))
        enc.out.bias.zero_()
    a = torch.randn(4, 8, dtype=torch.float64)
    l = torch.randn(1, 8, dtype=torch.float64)
    out = interact(a, l, enc)
    v = enc.v(l)
    torch.testing.assert_close(out, v.expand(4, 8), rtol=0, atol=1e-12)


def test_identical_labels_swap_invariant():
    enc = encoder()
    a = torch.randn(3, 8, dtype=torch.float64)
    row = torch.randn(1, 8, dtype=torch.float64)
    l = torch.cat([row, row, torch.randn(1, 8, dtype=torch.float64)])
    torch.testing.assert_close(interact(a, l, enc), interact(a, l[[1, 0, 2]], enc), rtol=0, atol=1e-12)


def test_matches_loop_oracle_heads2_c4_n3():
    enc = encoder(4, 2, seed=5)
    a = torch.randn(4, 4, dtype=torch.float64)
    l = torch.randn(3, 4, dtype=torch.float64)
    ref = loop_attention(a.numpy(), l.numpy(), *weights(enc), heads=2)
    np.testing.assert_allclose(interact(a, l, enc).detach().numpy(), ref, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(heads=st.sampled_from([1, 2, 4]), m=st.integers(1, 5), n=st.integers(1, 5),
       seed=st.integers(0, 10_000), data=st.data())
def test_permutation_properties(heads, m, n, seed, data):
    enc = encoder(8, heads, seed)
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(m, 8, generator=g, dtype=torch.float64)
    l = torch.randn(n, 8, generator=g, dtype=torch.float64)
    base = interact(a, l, enc)
    pl = data.draw(st.permutations(range(n)))
    pa = data.draw(st.permutations(range(m)))
    torch.testing.assert_close(interact(a, l[list(pl)], enc), base, rtol=0, atol=1e-12)
    torch.testing.assert_close(interact(a[list(pa)], l, enc), base[list(pa)], rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        interact(a, l, enc).detach().numpy(), loop_attention(a.numpy(), l.numpy(), *weights(enc), heads), atol=1e-6)
    attn = enc.attention(a, l)
    assert attn.shape == (heads, m, n)
    torch.testing.assert_close(attn.sum(-1), torch.ones(heads, m, dtype=torch.float64), rtol=0, atol=1e-6)


def test_stable_softmax_large_logits():
    x = torch.tensor([[1e4, -1e4, 0.0], [1e4, 1e4 - 1, -1e4]], dtype=torch.float32)
    p = stable_softmax(x)
    assert torch.isfinite(p).all()
    torch.testing.assert_close(p.sum(-1), torch.ones(2))
    enc = encoder(4, 1)
    with torch.no_grad():
        enc.q.weight.mul_(1e4)
    out = interact(torch.randn(2, 4, dtype=torch.float64) * 100, torch.randn(3, 4, dtype=torch.float64), enc)
    assert torch.isfinite(out).all()


def test_empty_labels_use_null_entry():
    enc = encoder()
    a = torch.randn(1, 8, dtype=torch.float64)
    out = interact(a, torch.zeros(0, 8, dtype=torch.float64), enc)
    torch.testing.assert_close(out, interact(a, enc.null_label, enc))


def test_config_errors():
    with pytest.raises(ConfigError):
        AttentionConfig(6, 4)
    with pytest.raises(ConfigError):
        interact(torch.zeros(2, 6, dtype=torch.float64), torch.zeros(1, 8, dtype=torch.float64), encoder())


def test_scale_uses_head_width():
    assert AttentionConfig(64, 4).scale == pytest.approx(1 / 4)


@pytest.mark.parametrize("c,heads,m,n", [(4, 2, 4, 3), (8, 4, 2, 1), (6, 3, 3, 5)])
def test_gradients(c, heads, m, n):
    enc = encoder(c, heads, seed=c + n)
    a = torch.randn(m, c, dtype=torch.float64, requires_grad=True)
    l = torch.randn(n, c, dtype=torch.float64, requires_grad=True)
    w = torch.randn(m, c, dtype=torch.float64)
    assert fd_check(lambda: (interact(a, l, enc) * w).sum(), [a, l, *enc.parameters()]) < 1e-4
