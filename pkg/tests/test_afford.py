import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from affordet.afford import AffordanceBranch, area_downsample, loss_aff, upsample_probs


def branch(a=7):
    return AffordanceBranch((8, 8, 16), a, channels=8, hidden=8)


def levels(n=1, size=256, fill=None):
    shapes = [(8, size // 8), (8, size // 16), (16, size // 32)]
    if fill is None:
        return [torch.rand(n, c, s, s) for c, s in shapes]
    return [torch.full((n, c, s, s), fill) for c, s in shapes]


def test_shapes():
    out = branch()(levels())
    assert out.logits.shape == (1, 7, 32, 32)
    full = out.probabilities(256)
    assert full.shape == (1, 7, 256, 256)


def test_zero_features_give_constant_map():
    net = branch(3).eval()
    out = net(levels(fill=0.0)).logits
    bias_only = net.mlp(torch.zeros(1, 8, 1, 1) + net.act(net.bn(torch.zeros(1, 8, 1, 1))))
    assert torch.allclose(out, bias_only.expand_as(out), atol=1e-6)
    assert torch.allclose(out, out[..., :1, :1].expand_as(out))


def test_output_range_and_finiteness():
    out = branch()(levels(2)).logits * 50
    p = upsample_probs(out, 64)
    assert torch.isfinite(p).all()
    assert (p >= 0).all() and (p <= 1).all()
    p32 = upsample_probs(branch()(levels(1)).logits.double(), 128)
    assert (p32 > 0).all() and (p32 < 1).all()


def test_loss_values():
    a = torch.full((1, 2, 4, 4), 0.5, dtype=torch.float64)
    assert float(loss_aff(torch.zeros_like(a), a)) == pytest.approx(math.log(2), abs=1e-12)
    hard = torch.randint(0, 2, (1, 2, 4, 4)).double()
    z = (hard * 2 - 1) * 60
    assert float(loss_aff(z, hard)) < 1e-20


def test_loss_gradient_identity():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    a = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    loss_aff(z, a).backward()
    assert torch.allclose(z.grad, (torch.sigmoid(z) - a) / z.numel(), atol=1e-14)


def test_loss_optimum_is_entropy_floor():
    g = torch.Generator().manual_seed(1)
    a = torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64) * 0.8 + 0.1
    z = torch.zeros_like(a, requires_grad=True)
    opt = torch.optim.SGD([z], lr=20.0)
    for _ in range(500):
        opt.zero_grad()
        loss_aff(z, a).backward()
        opt.step()
    floor = -(a * a.log() + (1 - a) * (1 - a).log()).mean()
    assert float(loss_aff(z, a).detach()) == pytest.approx(float(floor), abs=1e-8)
    assert torch.allclose(torch.sigmoid(z), a, atol=1e-4)


def test_loss_mask_and_shape_check():
    z = torch.zeros(1, 1, 2, 2)
    a = torch.tensor([[[[1.0, 0.0], [0.5, 0.5]]]])
    mask = torch.tensor([[[[False, False], [True, True]]]])
    assert float(loss_aff(z, a, mask=mask)) == pytest.approx(math.log(2))
    assert float(loss_aff(z, a, mask=torch.zeros_like(mask))) == 0.0
    with pytest.raises(ValueError):
        loss_aff(z, torch.zeros(1, 1, 4, 4))


@given(st.integers(1, 4), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_area_downsample_preserves_block_means(a, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(1, a, 16, 16, generator=g, dtype=torch.float64)
    d = area_downsample(m, 8)
    assert d.shape == (1, a, 2, 2)
    assert torch.allclose(d[0, :, 1, 0], m[0, :, 8:, :8].mean((-1, -2)))
    assert torch.allclose(d.mean(), m.mean())
