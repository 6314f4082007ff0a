import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylerecon import losses
from stylerecon.losses import LossWeights


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_discriminator_loss_perfect_discrimination():
    val = losses.loss_discriminator(t([1e-7]), t([1 - 1e-7]))
    assert float(val) == pytest.approx(0.0, abs=1e-6)


def test_discriminator_loss_chance_level():
    assert float(losses.loss_discriminator(t([0.5]), t([0.5]))) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_discriminator_loss_gradient_matches_finite_differences():
    r = t([0.3, 0.6, 0.8]).requires_grad_(True)
    s = t([0.2, 0.55, 0.9]).requires_grad_(True)
    losses.loss_discriminator(r, s).backward()
    h = 1e-6
    for vec, grad in ((r, r.grad), (s, s.grad)):
        for i in range(3):
            up, dn = vec.detach().clone(), vec.detach().clone()
            up[i] += h
            dn[i] -= h
            args_up = (up, s.detach()) if vec is r else (r.detach(), up)
            args_dn = (dn, s.detach()) if vec is r else (r.detach(), dn)
            fd = (losses.loss_discriminator(*args_up) - losses.loss_discriminator(*args_dn)) / (2 * h)
            assert float(grad[i]) == pytest.approx(float(fd), abs=1e-5)


def test_style_loss_values():
    assert float(losses.loss_style(t([0.5]))) == pytest.approx(math.log(0.5), abs=1e-12)
    assert float(losses.loss_style(t([1.0]))) == pytest.approx(math.log(losses.SCORE_EPS), rel=1e-6)


def test_style_loss_monotone_decreasing():
    scores = np.linspace(0.05, 0.95, 10)
    vals = [float(losses.loss_style(t([s]))) for s in scores]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_relaxed_jaccard_identities():
    a = (torch.rand(4, 8, 8, generator=torch.Generator().manual_seed(0)) > 0.5).double()
    a[:, 0, 0] = 1
    assert torch.allclose(losses.relaxed_jaccard(a, a), torch.ones(4, dtype=torch.float64))
    assert float(losses.relaxed_jaccard(a, 1 - a).max()) == 0.0


def test_relaxed_jaccard_constant_half():
    half = torch.full((6, 6), 0.5, dtype=torch.float64)
    assert abs(float(losses.relaxed_jaccard(half, half)) - 1.0 / 3.0) <= 1e-9


def test_relaxed_jaccard_empty_union_is_zero():
    z = torch.zeros(3, 3)
    assert float(losses.relaxed_jaccard(z, z)) == 0.0


def test_relaxed_jaccard_shape_mismatch():
    with pytest.raises(ValueError):
        losses.relaxed_jaccard(torch.zeros(2, 3), torch.zeros(3, 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relaxed_jaccard_equals_binary_iou(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((9, 7)) < rng.random()
    b = rng.random((9, 7)) < rng.random()
    union = np.logical_or(a, b).sum()
    expected = np.logical_and(a, b).sum() / union if union else 0.0
    assert float(losses.relaxed_jaccard(t(a.astype(float)), t(b.astype(float)))) == expected


def _alpha_pair(j):
    # alpha maps with relaxed Jaccard exactly j: a covers n pixels, b covers k of them
    n = 100
    k = int(round(j * n))
    a = torch.zeros(1, 4, 10, 10, dtype=torch.float64)
    b = torch.zeros_like(a)
    a[0, 3].view(-1)[:n] = 1
    b[0, 3].view(-1)[:k] = 1
    return a, b


def test_jaccard_hinge_values():
    a, b = _alpha_pair(0.05)
    assert abs(float(losses.loss_jaccard(a, b, 0.25)) - 0.20) <= 1e-9
    a, b = _alpha_pair(0.3)
    assert float(losses.loss_jaccard(a, b, 0.25)) == 0.0
    assert float(losses.loss_jaccard(a, a, 0.25)) == 0.0


def test_huber_branches():
    x = torch.zeros(2, 4, 3, 3, dtype=torch.float64)
    assert float(losses.loss_cycle(x, x)) == 0.0
    assert abs(float(losses.loss_cycle(x, x + 0.5)) - 0.125) <= 1e-9
    assert abs(float(losses.loss_cycle(x, x + 2.0)) - 1.5) <= 1e-9


def test_huber_continuous_at_threshold():
    d = t([1.0 - 1e-9, 1.0 + 1e-9])
    a, b = losses.huber(d, 1.0)
    assert float(a) == pytest.approx(float(b), abs=1e-8)


def test_reconstruction_loss_zero_and_additive():
    g = torch.Generator().manual_seed(1)
    rx, ry = torch.rand(3, 4, 8, 8, generator=g), torch.rand(3, 4, 8, 8, generator=g)
    assert float(losses.loss_reconstruction(rx, rx, ry, ry)) == 0.0
    ty = torch.rand(3, 4, 8, 8, generator=g)
    single = losses.huber(ry - ty).flatten(1).mean(1).mean()
    assert float(losses.loss_reconstruction(rx, rx, ry, ty)) == pytest.approx(float(single), rel=1e-6)


def test_reconstruction_loss_symmetric_in_view_roles():
    g = torch.Generator().manual_seed(2)
    pairs = [tuple(torch.rand(2, 4, 8, 8, generator=g) for _ in range(4)) for _ in range(5)]
    fwd = np.mean([float(losses.loss_reconstruction(a, b, c, d)) for a, b, c, d in pairs])
    bwd = np.mean([float(losses.loss_reconstruction(c, d, a, b)) for a, b, c, d in pairs])
    assert fwd == pytest.approx(bwd, rel=1e-6)


def test_combined_losses():
    assert losses.combined_translator_losses(0.0, 0.0, 0.0) == (0.0, 0.0)
    l_i2r, l_r2i = losses.combined_translator_losses(0.01, -0.5, 0.0, LossWeights(style_w=1, content_w=400))
    assert l_i2r == pytest.approx(3.5, abs=1e-12)
    assert l_r2i == pytest.approx(4.0, abs=1e-12)
    _, other = losses.combined_translator_losses(0.01, 7.0, 3.0)
    assert other == l_r2i


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(jaccard_delta=1.5)
    with pytest.raises(ValueError):
        LossWeights(content_w=-1)
