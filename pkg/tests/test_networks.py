import numpy as np
import pytest
import torch

from stylerecon import networks
from stylerecon.geometry import make_sphere_template


@pytest.fixture(scope="module")
def recon():
    return networks.build_reconstruction(32, 0).eval()


def rand_images(n, size=32, seed=0):
    return torch.rand(n, 4, size, size, generator=torch.Generator().manual_seed(seed))


def test_recon_output_dim(recon):
    assert recon.output_dim == 3 * 642 + 3
    assert recon(rand_images(2)).shape == (2, 1929)


def test_recon_parameter_count(recon):
    conv = (4 * 25 + 1) * 64 + (64 * 25 + 1) * 128 + (128 * 25 + 1) * 256 + 2 * (64 + 128 + 256)
    dims = [256 * 4 * 4, 1024, 1024, 512, 1024, 2048, 1929]
    fc = sum((a + 1) * b for a, b in zip(dims, dims[1:]))
    assert networks.count_parameters(recon) == conv + fc


def test_fresh_recon_within_deformation_bound(recon):
    v = recon.vertices(rand_images(3)).detach()
    assert (v - torch.as_tensor(make_sphere_template().vertices, dtype=v.dtype)).abs().max() <= 1.0


def test_recon_deterministic_in_eval(recon):
    x = rand_images(1)
    assert torch.equal(recon.vertices(x), recon.vertices(x.clone()))


def test_recon_batched_matches_looped(recon):
    x = rand_images(4, seed=3)
    batched = recon.vertices(x).detach()
    looped = torch.cat([recon.vertices(x[i:i + 1]).detach() for i in range(4)])
    torch.testing.assert_close(batched, looped, atol=1e-5, rtol=0)


def test_recon_rejects_wrong_input(recon):
    with pytest.raises(ValueError):
        recon(torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError):
        recon(torch.rand(1, 4, 64, 64))


@pytest.mark.parametrize("kind", ["i2r", "r2i"])
def test_translator_range_and_determinism(kind):
    net = networks.reinitialize(kind, 0).eval()
    x = rand_images(2)
    y = net(x)
    assert y.shape == x.shape
    assert y.min() >= 0 and y.max() <= 1
    assert torch.equal(y, net(x))


def test_translator_rejects_non_multiple_of_32():
    with pytest.raises(ValueError):
        networks.Translator()(torch.rand(1, 4, 48, 48))


def test_translator_parameter_count():
    enc = [(4, 64), (64, 128), (128, 256), (256, 512), (512, 512)]
    dec = [(512, 512), (1024, 256), (512, 128), (256, 64)]
    n = sum(a * b * 16 + b + 2 * b for a, b in enc + dec) + 128 * 4 * 16 + 4
    assert networks.count_parameters(networks.Translator()) == n


@pytest.mark.parametrize("kind", ["i2r", "r2i"])
def test_translator_receptive_field(kind):
    # perturbing one input pixel may only change outputs inside the computed window
    net = networks.reinitialize(kind, 1).eval()
    size, p = 256, 128
    x = rand_images(1, size)
    x2 = x.clone()
    x2[0, :, p, p] += 1.0
    with torch.no_grad():
        diff = (net(x2) - net(x)).abs().amax(dim=(0, 1))
    rows = torch.nonzero(diff.amax(1) > 0).flatten().tolist()
    cols = torch.nonzero(diff.amax(0) > 0).flatten().tolist()
    allowed = [o for o in range(size) if networks.Translator.input_window(o)[0] <= p
               <= networks.Translator.input_window(o)[1]]
    assert rows and set(rows) <= set(allowed) and set(cols) <= set(allowed)
    assert max(abs(o - p) for o in allowed) <= networks.Translator.receptive_radius()


def test_fresh_translator_output_std():
    net = networks.reinitialize("i2r", 0)
    with torch.no_grad():
        y = net(rand_images(8))
    std = y.transpose(0, 1).flatten(1).std(1)
    assert torch.all(std >= 0.01) and torch.all(std <= 0.5)


def test_discriminator_range():
    d = networks.reinitialize("D", 0).eval()
    s = d(rand_images(5))
    assert s.shape == (5,)
    assert torch.all((s > 0) & (s < 1))
    assert torch.equal(s, d(rand_images(5)))


def test_discriminator_learns_to_separate():
    g = torch.Generator().manual_seed(0)
    dark = torch.rand(16, 4, 32, 32, generator=g) * 0.3
    striped = torch.rand(16, 4, 32, 32, generator=g) * 0.3
    striped[..., ::4, :] += 0.7
    d = networks.reinitialize("D", 0)
    opt = torch.optim.Adam(d.parameters(), lr=1e-4)
    bce = torch.nn.functional.binary_cross_entropy
    for _ in range(200):
        opt.zero_grad()
        loss = bce(d(dark), torch.zeros(16)) + bce(d(striped), torch.ones(16))
        loss.backward()
        opt.step()
    d.eval()
    with torch.no_grad():
        assert float(d(striped).mean() - d(dark).mean()) > 0.3


def test_discriminator_parameter_count():
    assert networks.count_parameters(networks.Discriminator()) == 664_897


def test_init_seed_reproducible():
    a = networks.flat_parameters(networks.reinitialize("i2r", 5))
    b = networks.flat_parameters(networks.reinitialize("i2r", 5))
    c = networks.flat_parameters(networks.reinitialize("i2r", 6))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_reinitialize_unknown_kind():
    with pytest.raises(ValueError):
        networks.reinitialize("G", 0)


def test_check_image_batch_promotes_single():
    assert networks.check_image_batch(torch.zeros(4, 8, 8)).shape == (1, 4, 8, 8)
    with pytest.raises(TypeError):
        networks.check_image_batch(np.zeros((1, 4, 8, 8)))
