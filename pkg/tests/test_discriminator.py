import pytest
import torch

from trigan.discriminator import (Discriminator, DiscriminatorConfig, effective_spectral_norms,
                                  spectral_normalize)


def make(seed=0, **kw):
    D = Discriminator(DiscriminatorConfig(**{"channels": (8, 16), **kw}), torch.Generator().manual_seed(seed))
    D.power_iterate(20)  # frozen forwards reuse the current estimate, so settle it first
    return D


def images(m=4, seed=1, size=16):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(m, 3, size, size, generator=g) * 2 - 1


def test_power_iteration_converges_on_diagonal(f64):
    w = torch.diag(torch.tensor([3.0, 1.0]))
    u = torch.tensor([0.6, 0.8])
    v = torch.tensor([0.8, 0.6])
    out = spectral_normalize(w, u, v, iterations=50)
    assert torch.allclose(out, torch.diag(torch.tensor([1.0, 1.0 / 3.0])), atol=1e-10)
    assert torch.allclose(u.abs(), torch.tensor([1.0, 0.0]), atol=1e-10)


def test_no_update_leaves_vectors(f64):
    w = torch.randn(3, 4)
    u, v = torch.nn.functional.normalize(torch.randn(3), dim=0), torch.nn.functional.normalize(torch.randn(4), dim=0)
    u0, v0 = u.clone(), v.clone()
    spectral_normalize(w, u, v, update=False)
    assert torch.equal(u, u0) and torch.equal(v, v0)


def test_zero_weight_stays_zero():
    u, v = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    assert torch.equal(spectral_normalize(torch.zeros(2, 2), u, v), torch.zeros(2, 2))


def test_effective_norms_near_one_after_iteration():
    D = make()
    D.power_iterate(100)
    for name, s in effective_spectral_norms(D).items():
        assert abs(s - 1.0) < 1e-3, name


def test_score_shape_and_label_dependence():
    D = make()
    x = images()
    a = D(x, torch.tensor([0, 1, 2, 0]))
    assert a.shape == (4,)
    with D.frozen_spectral():
        b = D(x, torch.tensor([0, 1, 2, 0]))
        c = D(x, torch.tensor([1, 1, 2, 0]))
    assert torch.equal(b[1:], c[1:])
    assert not torch.equal(b[0], c[0])


def test_scores_are_per_image():
    D = make()
    x = images()
    l = torch.tensor([0, 1, 2, 0])
    with D.frozen_spectral():
        full = D(x, l)
        single = torch.cat([D(x[i:i + 1], l[i:i + 1]) for i in range(4)])
    assert torch.allclose(full, single, atol=1e-5)


def test_positive_homogeneity_at_init():
    # zero biases and piecewise-linear layers make the score 1-homogeneous
    D = make()
    x, l = images(), torch.tensor([0, 1, 2, 0])
    with D.frozen_spectral():
        assert torch.allclose(D(2.5 * x, l), 2.5 * D(x, l), rtol=1e-4, atol=1e-5)


def test_unknown_label_raises():
    D = make()
    with pytest.raises(KeyError):
        D(images(), torch.tensor([0, 1, 3, 0]))


def test_gradients_reach_images_and_weights():
    D = make()
    x = images().requires_grad_()
    D(x, torch.tensor([0, 1, 2, 0])).sum().backward()
    assert x.grad.abs().sum() > 0
    for name, p in D.named_parameters():
        if "bias" in name:
            continue
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_frozen_forward_leaves_buffers():
    D = make()
    before = {k: v.clone() for k, v in D.state_dict().items() if "sn_" in k}
    with D.frozen_spectral():
        D(images(), torch.zeros(4, dtype=torch.long))
    assert all(torch.equal(before[k], D.state_dict()[k]) for k in before)
    D(images(), torch.zeros(4, dtype=torch.long))
    assert any(not torch.equal(before[k], D.state_dict()[k]) for k in before)
