import pytest
import torch

from trigan.generator import Generator, GeneratorConfig, domain_param_count

SMALL = dict(image_size=16, stem_channels=4, iwt_channels=(8, 16), ada_channels=(8, 4),
             mlp_hidden=(16, 16), max_group=8)


def make(seed=0, **kw):
    cfg = GeneratorConfig(**{**SMALL, **kw})
    return Generator(cfg, torch.Generator().manual_seed(seed))


def inputs(m=6, k=3, seed=1, size=16):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(m, 3, size, size, generator=g) * 2 - 1
    xs = torch.rand(m, 3, size, size, generator=g) * 2 - 1
    l = torch.arange(m) % k
    lo = (torch.arange(m) + 1) % k
    return x, xs, l, lo


def test_output_shape_and_range():
    G = make()
    x, xs, l, lo = inputs()
    out = G(x, l, lo, xs)
    assert out.shape == x.shape
    assert out.abs().max() <= 1.0


def test_default_config_runs_at_32px():
    G = Generator(GeneratorConfig(), torch.Generator().manual_seed(0))
    x, xs, l, lo = inputs(m=4, size=32)
    assert G(x, l, lo, xs).shape == (4, 3, 32, 32)


def test_style_path_shares_encoder_convs_by_reference():
    G = make()
    enc_convs = [G.enc.conv0, G.enc.iwt1.conv, G.enc.iwt2.conv]
    assert all(a is b for a, b in zip(G.shared_style_convs, enc_convs))
    ids = [id(p) for p in G.parameters()]
    assert len(ids) == len(set(ids))
    # no convolution lives inside the style MLP
    assert not any(isinstance(m, torch.nn.Conv2d) for m in G.style.modules())


def test_self_style_matches_precomputed_style():
    G = make()
    x, _, l, lo = inputs()
    a = G(x, l, lo, x)
    b = G(x, l, lo, style=G.style_params(x))
    assert torch.allclose(a, b, atol=1e-5)


def test_every_parameter_receives_gradient():
    G = make()
    x, xs, l, lo = inputs()
    G(x, l, lo, xs).square().sum().backward()
    for name, p in G.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_unused_output_domain_params_get_zero_gradient():
    G = make()
    x, xs, l, _ = inputs()
    lo = torch.zeros(6, dtype=torch.long)
    G(x, l, lo, xs).sum().backward()
    g = G.dec.cdwt.norm1.gamma.grad
    assert g[0].abs().sum() > 0
    assert g[1:].abs().sum() == 0


def test_domain_params_grow_linearly():
    counts = [domain_param_count(make(num_domains=k)) for k in (2, 3, 4, 5)]
    diffs = {b - a for a, b in zip(counts, counts[1:])}
    assert len(diffs) == 1 and diffs.pop() > 0
    totals = [sum(p.numel() for p in make(num_domains=k).parameters()) for k in (2, 3, 4)]
    assert totals[1] - totals[0] == totals[2] - totals[1] == counts[1] - counts[0]


def test_deterministic_given_seed():
    x, xs, l, lo = inputs()
    a, b = make(seed=5), make(seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert torch.equal(a(x, l, lo, xs), b(x, l, lo, xs))
    c = make(seed=6)
    assert not torch.equal(a(x, l, lo, xs), c(x, l, lo, xs))


def test_style_changes_output():
    G = make()
    x, xs, l, lo = inputs()
    assert not torch.allclose(G(x, l, lo, xs), G(x, l, lo, xs.flip(0)))


def test_output_domain_changes_output():
    G = make()
    with torch.no_grad():
        G.dec.cdwt.norm1.beta[1] += 1.0
    x, xs, l, _ = inputs()
    a = G(x, l, torch.zeros(6, dtype=torch.long), xs)
    b = G(x, l, torch.ones(6, dtype=torch.long), xs)
    assert not torch.allclose(a, b)


@pytest.mark.parametrize("kw", [
    dict(style_norm="in", domain_norm="bn", cond_norm="cbn", ada_norm="adain"),
    dict(style_norm="dwt", ada_norm="cdwt", style_mode="none"),
    dict(style_mode="direct", ada_channels=(16, 8)),
    dict(domain_norm="wc", cond_norm="wc"),
])
def test_ablation_configs_run(kw):
    G = make(**kw)
    x, xs, l, lo = inputs()
    out = G(x, l, lo, None if kw.get("style_mode") == "none" else xs)
    assert out.shape == x.shape and torch.isfinite(out).all()


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        GeneratorConfig(style_norm="zca")
    with pytest.raises(ValueError):
        make()(*inputs()[:1], torch.zeros(6, dtype=torch.long), torch.zeros(6, dtype=torch.long))
