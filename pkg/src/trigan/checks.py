"""Registered finite-difference gradient checks, run at 64-bit precision.

Every check builds small random inputs, scalarizes the op's output with a
fixed random projection and returns ``diffcore.grad_check``'s max relative
error.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import torch

from . import diffcore as dc
from . import wctransforms as wt
from .discriminator import Discriminator, DiscriminatorConfig, spectral_normalize
from .generator import Generator, GeneratorConfig


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


REGISTRY: dict[str, tuple[Callable[[torch.Generator], float], float]] = {}


def register(name: str, threshold: float = 1e-4):
    def deco(fn):
        REGISTRY[name] = (fn, threshold)
        return fn
    return deco


@contextlib.contextmanager
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def _proj(out: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    return torch.randn(out.shape, generator=g)


def _scalar(fn, g: torch.Generator, *example):
    """Wrap ``fn`` so its output is reduced by a fixed random projection."""
    w = _proj(fn(*example), g)
    return lambda *xs: (fn(*xs) * w).sum()


# float64 leaves room for a small step; whitening layers curve too sharply for 1e-4
FD_STEP = 1e-6


def _run(fn, g, *inputs) -> float:
    return dc.grad_check(_scalar(fn, g, *inputs), inputs, eps=FD_STEP)


def _r(g, *shape):
    return torch.randn(*shape, generator=g)


def _spd(g, d):
    m = _r(g, d, d)
    return m @ m.T + torch.eye(d)


# -- primitive ops --------------------------------------------------------------------


@register("conv2d")
def _conv(g):
    return _run(lambda x, w, b: dc.conv2d(x, w, b), g, _r(g, 2, 3, 5, 5), _r(g, 4, 3, 3, 3), _r(g, 4))


@register("linear")
def _linear(g):
    return _run(dc.linear, g, _r(g, 3, 5), _r(g, 4, 5), _r(g, 4))


@register("relu")
def _relu(g):
    return _run(dc.relu, g, _r(g, 2, 3, 4, 4))


@register("leaky_relu")
def _leaky(g):
    return _run(dc.leaky_relu, g, _r(g, 2, 3, 4, 4))


@register("avg_pool_2x2")
def _pool(g):
    return _run(dc.avg_pool_2x2, g, _r(g, 2, 3, 6, 6))


@register("upsample_nearest_2x")
def _up(g):
    return _run(dc.upsample_nearest_2x, g, _r(g, 2, 3, 3, 3))


@register("add")
def _add(g):
    return _run(dc.add, g, _r(g, 2, 3, 4), _r(g, 2, 3, 4))


@register("elementwise_mul")
def _mul(g):
    return _run(dc.elementwise_mul, g, _r(g, 2, 3, 4), _r(g, 2, 3, 4))


@register("mean_over")
def _mean(g):
    return _run(lambda x: dc.mean_over(x, (2, 3)), g, _r(g, 2, 3, 4, 4))


@register("matmul")
def _matmul(g):
    return _run(dc.matmul, g, _r(g, 3, 4), _r(g, 4, 5))


@register("concat")
def _concat(g):
    return _run(lambda a, b: dc.concat([a, b], 1), g, _r(g, 2, 3, 4), _r(g, 2, 2, 4))


@register("cholesky")
def _chol(g):
    a0 = _spd(g, 4)
    # differentiate through a symmetric parametrization so perturbations stay SPD
    return _run(lambda e: dc.cholesky(a0 + 0.1 * (e + e.T)), g, torch.zeros(4, 4))


@register("triangular_inverse")
def _trinv(g):
    base = torch.tril(_r(g, 4, 4), -1) + torch.diag(torch.rand(4, generator=g) + 1.0)
    mask = torch.tril(torch.ones(4, 4))
    return _run(lambda e: dc.triangular_inverse(base + e * mask), g, torch.zeros(4, 4))


@register("affine_grid_sample")
def _warp(g):
    theta = torch.tensor([[[0.9, -0.2, 0.1], [0.25, 1.05, -0.05]], [[1.1, 0.1, 0.0], [0.0, 0.95, 0.12]]])
    return _run(lambda x: dc.affine_grid_sample(x, theta), g, _r(g, 2, 2, 6, 5))


# -- whitening and coloring -------------------------------------------------------------------


def _batch(x, l, lo=None):
    return wt.FeatureBatch(x, l, lo)


@register("whiten_stats")
def _whiten(g):
    def f(v):
        return wt.whiten(v, wt.compute_whitening_stats(v, eps=1e-3, groups=2))
    return _run(f, g, _r(g, 12, 4))


@register("color")
def _color(g):
    return _run(lambda x, b, G_: wt.color(x, wt.ColoringParams(b, G_)), g, _r(g, 2, 3, 4, 4), _r(g, 3), _r(g, 3, 3))


def _labels():
    return torch.tensor([0, 1, 0, 1]), torch.tensor([1, 1, 0, 0])


@register("iwt")
def _iwt(g):
    l, _ = _labels()
    return _run(lambda x, b, G_: wt.iwt(_batch(x, l), wt.ColoringParams(b, G_)), g,
                _r(g, 4, 3, 3, 3), _r(g, 3), _r(g, 3, 3))


@register("dwt")
def _dwt(g):
    l, _ = _labels()
    return _run(lambda x, b, G_: wt.dwt(_batch(x, l), wt.ColoringParams(b, G_), groups=1), g,
                _r(g, 4, 4, 2, 2), _r(g, 4), _r(g, 4, 4))


@register("cdwt")
def _cdwt(g):
    l, lo = _labels()
    return _run(lambda x, b, G_: wt.cdwt(_batch(x, l, lo), wt.ColoringParams(b, G_)), g,
                _r(g, 4, 3, 2, 2), _r(g, 2, 3), _r(g, 2, 3, 3))


@register("ada_iwt")
def _ada(g):
    l, _ = _labels()
    return _run(lambda x, b, G_: wt.ada_iwt(_batch(x, l), wt.ColoringParams(b, G_)), g,
                _r(g, 4, 3, 3, 3), _r(g, 4, 3), _r(g, 4, 3, 3))


@register("wc")
def _wc(g):
    l, _ = _labels()
    return _run(lambda x: wt.wc(_batch(x, l), wt.ColoringParams(torch.zeros(3), torch.eye(3))), g, _r(g, 4, 3, 2, 2))


@register("in_norm")
def _in(g):
    l, _ = _labels()
    return _run(lambda x, b, s: wt.in_norm(_batch(x, l), wt.ColoringParams(b, s)), g, _r(g, 4, 3, 3, 3), _r(g, 3), _r(g, 3))


@register("bn_norm")
def _bn(g):
    l, _ = _labels()
    return _run(lambda x, b, s: wt.bn_norm(_batch(x, l), wt.ColoringParams(b, s)), g, _r(g, 4, 3, 2, 2), _r(g, 3), _r(g, 3))


@register("cbn_norm")
def _cbn(g):
    l, lo = _labels()
    return _run(lambda x, b, s: wt.cbn_norm(_batch(x, l, lo), wt.ColoringParams(b, s)), g,
                _r(g, 4, 3, 2, 2), _r(g, 2, 3), _r(g, 2, 3))


@register("ada_in")
def _adain(g):
    l, _ = _labels()
    return _run(lambda x, b, s: wt.ada_in(_batch(x, l), wt.ColoringParams(b, s)), g,
                _r(g, 4, 3, 3, 3), _r(g, 4, 3), _r(g, 4, 3))


# -- networks ------------------------------------------------------------------------------


def tiny_generator(g: torch.Generator, **kw) -> Generator:
    cfg = GeneratorConfig(num_domains=2, image_size=8, stem_channels=4, iwt_channels=(8, 8), ada_channels=(8, 4),
                          mlp_hidden=(8, 8, 8, 8), max_group=8, **kw)
    return Generator(cfg, g)


@register("generator", threshold=1e-3)
def _gen(g):
    G = tiny_generator(g)
    l, lo = _labels()
    xs = torch.rand(4, 3, 8, 8, generator=g) * 2 - 1
    return _run(lambda x: G(x, l, lo, xs), g, torch.rand(4, 3, 8, 8, generator=g) * 2 - 1)


@register("generator_params", threshold=1e-3)
def _gen_params(g):
    G = tiny_generator(g)
    l, lo = _labels()
    x = torch.rand(4, 3, 8, 8, generator=g) * 2 - 1
    xs = torch.rand(4, 3, 8, 8, generator=g) * 2 - 1
    beta, gamma = G.dec.cdwt.norm1.beta, G.dec.cdwt.norm1.gamma
    w0 = G.enc.iwt1.conv.weight

    # route the inputs into the module's parameters via a functional call
    def fc(b, gm, w):
        params = dict(G.named_parameters())
        params.update({"dec.cdwt.norm1.beta": b, "dec.cdwt.norm1.gamma": gm, "enc.iwt1.conv.weight": w})
        return torch.func.functional_call(G, params, (x, l, lo, xs))

    return _run(fc, g, beta.detach().clone(), gamma.detach().clone(), w0.detach().clone())


@register("spectral_normalize")
def _sn(g):
    u = torch.nn.functional.normalize(_r(g, 4), dim=0)
    v = torch.nn.functional.normalize(_r(g, 6), dim=0)
    return _run(lambda w: spectral_normalize(w, u, v, update=False), g, _r(g, 4, 6))


@register("d_score", threshold=1e-3)
def _dscore(g):
    D = Discriminator(DiscriminatorConfig(num_domains=2, channels=(4, 8)), g)
    D.power_iterate(5)
    l, _ = _labels()
    with D.frozen_spectral():
        return _run(lambda x: D(x, l), g, torch.rand(4, 3, 8, 8, generator=g) * 2 - 1)


def run_checks(names: list[str] | None = None, seed: int = 0) -> list[CheckResult]:
    results = []
    with float64():
        for name in names or list(REGISTRY):
            fn, thr = REGISTRY[name]
            t = time.perf_counter()
            err = fn(torch.Generator().manual_seed(seed))
            results.append(CheckResult(name, err, thr, time.perf_counter() - t))
    return results
