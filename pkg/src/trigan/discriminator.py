"""Projection discriminator with spectrally normalized weights.

score(x, l) = psi(phi(x)) + <embed(l), phi(x)>, where phi is two residual
downsampling blocks with 1x1 projection shortcuts followed by ReLU and global
sum pooling. Every conv, linear and embedding weight is divided by a power
iteration estimate of its largest singular value on each forward.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import diffcore as dc


@dataclass
class DiscriminatorConfig:
    num_domains: int = 3
    channels: tuple[int, int] = (64, 128)
    image_channels: int = 3
    power_iterations: int = 1
    sn_eps: float = 1e-12

    def __post_init__(self):
        self.channels = tuple(self.channels)

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]


def _normalize(v: Tensor, eps: float) -> Tensor:
    return v / (v.norm() + eps)


def spectral_normalize(weight: Tensor, u: Tensor, v: Tensor, iterations: int = 1,
                       eps: float = 1e-12, update: bool = True) -> Tensor:
    """Return ``weight / sigma`` with sigma = u^T W v after power iteration.

    ``weight`` is viewed as [rows, -1]. ``u`` and ``v`` are updated in place
    when ``update`` is set and never carry gradient; sigma itself stays
    differentiable w.r.t. ``weight``. A zero matrix yields a zero weight.
    """
    mat = weight.reshape(weight.shape[0], -1)
    if update:
        with torch.no_grad():
            for _ in range(iterations):
                v.copy_(_normalize(mat.t() @ u, eps))
                u.copy_(_normalize(mat @ v, eps))
    # clones: later in-place updates must not invalidate this graph
    sigma = torch.dot(u.clone(), mat @ v.clone())
    return weight / sigma.clamp_min(eps)


class SpectralNorm(nn.Module):
    """A weight plus its persisted singular-vector estimates (u, v)."""

    def __init__(self, weight: Tensor, iterations: int, eps: float, generator: torch.Generator | None):
        super().__init__()
        self.weight = nn.Parameter(weight)
        rows = weight.shape[0]
        cols = weight.numel() // rows
        self.register_buffer("sn_u", _normalize(torch.randn(rows, generator=generator), eps))
        self.register_buffer("sn_v", _normalize(torch.randn(cols, generator=generator), eps))
        self.iterations = iterations
        self.eps = eps
        self.frozen = False

    def effective(self) -> Tensor:
        return spectral_normalize(self.weight, self.sn_u, self.sn_v, self.iterations, self.eps,
                                  update=not self.frozen)


class SNConv(SpectralNorm):
    def __init__(self, cin, cout, k, iterations, eps, generator):
        bound = math.sqrt(6.0 / (cin * k * k))
        w = (torch.rand(cout, cin, k, k, generator=generator) * 2 - 1) * bound
        super().__init__(w, iterations, eps, generator)
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.effective(), self.bias)


class SNLinear(SpectralNorm):
    def __init__(self, din, dout, iterations, eps, generator):
        bound = math.sqrt(6.0 / din)
        super().__init__((torch.rand(dout, din, generator=generator) * 2 - 1) * bound, iterations, eps, generator)
        self.bias = nn.Parameter(torch.zeros(dout))

    def forward(self, x: Tensor) -> Tensor:
        return dc.linear(x, self.effective(), self.bias)


class SNEmbedding(SpectralNorm):
    def __init__(self, num, dim, iterations, eps, generator):
        bound = math.sqrt(6.0 / (num + dim))
        super().__init__((torch.rand(num, dim, generator=generator) * 2 - 1) * bound, iterations, eps, generator)

    def forward(self, labels: Tensor) -> Tensor:
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= self.weight.shape[0]):
            raise KeyError(f"domain label out of range [0, {self.weight.shape[0]})")
        return F.embedding(labels, self.effective())


class DBlock(nn.Module):
    """Residual downsampling block with a 1x1 projection shortcut."""

    def __init__(self, cin, cout, first: bool, iterations, eps, generator):
        super().__init__()
        self.first = first
        self.conv1 = SNConv(cin, cout, 3, iterations, eps, generator)
        self.conv2 = SNConv(cout, cout, 3, iterations, eps, generator)
        self.shortcut = SNConv(cin, cout, 1, iterations, eps, generator)

    def forward(self, x: Tensor) -> Tensor:
        h = x if self.first else dc.relu(x)
        h = self.conv2(dc.relu(self.conv1(h)))
        h = dc.avg_pool_2x2(h)
        if self.first:
            s = self.shortcut(dc.avg_pool_2x2(x))
        else:
            s = dc.avg_pool_2x2(self.shortcut(x))
        return dc.add(h, s)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.channels
        it, eps = cfg.power_iterations, cfg.sn_eps
        self.block1 = DBlock(cfg.image_channels, c1, True, it, eps, generator)
        self.block2 = DBlock(c1, c2, False, it, eps, generator)
        self.head = SNLinear(c2, 1, it, eps, generator)
        self.embed = SNEmbedding(cfg.num_domains, cfg.embed_dim, it, eps, generator)

    def features(self, x: Tensor) -> Tensor:
        h = self.block2(self.block1(x))
        return dc.relu(h).sum(dim=(2, 3))

    def forward(self, x: Tensor, labels: Tensor) -> Tensor:
        """Per-image scores [m]."""
        h = self.features(x)
        proj = (self.embed(labels) * h).sum(dim=1)
        return dc.check_finite(self.head(h).squeeze(1) + proj, "discriminator")

    d_score = forward

    def spectral_layers(self) -> list[SpectralNorm]:
        return [m for m in self.modules() if isinstance(m, SpectralNorm)]

    def power_iterate(self, n: int) -> None:
        """Run ``n`` power iterations on every weight without a forward pass."""
        with torch.no_grad():
            for layer in self.spectral_layers():
                spectral_normalize(layer.weight, layer.sn_u, layer.sn_v, n, layer.eps, update=True)

    @contextlib.contextmanager
    def frozen_spectral(self):
        """Forward passes inside this block leave (u, v) untouched."""
        layers = self.spectral_layers()
        old = [l.frozen for l in layers]
        for l in layers:
            l.frozen = True
        try:
            yield self
        finally:
            for l, f in zip(layers, old):
                l.frozen = f


def effective_spectral_norms(disc: Discriminator) -> dict[str, float]:
    """True largest singular value of every effective (normalized) weight."""
    out = {}
    with torch.no_grad(), disc.frozen_spectral():
        for name, layer in disc.named_modules():
            if isinstance(layer, SpectralNorm):
                w = layer.effective()
                out[name] = float(torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2))
    return out
