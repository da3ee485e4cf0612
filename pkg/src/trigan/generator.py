"""Generator: encoder that strips style then domain statistics, decoder that
re-projects onto an output domain and a reference style.

Block layout (default widths in parentheses)::

    enc.conv0   conv5x5                                     3 -> 32
    enc.iwt1    conv5x5 - IWT - ReLU - avgpool2             32 -> 64
    enc.iwt2    conv3x3 - IWT - ReLU - avgpool2             64 -> 128
    enc.dwt     [DWT - ReLU - conv3x3] x2 + identity        128
    dec.cdwt    [cDWT - ReLU - conv3x3] x2 + identity       128
    dec.ada1    upsample2 - conv3x3 - AdaIWT - ReLU         128 -> 64
    dec.ada2    upsample2 - conv3x3 - AdaIWT - ReLU         64 -> 32
    dec.conv_out conv5x5 - tanh                             32 -> 3
    style.mlp   (mu, W^-1) of both IWT stages -> [b1 | G1 | b2 | G2]

(b1, G1) colors ``dec.ada2`` and (b2, G2) colors ``dec.ada1``: the shallow
encoder statistics drive the last decoder block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import torch
from torch import Tensor, nn

from . import diffcore as dc
from .wctransforms import (
    NORM_KINDS,
    ColoringParams,
    NormLayer,
    Routing,
    StyleCode,
    block_diag,
    default_groups,
    make_norm,
)


@dataclass
class GeneratorConfig:
    num_domains: int = 3
    image_size: int = 32
    image_channels: int = 3
    stem_channels: int = 32
    iwt_channels: tuple[int, int] = (64, 128)
    ada_channels: tuple[int, int] = (64, 32)
    mlp_hidden: tuple[int, ...] = (256, 128, 128, 256)
    max_group: int = 32
    eps: float = 1e-3
    gamma_noise: float = 0.01
    # block kinds, rewired by the ablation switchboard
    style_norm: str = "iwt"
    domain_norm: str = "dwt"
    cond_norm: str = "cdwt"
    ada_norm: str = "adaiwt"
    style_mode: str = "mlp"  # mlp | direct | none

    def __post_init__(self):
        self.iwt_channels = tuple(self.iwt_channels)
        self.ada_channels = tuple(self.ada_channels)
        self.mlp_hidden = tuple(self.mlp_hidden)
        if self.image_size % 4:
            raise ValueError(f"image size {self.image_size} must be divisible by 4")
        for key in ("style_norm", "domain_norm", "cond_norm", "ada_norm"):
            if getattr(self, key) not in NORM_KINDS:
                raise ValueError(f"unknown {key} {getattr(self, key)!r}")
        if self.style_mode not in ("mlp", "direct", "none"):
            raise ValueError(f"unknown style_mode {self.style_mode!r}")
        if self.style_mode == "none" and self.ada_norm in ("adaiwt", "adain"):
            raise ValueError("style-adaptive decoder blocks need a style path")
        if self.style_mode == "direct":
            if self.ada_norm != "adaiwt" or self.style_norm != "iwt":
                raise ValueError("direct style application needs IWT statistics and AdaIWT blocks")
            if self.ada_channels != (self.iwt_channels[1], self.iwt_channels[0]):
                raise ValueError("direct style application needs ada_channels mirroring iwt_channels")

    @property
    def res_channels(self) -> int:
        return self.iwt_channels[1]

    def replace(self, **kw) -> "GeneratorConfig":
        return replace(self, **kw)


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, bias: bool, generator: torch.Generator | None):
        super().__init__()
        bound = 1.0 / math.sqrt(cin * k * k)
        w = (torch.rand(cout, cin, k, k, generator=generator) * 2 - 1) * bound * math.sqrt(3)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.weight, self.bias)


class Linear(nn.Module):
    def __init__(self, din: int, dout: int, generator: torch.Generator | None, scale: float = 1.0):
        super().__init__()
        bound = scale * math.sqrt(6.0 / din)
        self.weight = nn.Parameter((torch.rand(dout, din, generator=generator) * 2 - 1) * bound / math.sqrt(2))
        self.bias = nn.Parameter(torch.zeros(dout))

    def forward(self, x: Tensor) -> Tensor:
        return dc.linear(x, self.weight, self.bias)


class DownBlock(nn.Module):
    """conv - norm - ReLU - avgpool"""

    def __init__(self, cin, cout, k, norm: NormLayer, generator):
        super().__init__()
        self.conv = Conv(cin, cout, k, bias=False, generator=generator)
        self.norm = norm

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        return dc.avg_pool_2x2(dc.relu(self.norm(self.conv(x), routing)))


class UpBlock(nn.Module):
    """upsample - conv - norm - ReLU"""

    def __init__(self, cin, cout, norm: NormLayer, generator):
        super().__init__()
        self.conv = Conv(cin, cout, 3, bias=False, generator=generator)
        self.norm = norm

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        return dc.relu(self.norm(self.conv(dc.upsample_nearest_2x(x)), routing))


class ResBlock(nn.Module):
    """[norm - ReLU - conv3x3] x2 with an identity shortcut."""

    def __init__(self, c, norm1: NormLayer, norm2: NormLayer, generator):
        super().__init__()
        self.norm1 = norm1
        self.conv1 = Conv(c, c, 3, bias=False, generator=generator)
        self.norm2 = norm2
        self.conv2 = Conv(c, c, 3, bias=False, generator=generator)

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        h = self.conv1(dc.relu(self.norm1(x, routing)))
        h = self.conv2(dc.relu(self.norm2(h, routing)))
        return dc.add(x, h)


class Encoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig, generator):
        super().__init__()
        c0, (c1, c2) = cfg.stem_channels, cfg.iwt_channels
        norm = self._norm_factory(cfg, generator)
        self.conv0 = Conv(cfg.image_channels, c0, 5, bias=True, generator=generator)
        self.iwt1 = DownBlock(c0, c1, 5, norm(cfg.style_norm, c1), generator)
        self.iwt2 = DownBlock(c1, c2, 3, norm(cfg.style_norm, c2), generator)
        self.dwt = ResBlock(c2, norm(cfg.domain_norm, c2), norm(cfg.domain_norm, c2), generator)

    @staticmethod
    def _norm_factory(cfg, generator):
        def build(kind, d):
            return make_norm(kind, d, eps=cfg.eps, max_group=cfg.max_group,
                             num_domains=cfg.num_domains, noise=cfg.gamma_noise, generator=generator)
        return build

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        h = self.conv0(x)
        h = self.iwt1(h, routing)
        h = self.iwt2(h, routing)
        return self.dwt(h, routing)


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig, generator):
        super().__init__()
        c2 = cfg.res_channels
        a1, a2 = cfg.ada_channels
        norm = Encoder._norm_factory(cfg, generator)
        self.cdwt = ResBlock(c2, norm(cfg.cond_norm, c2), norm(cfg.cond_norm, c2), generator)
        self.ada1 = UpBlock(c2, a1, norm(cfg.ada_norm, a1), generator)
        self.ada2 = UpBlock(a1, a2, norm(cfg.ada_norm, a2), generator)
        self.conv_out = Conv(a2, cfg.image_channels, 5, bias=True, generator=generator)

    def forward(self, h: Tensor, routing: Routing, style: list[ColoringParams | None]) -> Tensor:
        h = self.cdwt(h, routing)
        h = self.ada1(h, Routing(routing.input_domains, routing.output_domains, style[0]))
        h = self.ada2(h, Routing(routing.input_domains, routing.output_domains, style[1]))
        return torch.tanh(self.conv_out(h))


def _style_features(norm: NormLayer) -> Tensor:
    """Flatten the per-image statistics the last forward of ``norm`` recorded."""
    stats = norm.last_stats
    if isinstance(stats, tuple):  # (mean, std) from IN
        return torch.cat(stats, dim=1)
    return StyleCode(stats.mu, stats.chol).flat()


class StylePath(nn.Module):
    """MLP F mapping style statistics to AdaIWT coloring parameters.

    The convolutional half of the style path is the encoder's own first
    blocks (``enc.conv0``, ``enc.iwt1``, ``enc.iwt2``); only F lives here.
    """

    def __init__(self, cfg: GeneratorConfig, generator):
        super().__init__()
        self.diagonal = cfg.ada_norm == "adain"
        c1, c2 = cfg.iwt_channels
        a1, a2 = cfg.ada_channels
        if self.diagonal:
            din = 2 * c1 + 2 * c2
            # output order [b1 | g1 | b2 | g2]; (b1, g1) -> ada2, (b2, g2) -> ada1
            self.sizes = [a2, a2, a1, a1]
        else:
            g1, g2 = default_groups(c1, cfg.max_group), default_groups(c2, cfg.max_group)
            din = c1 + c1 * c1 // g1 + c2 + c2 * c2 // g2
            self.sizes = [a2, a2 * a2, a1, a1 * a1]
        widths = [din, *cfg.mlp_hidden]
        layers = [Linear(i, o, generator) for i, o in zip(widths[:-1], widths[1:])]
        head = Linear(widths[-1], sum(self.sizes), generator, scale=0.01)
        with torch.no_grad():
            head.bias.copy_(self._identity_bias(a1, a2))
        self.mlp = nn.ModuleList(layers + [head])

    def _identity_bias(self, a1: int, a2: int) -> Tensor:
        if self.diagonal:
            parts = [torch.zeros(a2), torch.ones(a2), torch.zeros(a1), torch.ones(a1)]
        else:
            parts = [torch.zeros(a2), torch.eye(a2).flatten(), torch.zeros(a1), torch.eye(a1).flatten()]
        return torch.cat(parts)

    def forward(self, stats: Tensor) -> list[ColoringParams]:
        h = stats
        for layer in self.mlp[:-1]:
            h = dc.relu(layer(h))
        out = self.mlp[-1](h)
        b1, g1, b2, g2 = torch.split(out, self.sizes, dim=1)
        m = out.shape[0]
        if not self.diagonal:
            g1 = g1.reshape(m, self.sizes[0], self.sizes[0])
            g2 = g2.reshape(m, self.sizes[2], self.sizes[2])
        # decoder order: ada1 first
        return [ColoringParams(b2, g2, "style-generated"), ColoringParams(b1, g1, "style-generated")]


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.enc = Encoder(cfg, generator)
        self.dec = Decoder(cfg, generator)
        self.style = StylePath(cfg, generator) if cfg.style_mode == "mlp" else None

    @property
    def shared_style_convs(self) -> list[Conv]:
        """The convolutions the style path runs, owned by the encoder."""
        return [self.enc.conv0, self.enc.iwt1.conv, self.enc.iwt2.conv]

    def encode(self, x: Tensor, input_domains: Tensor) -> Tensor:
        return self.enc(x, Routing(input_domains))

    def _collect_style(self) -> list[ColoringParams | None]:
        if self.cfg.style_mode == "none":
            return [None, None]
        n1, n2 = self.enc.iwt1.norm, self.enc.iwt2.norm
        if self.cfg.style_mode == "direct":
            s1, s2 = n1.last_stats, n2.last_stats
            return [ColoringParams(s2.mu, block_diag(s2.chol), "style-direct"),
                    ColoringParams(s1.mu, block_diag(s1.chol), "style-direct")]
        return self.style(torch.cat([_style_features(n1), _style_features(n2)], dim=1))

    def style_params(self, style_images: Tensor) -> list[ColoringParams | None]:
        """Coloring params for (ada1, ada2), one set per style image."""
        if self.cfg.style_mode == "none":
            return [None, None]
        if self.cfg.style_norm not in ("iwt", "in"):
            raise ValueError("style path needs per-instance encoder normalization")
        dummy = Routing(torch.zeros(style_images.shape[0], dtype=torch.long))
        h = self.enc.conv0(style_images)
        h = self.enc.iwt1(h, dummy)
        n2 = self.enc.iwt2.norm
        n2(self.enc.iwt2.conv(h), dummy)  # records per-image stats of stage 2
        return self._collect_style()

    def decode(self, h: Tensor, input_domains: Tensor, output_domains: Tensor,
               style: list[ColoringParams | None]) -> Tensor:
        return self.dec(h, Routing(input_domains, output_domains), style)

    def translate(self, x: Tensor, l: Tensor, lo: Tensor, x_style: Tensor | None = None,
                  style: list[ColoringParams | None] | None = None) -> Tensor:
        """x_hat = G(x, l, lo, x_style).

        ``style`` may carry precomputed :meth:`style_params` output. When
        ``x_style`` is ``x`` itself the encoder's own statistics are reused.
        """
        if style is None and x_style is x and self.cfg.style_mode != "none":
            h = self.encode(x, l)
            style = self._collect_style()
            return self.decode(h, l, lo, style)
        if style is None:
            if x_style is None and self.cfg.style_mode != "none":
                raise ValueError("a style image batch is required")
            style = self.style_params(x_style) if x_style is not None else [None, None]
        return self.decode(self.encode(x, l), l, lo, style)

    forward = translate


def domain_param_count(model: nn.Module) -> int:
    """Number of learned values that are indexed by domain label."""
    from .wctransforms import CBN, CDWT

    return sum(p.numel() for m in model.modules() if isinstance(m, (CDWT, CBN)) for p in m.parameters())


def config_from_mapping(d: dict) -> GeneratorConfig:
    names = {f.name for f in fields(GeneratorConfig)}
    return GeneratorConfig(**{k: v for k, v in d.items() if k in names})

