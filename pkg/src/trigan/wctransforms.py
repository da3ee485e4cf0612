"""Batch whitening and coloring transforms.

A feature map [m, d, h, w] is read as a population of m*h*w d-vectors. The
transforms here differ only in how that population is partitioned before
whitening and where the coloring parameters come from:

    iwt      one partition per image, shared learned coloring
    dwt      one partition per input-domain label, shared learned coloring
    cdwt     one partition per output-domain label, per-domain coloring
    ada_iwt  one partition per image, per-image (style-generated) coloring
    wc       the whole batch, shared learned coloring

Whitening uses the Cholesky factor of the (eps-regularized, 1/n) covariance,
W = L^-1, computed independently over ``groups`` contiguous channel blocks.
The standardization counterparts (in_norm, bn_norm, cbn_norm, ada_in) keep the
same partitions but only normalize per channel and color diagonally.

Domain labels are 0-based here; the target domain is the last one.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .diffcore import ShapeError, check_finite, cholesky, triangular_inverse


class DegenerateBatchError(ValueError):
    """A statistics population is too small to estimate a covariance."""


@dataclass
class FeatureBatch:
    features: Tensor  # [m, d, h, w]
    input_domains: Tensor  # [m] long
    output_domains: Tensor | None = None  # [m] long
    style_refs: Tensor | None = None  # [m] long, index into the style batch

    def __post_init__(self):
        m = self.features.shape[0]
        for name in ("input_domains", "output_domains", "style_refs"):
            t = getattr(self, name)
            if t is not None and t.shape != (m,):
                raise ShapeError(f"{name} must have shape ({m},), got {tuple(t.shape)}")


@dataclass
class WhiteningStats:
    """Per-group statistics; leading dims index independent populations."""

    mean: Tensor  # [..., G, c]
    cov: Tensor  # [..., G, c, c]  (regularized)
    chol: Tensor  # [..., G, c, c]  lower factor L, cov = L L^T
    whitening: Tensor  # [..., G, c, c]  W = L^-1
    group_size: int

    @property
    def groups(self) -> int:
        return self.mean.shape[-2]

    @property
    def mu(self) -> Tensor:
        """Mean as a flat d-vector."""
        return self.mean.flatten(-2)

    def full(self, which: str = "whitening") -> Tensor:
        """Block-diagonal d x d version of ``cov``, ``chol`` or ``whitening``."""
        return block_diag(getattr(self, which))


@dataclass
class ColoringParams:
    """Coloring Gamma v + beta.

    Shapes: shared ``beta [d], gamma [d, d]``; per-domain or per-image
    ``beta [k, d], gamma [k, d, d]``. ``diagonal`` params carry ``gamma [..., d]``.
    """

    beta: Tensor
    gamma: Tensor
    provenance: str = "learned-shared"

    @property
    def diagonal(self) -> bool:
        return self.gamma.dim() == self.beta.dim()


@dataclass
class StyleCode:
    mean: Tensor  # [m, d]
    winv: Tensor  # [m, G, c, c]  Cholesky factor L of each image's covariance

    def flat(self) -> Tensor:
        return torch.cat([self.mean, self.winv.flatten(1)], dim=1)

    def as_coloring(self) -> ColoringParams:
        return ColoringParams(self.mean, block_diag(self.winv), "style-direct")


def block_diag(blocks: Tensor) -> Tensor:
    """[..., G, c, c] -> [..., G*c, G*c]."""
    *lead, g, c, _ = blocks.shape
    if g == 1:
        return blocks[..., 0, :, :]
    out = blocks.new_zeros(*lead, g * c, g * c)
    for i in range(g):
        out[..., i * c:(i + 1) * c, i * c:(i + 1) * c] = blocks[..., i, :, :]
    return out


def default_groups(d: int, max_group: int = 32) -> int:
    """Fewest groups with group dimension <= ``max_group`` that divide ``d``."""
    for g in range(1, d + 1):
        if d % g == 0 and d // g <= max_group:
            return g
    return d


# -- statistics on column populations ---------------------------------------
# Internally a population is [..., d, n]: n column vectors of dimension d.


def _stats_cols(x: Tensor, eps: float, groups: int, where: str = "") -> WhiteningStats:
    *lead, d, n = x.shape
    if n < 2:
        raise DegenerateBatchError(f"{where or 'whitening'}: population of size {n} < 2")
    if d % groups:
        raise ShapeError(f"{d} channels not divisible into {groups} groups")
    c = d // groups
    xg = x.reshape(*lead, groups, c, n)
    mean = xg.mean(dim=-1)
    xc = xg - mean.unsqueeze(-1)
    cov = xc @ xc.transpose(-1, -2) / n
    cov = cov + eps * torch.eye(c, dtype=x.dtype, device=x.device)
    L = cholesky(cov, where)
    W = triangular_inverse(L)
    return WhiteningStats(mean, cov, L, W, c)


def _whiten_cols(x: Tensor, stats: WhiteningStats) -> Tensor:
    *lead, d, n = x.shape
    g, c = stats.groups, stats.group_size
    xg = x.reshape(*lead, g, c, n)
    out = stats.whitening @ (xg - stats.mean.unsqueeze(-1))
    return out.reshape(*lead, d, n)


def compute_whitening_stats(vectors: Tensor, eps: float = 1e-3, groups: int = 1, where: str = "") -> WhiteningStats:
    """Statistics of a population given as ``[..., n, d]`` row vectors."""
    return _stats_cols(vectors.transpose(-1, -2), eps, groups, where)


def whiten(vectors: Tensor, stats: WhiteningStats) -> Tensor:
    """W (v - mu) for ``[..., n, d]`` row vectors."""
    if vectors.shape[-1] != stats.groups * stats.group_size:
        raise ShapeError(f"vectors have dimension {vectors.shape[-1]}, stats expect {stats.groups * stats.group_size}")
    return _whiten_cols(vectors.transpose(-1, -2), stats).transpose(-1, -2)


def color(features: Tensor, params: ColoringParams) -> Tensor:
    """Gamma v + beta at every spatial location of ``features`` [m, d, h, w].

    Shared params run as a 1x1 convolution; per-image params (leading dim m)
    as a batched matrix product.
    """
    m, d = features.shape[:2]
    beta, gamma = params.beta, params.gamma
    if beta.shape[-1] != d or gamma.shape[-1] != d:
        raise ShapeError(f"coloring params for {gamma.shape[-1]} channels applied to {d}")
    if params.diagonal:
        if beta.dim() == 1:
            return features * gamma.view(1, d, 1, 1) + beta.view(1, d, 1, 1)
        if beta.shape[0] != m:
            raise ShapeError(f"{beta.shape[0]} per-image coloring params for {m} images")
        return features * gamma.view(m, d, 1, 1) + beta.view(m, d, 1, 1)
    if gamma.dim() == 2:
        return torch.nn.functional.conv2d(features, gamma.view(d, d, 1, 1), beta)
    if gamma.shape[0] != m:
        raise ShapeError(f"{gamma.shape[0]} per-image coloring params for {m} images")
    flat = features.reshape(m, d, -1)
    return (gamma @ flat + beta.unsqueeze(-1)).reshape(features.shape)


def _route(params: ColoringParams, keys: Tensor) -> ColoringParams:
    if int(keys.max()) >= params.beta.shape[0]:
        raise KeyError(f"no coloring params for domain {int(keys.max())}; have {params.beta.shape[0]}")
    return ColoringParams(params.beta[keys], params.gamma[keys], params.provenance)


# -- whitening by partition --------------------------------------------------


def whiten_instances(x: Tensor, eps: float, groups: int, where: str = "") -> tuple[Tensor, WhiteningStats]:
    """Whiten each image over its own h*w locations."""
    m, d = x.shape[:2]
    cols = x.reshape(m, d, -1)
    stats = _stats_cols(cols, eps, groups, where)
    return _whiten_cols(cols, stats).reshape(x.shape), stats


def whiten_batch(x: Tensor, eps: float, groups: int, where: str = "") -> tuple[Tensor, WhiteningStats]:
    """Whiten the whole batch as one population."""
    m, d = x.shape[:2]
    cols = x.transpose(0, 1).reshape(d, -1)
    stats = _stats_cols(cols, eps, groups, where)
    out = _whiten_cols(cols, stats).reshape(d, m, *x.shape[2:]).transpose(0, 1)
    return out, stats


def whiten_partitions(x: Tensor, keys: Tensor, eps: float, groups: int, where: str = "") -> tuple[Tensor, dict[int, WhiteningStats]]:
    """Whiten images sharing a key together, one population per key."""
    out = torch.empty_like(x)
    stats = {}
    for key in torch.unique(keys).tolist():
        idx = torch.nonzero(keys == key).flatten()
        part, s = whiten_batch(x.index_select(0, idx), eps, groups, f"{where} partition {key}".strip())
        out = out.index_copy(0, idx, part)
        stats[key] = s
    return out, stats


def iwt(batch: FeatureBatch, learned: ColoringParams, eps: float = 1e-3, groups: int = 1) -> Tensor:
    xw, _ = whiten_instances(batch.features, eps, groups, "iwt")
    return color(xw, learned)


def dwt(batch: FeatureBatch, learned: ColoringParams, eps: float = 1e-3, groups: int = 1) -> Tensor:
    xw, _ = whiten_partitions(batch.features, batch.input_domains, eps, groups, "dwt")
    return color(xw, learned)


def cdwt(batch: FeatureBatch, per_domain: ColoringParams, eps: float = 1e-3, groups: int = 1) -> Tensor:
    if batch.output_domains is None:
        raise ValueError("cdwt needs output domain labels")
    xw, _ = whiten_partitions(batch.features, batch.output_domains, eps, groups, "cdwt")
    return color(xw, _route(per_domain, batch.output_domains))


def ada_iwt(batch: FeatureBatch, per_image: ColoringParams, eps: float = 1e-3, groups: int = 1) -> Tensor:
    if per_image.beta.shape[0] != batch.features.shape[0]:
        raise ShapeError(f"{per_image.beta.shape[0]} style params for {batch.features.shape[0]} images")
    xw, _ = whiten_instances(batch.features, eps, groups, "ada_iwt")
    return color(xw, per_image)


def wc(batch: FeatureBatch, learned: ColoringParams, eps: float = 1e-3, groups: int = 1) -> Tensor:
    xw, _ = whiten_batch(batch.features, eps, groups, "wc")
    return color(xw, learned)


def extract_style(style_features: Tensor, eps: float = 1e-3, groups: int = 1) -> StyleCode:
    """Per-image (mu, W^-1) of [m, d, h, w] features; W^-1 is the Cholesky factor."""
    m, d = style_features.shape[:2]
    stats = _stats_cols(style_features.reshape(m, d, -1), eps, groups, "style")
    return StyleCode(stats.mu, stats.chol)


# -- per-channel standardization ---------------------------------------------


def _standardize(x: Tensor, dims: tuple[int, ...], eps: float) -> tuple[Tensor, Tensor, Tensor]:
    mean = x.mean(dim=dims, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=dims, keepdim=True)
    std = torch.sqrt(var + eps)
    return (x - mean) / std, mean, std


def standardize_instances(x: Tensor, eps: float) -> tuple[Tensor, Tensor, Tensor]:
    if x.shape[2] * x.shape[3] < 2:
        raise DegenerateBatchError("instance standardization needs at least 2 locations")
    return _standardize(x, (2, 3), eps)


def standardize_partitions(x: Tensor, keys: Tensor, eps: float) -> Tensor:
    out = torch.empty_like(x)
    for key in torch.unique(keys).tolist():
        idx = torch.nonzero(keys == key).flatten()
        part = x.index_select(0, idx)
        if part.shape[0] * part.shape[2] * part.shape[3] < 2:
            raise DegenerateBatchError(f"partition {key} has fewer than 2 vectors")
        out = out.index_copy(0, idx, _standardize(part, (0, 2, 3), eps)[0])
    return out


def in_norm(batch: FeatureBatch, learned: ColoringParams, eps: float = 1e-3) -> Tensor:
    return color(standardize_instances(batch.features, eps)[0], learned)


def bn_norm(batch: FeatureBatch, learned: ColoringParams, eps: float = 1e-3) -> Tensor:
    return color(standardize_partitions(batch.features, batch.input_domains, eps), learned)


def cbn_norm(batch: FeatureBatch, per_domain: ColoringParams, eps: float = 1e-3) -> Tensor:
    if batch.output_domains is None:
        raise ValueError("cbn_norm needs output domain labels")
    xs = standardize_partitions(batch.features, batch.output_domains, eps)
    return color(xs, _route(per_domain, batch.output_domains))


def ada_in(batch: FeatureBatch, per_image: ColoringParams, eps: float = 1e-3) -> Tensor:
    if per_image.beta.shape[0] != batch.features.shape[0]:
        raise ShapeError(f"{per_image.beta.shape[0]} style params for {batch.features.shape[0]} images")
    return color(standardize_instances(batch.features, eps)[0], per_image)


def channel_style(style_features: Tensor, eps: float = 1e-3) -> tuple[Tensor, Tensor]:
    """Per-image, per-channel (mean, std) — the standardization analogue of a StyleCode."""
    _, mean, std = standardize_instances(style_features, eps)
    return mean.flatten(1), std.flatten(1)


# -- layers ------------------------------------------------------------------


@dataclass
class Routing:
    """What a normalization layer needs besides its input."""

    input_domains: Tensor
    output_domains: Tensor | None = None
    style: ColoringParams | None = None


def _init_gamma(shape: tuple[int, ...], d: int, noise: float, generator: torch.Generator | None) -> Tensor:
    eye = torch.eye(d).expand(*shape, d, d).clone()
    return eye + noise * torch.randn(eye.shape, generator=generator)


class NormLayer(nn.Module):
    """Common interface: ``forward(x, routing)``; ``last_stats`` holds the
    whitening stats of the most recent call for layers that whiten per image."""

    kind = ""
    per_image_style = False

    def __init__(self, d: int, eps: float, groups: int):
        super().__init__()
        self.d = d
        self.eps = eps
        self.groups = groups
        self.last_stats = None

    def extra_repr(self) -> str:
        return f"d={self.d}, groups={self.groups}, eps={self.eps}"


class _SharedFull(NormLayer):
    def __init__(self, d, eps, groups, noise=0.01, generator=None):
        super().__init__(d, eps, groups)
        self.beta = nn.Parameter(torch.zeros(d))
        self.gamma = nn.Parameter(_init_gamma((), d, noise, generator))

    def coloring(self) -> ColoringParams:
        return ColoringParams(self.beta, self.gamma)


class IWT(_SharedFull):
    kind = "iwt"

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        xw, self.last_stats = whiten_instances(x, self.eps, self.groups, "iwt")
        return check_finite(color(xw, self.coloring()), "iwt")


class DWT(_SharedFull):
    kind = "dwt"

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        xw, _ = whiten_partitions(x, routing.input_domains, self.eps, self.groups, "dwt")
        return check_finite(color(xw, self.coloring()), "dwt")


class WC(_SharedFull):
    kind = "wc"

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        xw, _ = whiten_batch(x, self.eps, self.groups, "wc")
        return check_finite(color(xw, self.coloring()), "wc")


class CDWT(NormLayer):
    kind = "cdwt"

    def __init__(self, d, eps, groups, num_domains, noise=0.01, generator=None):
        super().__init__(d, eps, groups)
        self.beta = nn.Parameter(torch.zeros(num_domains, d))
        self.gamma = nn.Parameter(_init_gamma((num_domains,), d, noise, generator))

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        params = ColoringParams(self.beta, self.gamma, "learned-per-domain")
        return check_finite(cdwt(FeatureBatch(x, routing.input_domains, routing.output_domains), params, self.eps, self.groups), "cdwt")


class AdaIWT(NormLayer):
    kind = "adaiwt"
    per_image_style = True

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        if routing.style is None:
            raise ValueError("AdaIWT needs style-generated coloring params")
        xw, self.last_stats = whiten_instances(x, self.eps, self.groups, "ada_iwt")
        return check_finite(color(xw, routing.style), "ada_iwt")


class _SharedDiag(NormLayer):
    def __init__(self, d, eps, groups=1, noise=0.01, generator=None):
        super().__init__(d, eps, 1)
        self.beta = nn.Parameter(torch.zeros(d))
        self.gamma = nn.Parameter(1.0 + noise * torch.randn(d, generator=generator))

    def coloring(self) -> ColoringParams:
        return ColoringParams(self.beta, self.gamma)


class IN(_SharedDiag):
    kind = "in"

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        xs, mean, std = standardize_instances(x, self.eps)
        self.last_stats = (mean.flatten(1), std.flatten(1))
        return color(xs, self.coloring())


class BN(_SharedDiag):
    kind = "bn"

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        return color(standardize_partitions(x, routing.input_domains, self.eps), self.coloring())


class CBN(NormLayer):
    kind = "cbn"

    def __init__(self, d, eps, groups, num_domains, noise=0.01, generator=None):
        super().__init__(d, eps, 1)
        self.beta = nn.Parameter(torch.zeros(num_domains, d))
        self.gamma = nn.Parameter(1.0 + noise * torch.randn(num_domains, d, generator=generator))

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        params = ColoringParams(self.beta, self.gamma, "learned-per-domain")
        return cbn_norm(FeatureBatch(x, routing.input_domains, routing.output_domains), params, self.eps)


class AdaIN(NormLayer):
    kind = "adain"
    per_image_style = True

    def __init__(self, d, eps, groups=1):
        super().__init__(d, eps, 1)

    def forward(self, x: Tensor, routing: Routing) -> Tensor:
        if routing.style is None:
            raise ValueError("AdaIN needs style-generated coloring params")
        xs, mean, std = standardize_instances(x, self.eps)
        self.last_stats = (mean.flatten(1), std.flatten(1))
        return color(xs, routing.style)


NORM_KINDS = {
    "iwt": IWT, "dwt": DWT, "wc": WC, "cdwt": CDWT, "adaiwt": AdaIWT,
    "in": IN, "bn": BN, "cbn": CBN, "adain": AdaIN,
}
CONDITIONAL_KINDS = {"cdwt", "cbn"}


def make_norm(kind: str, d: int, *, eps: float, max_group: int, num_domains: int,
              noise: float = 0.01, generator: torch.Generator | None = None) -> NormLayer:
    try:
        cls = NORM_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown normalization kind {kind!r}") from None
    groups = default_groups(d, max_group)
    if kind in CONDITIONAL_KINDS:
        return cls(d, eps, groups, num_domains, noise=noise, generator=generator)
    if kind in ("adaiwt", "adain"):
        return cls(d, eps, groups)
    return cls(d, eps, groups, noise=noise, generator=generator)
