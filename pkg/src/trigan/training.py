"""Adversarial training of the translator, target-set synthesis and the
target classifier, plus the ablation switchboard.

Domain labels are 0-based; the last domain is the target.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from . import diffcore as dc
from .config import ExperimentConfig, parse_text
from .data import Batch, BatchComposer, to_uint8, to_unit_range
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Conv, Generator, GeneratorConfig, Linear
from .streams import SeedStreams

# -- configuration plumbing ---------------------------------------------------------


@dataclass
class LossWeights:
    lam: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


class AblationVariant(str, enum.Enum):
    A = "A"  # full model
    B = "B"  # cycle loss instead of equivariance
    C = "C"  # per-channel standardization instead of whitening
    D = "D"  # no style: IWT/AdaIWT become DWT/cDWT
    E = "E"  # style statistics applied directly, no MLP
    F = "F"  # no domain: DWT/cDWT become whole-batch WC

    @classmethod
    def parse(cls, v: "str | AblationVariant") -> "AblationVariant":
        try:
            return cls(str(getattr(v, "value", v)).upper())
        except ValueError:
            raise ValueError(f"unknown ablation variant {v!r}; choose from A-F") from None


def apply_ablation(variant, gcfg: GeneratorConfig) -> tuple[GeneratorConfig, str]:
    """Rewire the generator config for ``variant``.

    Returns the new config and the consistency loss kind ("eq" or "cycle").
    """
    v = AblationVariant.parse(variant)
    if v is AblationVariant.A:
        return gcfg, "eq"
    if v is AblationVariant.B:
        return gcfg, "cycle"
    if v is AblationVariant.C:
        return gcfg.replace(style_norm="in", domain_norm="bn", cond_norm="cbn", ada_norm="adain"), "eq"
    if v is AblationVariant.D:
        return gcfg.replace(style_norm="dwt", ada_norm="cdwt", style_mode="none"), "eq"
    if v is AblationVariant.E:
        c1, c2 = gcfg.iwt_channels
        return gcfg.replace(style_mode="direct", ada_channels=(c2, c1)), "eq"
    return gcfg.replace(domain_norm="wc", cond_norm="wc"), "eq"


def generator_config(cfg: ExperimentConfig) -> GeneratorConfig:
    return GeneratorConfig(
        num_domains=cfg.num_domains, image_size=cfg.image_size, stem_channels=cfg.stem_channels,
        iwt_channels=cfg.iwt_channels, ada_channels=cfg.ada_channels, mlp_hidden=cfg.mlp_hidden,
        max_group=cfg.max_group, eps=cfg.wc_eps, gamma_noise=cfg.gamma_noise)


def discriminator_config(cfg: ExperimentConfig) -> DiscriminatorConfig:
    return DiscriminatorConfig(num_domains=cfg.num_domains, channels=cfg.d_channels,
                               power_iterations=cfg.power_iterations)


def build_models(cfg: ExperimentConfig, streams: SeedStreams) -> tuple[Generator, Discriminator, str]:
    gcfg, consistency = apply_ablation(cfg.variant, generator_config(cfg))
    G = Generator(gcfg, streams.torch("init/generator"))
    D = Discriminator(discriminator_config(cfg), streams.torch("init/discriminator"))
    return G, D, consistency


def parameter_fingerprint(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(n, tuple(p.shape)) for n, p in model.named_parameters()]


# -- warps --------------------------------------------------------------------------


def sample_theta(m: int, gen: torch.Generator, rot_deg: float = 15.0, scale: tuple[float, float] = (0.85, 1.15),
                 translate: float = 0.1, shear: float = 0.0) -> Tensor:
    """Random affine warps [m, 2, 3] in normalized coordinates.

    ``translate`` is a fraction of the image extent; the normalized range
    [-1, 1] spans two extents' worth of units, hence the factor 2.
    """
    u = torch.rand(m, 5, generator=gen, dtype=torch.float64)
    ang = torch.deg2rad((u[:, 0] * 2 - 1) * rot_deg)
    s = scale[0] + u[:, 1] * (scale[1] - scale[0])
    sh = (u[:, 2] * 2 - 1) * shear
    t = (u[:, 3:5] * 2 - 1) * translate * 2
    c, sn = torch.cos(ang), torch.sin(ang)
    rot = torch.stack([torch.stack([c, -sn], -1), torch.stack([sn, c], -1)], -2)
    lin = rot @ torch.stack([torch.stack([s, sh * s], -1), torch.stack([torch.zeros_like(s), s], -1)], -2)
    theta = torch.cat([lin, t.unsqueeze(-1)], dim=-1)
    return theta.to(torch.get_default_dtype())


# -- losses ---------------------------------------------------------------------------


def l1(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().mean()


def _style_for(G, x_style: Tensor | None):
    if hasattr(G, "style_params") and x_style is not None:
        return G.style_params(x_style)
    return None


def loss_identity(G, x: Tensor, l: Tensor) -> Tensor:
    """Mean |G(x, l, l, x) - x|."""
    return l1(G(x, l, l, x), x)


def loss_equivariance(G, x: Tensor, l: Tensor, lo: Tensor, theta: Tensor, x_style: Tensor | None = None,
                      style=None, x_hat: Tensor | None = None, mask: bool = False) -> Tensor:
    """Mean |G(h(x), ...) - h(G(x, ...))| with both paths sharing theta, style and l^O.

    With ``mask`` only pixels whose warp footprint lies fully inside the image
    count.
    """
    if style is None:
        style = _style_for(G, x_style)
    if x_hat is None:
        x_hat = G(x, l, lo, x_style, style=style)
    a = G(dc.affine_grid_sample(x, theta), l, lo, x_style, style=style)
    b = dc.affine_grid_sample(x_hat, theta)
    if not mask:
        return l1(a, b)
    with torch.no_grad():
        ones = torch.ones_like(x[:, :1])
        valid = (dc.affine_grid_sample(ones, theta) >= 1.0 - 1e-12).to(x.dtype).expand_as(x)
    return ((a - b).abs() * valid).sum() / valid.sum().clamp_min(1.0)


def loss_cycle(G, x: Tensor, l: Tensor, lo: Tensor, x_style: Tensor | None = None, style=None,
               x_hat: Tensor | None = None) -> Tensor:
    """Mean |G(G(x, l, l^O, x^O), l^O, l, x) - x|."""
    if style is None:
        style = _style_for(G, x_style)
    if x_hat is None:
        x_hat = G(x, l, lo, x_style, style=style)
    return l1(G(x_hat, lo, l, x), x)


def hinge_d(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return F.relu(1.0 + fake_scores).mean() + F.relu(1.0 - real_scores).mean()


def loss_d(D, x: Tensor, l: Tensor, x_hat: Tensor, lo: Tensor) -> Tensor:
    """Hinge loss; fakes are conditioned on l^O, reals on l. x_hat is detached here."""
    return hinge_d(D(x, l), D(x_hat.detach(), lo))


class NonFiniteLoss(FloatingPointError):
    def __init__(self, terms: dict[str, float], step: int | None = None):
        self.terms = terms
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {terms}")


def loss_g(G, D, batch: Batch, theta: Tensor, weights: LossWeights, consistency: str = "eq",
           style=None, x_hat: Tensor | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Total generator loss and its components.

    total = mean(-D(x_hat, l^O)) + lam * (L_ID + L_Eq)   (L_cycle replaces L_Eq
    for the cycle variant).
    """
    x, l, lo, xo = batch.x, batch.l, batch.lo, batch.xo
    if style is None:
        style = _style_for(G, xo)
    if x_hat is None:
        x_hat = G(x, l, lo, xo, style=style)
    terms = {"loss_g_adv": -D(x_hat, lo).mean(), "loss_id": loss_identity(G, x, l)}
    if consistency == "cycle":
        terms["loss_cycle"] = loss_cycle(G, x, l, lo, xo, style=style, x_hat=x_hat)
    elif consistency == "eq":
        terms["loss_eq"] = loss_equivariance(G, x, l, lo, theta, xo, style=style, x_hat=x_hat)
    else:
        raise ValueError(f"unknown consistency loss {consistency!r}")
    reg = sum(v for k, v in terms.items() if k != "loss_g_adv")
    total = terms["loss_g_adv"] + weights.lam * reg
    return total, terms


def _finite_or_raise(terms: dict[str, Tensor], step: int) -> dict[str, float]:
    vals = {k: float(v.detach()) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        raise NonFiniteLoss(vals, step)
    return vals


def train_step(G: Generator, D: Discriminator, opt_g: dc.Adam, opt_d: dc.Adam, batch: Batch, theta: Tensor,
               weights: LossWeights, consistency: str, step: int = 0) -> dict[str, float]:
    """One D update then one G update on the same batch.

    The translation is computed once; D trains on its detached copy, then G
    is scored by the freshly updated D.
    """
    style = G.style_params(batch.xo)
    x_hat = G(batch.x, batch.l, batch.lo, style=style)
    ld = loss_d(D, batch.x, batch.l, x_hat, batch.lo)
    out = _finite_or_raise({"loss_d": ld}, step)
    opt_d.step_from_loss(ld)
    total, terms = loss_g(G, D, batch, theta, weights, consistency, style=style, x_hat=x_hat)
    vals = _finite_or_raise({**terms, "loss_g": total}, step)
    opt_g.step_from_loss(total)
    out.update(vals)
    return out


# -- image grids --------------------------------------------------------------------------


def tile(images: list[list[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Tile rows of uint8 [h, w, 3] images with white gaps."""
    h, w = images[0][0].shape[:2]
    rows, cols = len(images), max(len(r) for r in images)
    out = np.full((rows * (h + gap) + gap, cols * (w + gap) + gap, 3), 255, dtype=np.uint8)
    for i, row in enumerate(images):
        for j, im in enumerate(row):
            y, x = gap + i * (h + gap), gap + j * (w + gap)
            out[y:y + h, x:x + w] = im
    return out


@dataclass
class GridProbe:
    """Fixed sources and one fixed style reference per output domain."""

    x: Tensor
    l: Tensor
    styles: Tensor  # [K, 3, h, w]

    @classmethod
    def pick(cls, pools: list[Tensor], rows: int, rng: np.random.Generator) -> "GridProbe":
        k = len(pools)
        l = np.arange(rows) % k
        idx = [int(rng.integers(pools[d].shape[0])) for d in l]
        styles = torch.stack([p[int(rng.integers(p.shape[0]))] for p in pools])
        return cls(torch.stack([pools[d][i] for d, i in zip(l, idx)]), torch.from_numpy(l.astype(np.int64)), styles)

    @torch.no_grad()
    def render(self, G: Generator) -> np.ndarray:
        m = self.x.shape[0]
        src = to_uint8(self.x)
        cols: list[list[np.ndarray]] = [[] for _ in range(m)]
        for d in range(self.styles.shape[0]):
            lo = torch.full((m,), d, dtype=torch.long)
            xs = self.styles[d:d + 1].expand(m, -1, -1, -1)
            out = to_uint8(G(self.x, self.l, lo, style=G.style_params(xs)))
            sty = to_uint8(self.styles[d:d + 1])[0]
            for i in range(m):
                cols[i] += [src[i], sty, out[i]]
        return tile(cols)


# -- adversarial training loop -------------------------------------------------------------


METRIC_COLUMNS = ["step", "epoch", "loss_d", "loss_g_adv", "loss_id", "loss_eq", "lr_g", "lr_d", "wall_ms"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass
class GanRun:
    G: Generator
    D: Discriminator
    opt_g: dc.Adam
    opt_d: dc.Adam
    consistency: str
    out_dir: Path
    steps: int
    epochs: int
    checkpoints: list[Path] = field(default_factory=list)
    directions: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"


def checkpoint_parts(G: Generator, D: Discriminator, opt_g: dc.Adam | None = None, opt_d: dc.Adam | None = None):
    return [("", G, opt_g), ("disc.", D, opt_d)]


def steps_per_epoch(pools: list[Tensor], m: int) -> int:
    return math.ceil(sum(p.shape[0] for p in pools) / m)


def gan_train(cfg: ExperimentConfig, pools: list[Tensor], out_dir: str | Path,
              log: Callable[[str], None] | None = None) -> GanRun:
    """Train G and D on per-domain pools (last pool = unlabeled target).

    Writes ``metrics.csv`` (one row per step), ``directions.csv`` (per-epoch
    (l, l^O) counts), ``grid_e{epoch}.png`` and ``ckpt_e{epoch}.trg`` per
    epoch. A non-finite loss aborts the run, dumps ``diagnostics.json`` and
    leaves the earlier checkpoints in place.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = SeedStreams(cfg.seed)
    G, D, consistency = build_models(cfg, streams)
    opt_g = dc.Adam(G.named_parameters(), cfg.lr_g, (cfg.beta1, cfg.beta2))
    opt_d = dc.Adam(D.named_parameters(), cfg.lr_d, (cfg.beta1, cfg.beta2))
    weights = LossWeights(cfg.lam)
    composer = BatchComposer(pools, cfg.batch_size, streams.numpy("data/batches"), streams.numpy("style-pick"))
    theta_gen = streams.torch("theta")
    probe = GridProbe.pick(pools, cfg.grid_rows, streams.numpy("grid"))
    per_epoch = steps_per_epoch(pools, cfg.batch_size)
    total = per_epoch * cfg.epochs
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    k = len(pools)
    run = GanRun(G, D, opt_g, opt_d, consistency, out_dir, 0, 0)
    (out_dir / "config.txt").write_text(cfg.to_text())
    columns = METRIC_COLUMNS if consistency == "eq" else [c if c != "loss_eq" else "loss_cycle" for c in METRIC_COLUMNS]
    key = columns[5]
    counts = np.zeros((k, k), dtype=np.int64)
    with open(run.metrics_path, "w", newline="") as mf, open(out_dir / "directions.csv", "w", newline="") as df:
        mw = csv.writer(mf, lineterminator="\n")
        dw = csv.writer(df, lineterminator="\n")
        mw.writerow(columns)
        dw.writerow(["epoch", "l", "lo", "count"])
        step = 0
        while step < total:
            epoch = step // per_epoch + 1
            t0 = time.perf_counter()
            batch = composer.next()
            theta = sample_theta(cfg.batch_size, theta_gen, cfg.rot_deg, (cfg.scale_min, cfg.scale_max),
                                 cfg.translate, cfg.shear)
            np.add.at(counts, (batch.l.numpy(), batch.lo.numpy()), 1)
            try:
                vals = train_step(G, D, opt_g, opt_d, batch, theta, weights, consistency, step + 1)
            except (NonFiniteLoss, dc.NonFiniteError) as exc:
                diag = {"step": step + 1, "epoch": epoch, "error": str(exc),
                        "terms": getattr(exc, "terms", None),
                        "last_checkpoint": str(run.checkpoints[-1]) if run.checkpoints else None}
                (out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=1))
                raise
            step += 1
            wall = (time.perf_counter() - t0) * 1000.0
            mw.writerow([step, epoch] + [_fmt(vals[c]) for c in ("loss_d", "loss_g_adv", "loss_id", key)]
                        + [_fmt(cfg.lr_g), _fmt(cfg.lr_d), f"{wall:.1f}"])
            epoch_done = step % per_epoch == 0 or step == total
            if epoch_done:
                mf.flush()
                for a in range(k):
                    for b in range(k):
                        dw.writerow([epoch, a, b, int(counts[a, b])])
                df.flush()
                run.directions[epoch] = counts.copy()
                counts[:] = 0
                Image.fromarray(probe.render(G), "RGB").save(out_dir / f"grid_e{epoch}.png")
                if epoch % cfg.checkpoint_every == 0 or step == total:
                    path = out_dir / f"ckpt_e{epoch}.trg"
                    dc.save_checkpoint(path, checkpoint_parts(G, D, opt_g, opt_d), cfg.precision,
                                       {"epoch": epoch, "step": step, "variant": cfg.variant,
                                        "config": cfg.to_text()})
                    run.checkpoints.append(path)
                if log:
                    log(f"epoch {epoch} step {step}/{total} loss_d={vals['loss_d']:.4f} "
                        f"adv={vals['loss_g_adv']:.4f} id={vals['loss_id']:.4f} {key}={vals[key]:.4f}")
            run.steps, run.epochs = step, epoch
    return run


def load_models(checkpoint: str | Path, cfg: ExperimentConfig | None = None
                ) -> tuple[Generator, Discriminator, ExperimentConfig]:
    """Rebuild G and D from a checkpoint; the config defaults to the one stored in it."""
    if cfg is None:
        cfg = ExperimentConfig.from_pairs(parse_text(dc.checkpoint_header(checkpoint)["meta"]["config"]))
    G, D, _ = build_models(cfg, SeedStreams(cfg.seed))
    dc.load_checkpoint(checkpoint, checkpoint_parts(G, D))
    return G, D, cfg


# -- target set synthesis ----------------------------------------------------------------------


PROVENANCE_FIELDS = ("epoch", "source", "index", "style", "chunk")


@dataclass
class SyntheticTargetSet:
    """Translated source images with copied labels.

    ``provenance`` columns: epoch (-1 for included real sources), source
    domain, index within that source pool, style index into the target pool
    (-1 for real sources), and chunk id. Images of one chunk were translated
    together, so replaying an image means replaying its chunk.
    """

    images: np.ndarray       # uint8 [n, h, w, 3]
    labels: np.ndarray       # int64 [n]
    provenance: np.ndarray   # int64 [n, 5]
    target_domain: int
    chunk_size: int

    def __len__(self) -> int:
        return len(self.labels)

    def epoch_slice(self, epoch: int, with_sources: bool = True) -> tuple[np.ndarray, np.ndarray]:
        sel = self.provenance[:, 0] == epoch
        if with_sources:
            sel |= self.provenance[:, 0] == -1
        return self.images[sel], self.labels[sel]

    @property
    def epochs(self) -> list[int]:
        return sorted(int(e) for e in np.unique(self.provenance[:, 0]) if e >= 0)

    def save(self, path: str | Path) -> None:
        np.savez(path, images=self.images, labels=self.labels, provenance=self.provenance,
                 target_domain=self.target_domain, chunk_size=self.chunk_size)

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticTargetSet":
        z = np.load(path)
        return cls(z["images"], z["labels"], z["provenance"], int(z["target_domain"]), int(z["chunk_size"]))


@torch.no_grad()
def _translate_chunk(G: Generator, x: Tensor, source: int, target: int, styles: Tensor) -> Tensor:
    m = x.shape[0]
    l = torch.full((m,), source, dtype=torch.long)
    lo = torch.full((m,), target, dtype=torch.long)
    return G(x, l, lo, style=G.style_params(styles))


def synthesize_target_set(G: Generator, sources: list[tuple[Tensor, Tensor, int]], target_pool: Tensor,
                          epochs: int, rng: np.random.Generator, target_domain: int, chunk_size: int = 64,
                          include_sources: bool = False) -> SyntheticTargetSet:
    """Translate every labeled source image into the target domain ``epochs`` times.

    ``sources`` holds (images, labels, domain label). Each epoch draws a fresh
    style image per source image, uniformly with replacement from
    ``target_pool``.
    """
    if target_pool.shape[0] == 0:
        raise ValueError("target style pool is empty")
    images, labels, prov = [], [], []
    chunk = 0
    for e in range(epochs):
        for x, y, d in sources:
            for start in range(0, x.shape[0], chunk_size):
                idx = np.arange(start, min(start + chunk_size, x.shape[0]))
                sidx = rng.integers(0, target_pool.shape[0], size=len(idx))
                out = _translate_chunk(G, x[idx], d, target_domain, target_pool[sidx])
                images.append(to_uint8(out))
                labels.append(y[idx].numpy())
                prov.append(np.stack([np.full(len(idx), e), np.full(len(idx), d), idx, sidx,
                                      np.full(len(idx), chunk)], 1))
                chunk += 1
    if include_sources:
        for x, y, d in sources:
            n = x.shape[0]
            images.append(to_uint8(x))
            labels.append(y.numpy())
            prov.append(np.stack([np.full(n, -1), np.full(n, d), np.arange(n), np.full(n, -1), np.full(n, -1)], 1))
    return SyntheticTargetSet(np.concatenate(images), np.concatenate(labels).astype(np.int64),
                              np.concatenate(prov).astype(np.int64), target_domain, chunk_size)


def replay(G: Generator, tset: SyntheticTargetSet, sources: list[tuple[Tensor, Tensor, int]],
           target_pool: Tensor, i: int) -> np.ndarray:
    """Recompute entry ``i`` of ``tset`` from its provenance record."""
    epoch, d, idx, sidx, chunk = (int(v) for v in tset.provenance[i])
    pool = {dom: x for x, _, dom in sources}[d]
    if epoch < 0:
        return to_uint8(pool[idx:idx + 1])[0]
    rows = np.nonzero(tset.provenance[:, 4] == chunk)[0]
    src = torch.from_numpy(tset.provenance[rows, 2])
    sty = torch.from_numpy(tset.provenance[rows, 3])
    out = _translate_chunk(G, pool[src], d, tset.target_domain, target_pool[sty])
    return to_uint8(out)[int(np.nonzero(rows == i)[0][0])]


# -- target classifier ------------------------------------------------------------------------------


class TargetClassifier(nn.Module):
    """Three conv-ReLU-pool stages, a hidden linear layer and class logits."""

    def __init__(self, num_classes: int, channels=(32, 64, 128), hidden: int = 128, image_size: int = 32,
                 generator: torch.Generator | None = None):
        super().__init__()
        cin = 3
        self.convs = nn.ModuleList()
        for c in channels:
            self.convs.append(Conv(cin, c, 3, bias=True, generator=generator))
            cin = c
        side = image_size // 2 ** len(channels)
        self.fc1 = Linear(cin * side * side, hidden, generator)
        self.fc2 = Linear(hidden, num_classes, generator)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = dc.avg_pool_2x2(dc.relu(conv(h)))
        return self.fc2(dc.relu(self.fc1(h.flatten(1))))


def _as_float(x) -> Tensor:
    if isinstance(x, np.ndarray):
        return to_unit_range(x)
    return x


@torch.no_grad()
def accuracy(model: nn.Module, x: Tensor, y: Tensor, batch: int = 256) -> float:
    correct = 0
    for s in range(0, x.shape[0], batch):
        correct += int((model(_as_float(x[s:s + batch])).argmax(1) == y[s:s + batch]).sum())
    return correct / max(1, x.shape[0])


@dataclass
class ClassifierResult:
    model: TargetClassifier
    accuracy: float
    history: list[dict]


def classifier_train(train_sets: list[tuple], test: tuple[Tensor, Tensor], cfg: ExperimentConfig,
                     streams: SeedStreams, name: str = "cls",
                     log: Callable[[str], None] | None = None) -> ClassifierResult:
    """Cross-entropy training; epoch e draws from ``train_sets[e % len]``.

    Each train set is (images, labels) with images either uint8 [n, h, w, 3]
    or float [n, 3, h, w] in [-1, 1]. Accuracy is measured on ``test`` only.
    """
    if not train_sets or all(len(y) == 0 for _, y in train_sets):
        raise ValueError("empty classifier training set")
    k = cfg.num_classes
    seen = np.unique(np.concatenate([np.asarray(y) for _, y in train_sets]))
    missing = sorted(set(range(k)) - set(int(c) for c in seen))
    if missing:
        warnings.warn(f"{name}: classes {missing} absent from the training set", stacklevel=2)
    model = TargetClassifier(k, cfg.cls_channels, cfg.cls_hidden, cfg.image_size, streams.torch(f"init/{name}"))
    opt = dc.Adam(model.named_parameters(), cfg.cls_lr, (cfg.beta1, cfg.beta2))
    rng = streams.numpy(f"shuffle/{name}")
    x_test, y_test = test
    history = []
    for e in range(cfg.cls_epochs):
        xs, ys = train_sets[e % len(train_sets)]
        ys = torch.as_tensor(np.asarray(ys), dtype=torch.long)
        order = rng.permutation(len(ys))
        total, n = 0.0, 0
        for s in range(0, len(order), cfg.cls_batch):
            idx = order[s:s + cfg.cls_batch]
            xb = _as_float(xs[idx])
            loss = F.cross_entropy(model(xb), ys[idx])
            opt.step_from_loss(dc.check_finite(loss, f"{name} loss"))
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        acc = accuracy(model, x_test, y_test)
        history.append({"epoch": e + 1, "loss": total / n, "test_acc": acc})
        if log:
            log(f"{name} epoch {e + 1} loss={total / n:.4f} target_acc={acc:.4f}")
    return ClassifierResult(model, history[-1]["test_acc"], history)
