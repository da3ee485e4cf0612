"""Synthetic multi-domain shape data, image-folder ingestion and batch composition.

Every image factors into content (shape class), domain (a fixed rendering
transform per domain) and style (per-image colors, stroke width, contrast).
On disk the layout is ``root/<domain>/<split>/<class>/*.png``; a
``manifest.json`` next to the domain folders records order and checksum.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter
from torch import Tensor

from .streams import SeedStreams

SHAPES = ("circle", "square", "triangle", "plus", "cross", "star", "hexagon", "heart")
DOMAIN_KINDS = ("grayscale-on-white", "color-inverted", "textured-background", "hue-rotated", "noise-overlaid")
SUPERSAMPLE = 4


# -- rendering ----------------------------------------------------------------


def _polygon(kind: str, cx: float, cy: float, r: float, rot: float) -> list[tuple[float, float]]:
    if kind == "square":
        angles = [math.pi / 4 + k * math.pi / 2 for k in range(4)]
        radii = [r * math.sqrt(2) * 0.8] * 4
    elif kind == "triangle":
        angles = [-math.pi / 2 + k * 2 * math.pi / 3 for k in range(3)]
        radii = [r * 1.1] * 3
    elif kind == "hexagon":
        angles = [k * math.pi / 3 for k in range(6)]
        radii = [r] * 6
    elif kind == "star":
        angles = [-math.pi / 2 + k * math.pi / 5 for k in range(10)]
        radii = [r * 1.1 if k % 2 == 0 else r * 0.45 for k in range(10)]
    else:
        raise KeyError(kind)
    c, s = math.cos(rot), math.sin(rot)
    pts = []
    for a, rad in zip(angles, radii):
        x, y = rad * math.cos(a), rad * math.sin(a)
        pts.append((cx + c * x - s * y, cy + s * x + c * y))
    return pts


def render_mask(kind: str, size: int, rng: np.random.Generator, thickness: float) -> np.ndarray:
    """Anti-aliased stroke mask in [0,1] of shape [size, size]."""
    big = size * SUPERSAMPLE
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    r = big * rng.uniform(0.24, 0.32)
    cx = big / 2 + rng.uniform(-0.12, 0.12) * big
    cy = big / 2 + rng.uniform(-0.12, 0.12) * big
    rot = math.radians(rng.uniform(-15, 15))
    w = max(1, int(round(thickness * SUPERSAMPLE)))
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=255, width=w)
    elif kind in ("plus", "cross"):
        base = 0.0 if kind == "plus" else math.pi / 4
        for a in (base + rot, base + rot + math.pi / 2):
            dx, dy = r * 1.1 * math.cos(a), r * 1.1 * math.sin(a)
            draw.line([cx - dx, cy - dy, cx + dx, cy + dy], fill=255, width=w)
    elif kind == "heart":
        pts = []
        for k in range(40):
            t = 2 * math.pi * k / 40
            x = 16 * math.sin(t) ** 3
            y = -(13 * math.cos(t) - 5 * math.cos(2 * t) - 2 * math.cos(3 * t) - math.cos(4 * t))
            c, s = math.cos(rot), math.sin(rot)
            x, y = x * r / 16, y * r / 16
            pts.append((cx + c * x - s * y, cy + s * x + c * y))
        draw.line(pts + [pts[0]], fill=255, width=w, joint="curve")
    else:
        pts = _polygon(kind, cx, cy, r, rot)
        draw.line(pts + [pts[0]], fill=255, width=w, joint="curve")
    img = img.resize((size, size), Image.BOX)
    return np.asarray(img, dtype=np.float64) / 255.0


def _random_color(rng: np.random.Generator, sat=(0.6, 1.0), val=(0.6, 1.0)) -> np.ndarray:
    h = rng.uniform()
    return np.array(colorsys.hsv_to_rgb(h, rng.uniform(*sat), rng.uniform(*val)))


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random color field plus fine grain, [size, size, 3] in [0,1]."""
    coarse = rng.integers(0, 256, size=(rng.integers(3, 7),) * 2 + (3,), dtype=np.uint8)
    field_ = Image.fromarray(coarse, "RGB").resize((size, size), Image.BICUBIC)
    field_ = field_.filter(ImageFilter.GaussianBlur(radius=1.0))
    arr = np.asarray(field_, dtype=np.float64) / 255.0
    arr = arr + rng.normal(0.0, 0.06, size=arr.shape)
    return np.clip(arr, 0.0, 1.0)


def _hue_rotate(rgb: np.ndarray, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])
    return np.clip(rgb @ m.T, 0.0, 1.0)


def apply_domain(kind: str, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Compose a [h, w, 3] image in [0,1] from a stroke mask.

    The per-image style (colors, contrast) is drawn from ``rng``; the domain
    transform itself is fixed by ``kind``.
    """
    m = mask[..., None]
    if kind == "grayscale-on-white":
        bg = rng.uniform(0.75, 1.0)
        fg = rng.uniform(0.0, 0.35)
        img = np.broadcast_to(bg * (1 - m) + fg * m, mask.shape + (3,)).copy()
    elif kind == "color-inverted":
        bg = 1.0 - rng.uniform(0.0, 0.2, size=3)
        fg = _random_color(rng)
        img = 1.0 - (bg * (1 - m) + fg * m)
    elif kind == "textured-background":
        bg = _texture(mask.shape[0], rng)
        img = np.abs(bg - m)
    elif kind == "hue-rotated":
        bg = _random_color(rng, sat=(0.2, 0.5), val=(0.7, 1.0))
        fg = _random_color(rng, sat=(0.7, 1.0), val=(0.2, 0.6))
        img = _hue_rotate(bg * (1 - m) + fg * m, 120.0)
    elif kind == "noise-overlaid":
        bg = rng.uniform(0.75, 1.0)
        fg = rng.uniform(0.0, 0.35)
        img = np.broadcast_to(bg * (1 - m) + fg * m, mask.shape + (3,))
        img = img + rng.normal(0.0, 0.15, size=img.shape)
    else:
        raise KeyError(f"unknown domain transform {kind!r}")
    contrast = rng.uniform(0.7, 1.0)
    img = 0.5 + contrast * (img - 0.5)
    return np.clip(img, 0.0, 1.0)


@dataclass
class SyntheticDomainSpec:
    domain_id: int
    kind: str
    num_classes: int = 5
    thickness: tuple[float, float] = (1.2, 2.6)

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise KeyError(f"unknown domain transform {self.kind!r}; choose from {DOMAIN_KINDS}")
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")

    @property
    def classes(self) -> tuple[str, ...]:
        return SHAPES[: self.num_classes]

    def render(self, label: int, size: int, rng: np.random.Generator) -> np.ndarray:
        """uint8 [size, size, 3] image of class ``label``."""
        mask = render_mask(self.classes[label], size, rng, rng.uniform(*self.thickness))
        img = apply_domain(self.kind, mask, rng)
        return np.round(img * 255.0).astype(np.uint8)


# -- manifest -------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    domains: list[str]
    classes: list[str]
    image_size: int
    # (domain, split) -> list of [relative path, label]
    files: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    checksum: str = ""

    @staticmethod
    def key(domain: str, split: str) -> str:
        return f"{domain}/{split}"

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def entries(self, domain: str, split: str) -> list[tuple[str, int]]:
        return self.files.get(self.key(domain, split), [])

    def to_json(self) -> dict:
        return {"domains": self.domains, "classes": self.classes, "image_size": self.image_size,
                "files": {k: [list(e) for e in v] for k, v in self.files.items()},
                "checksum": self.checksum}

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return path

    def load(self, domain: str, split: str) -> tuple[Tensor, Tensor]:
        """Images as [n, 3, s, s] in [-1, 1] plus int64 labels."""
        entries = self.entries(domain, split)
        if not entries:
            raise FileNotFoundError(f"no images for {domain}/{split} under {self.root}")
        arr = np.stack([read_image(Path(self.root) / p, self.image_size) for p, _ in entries])
        labels = torch.tensor([lab for _, lab in entries], dtype=torch.long)
        return to_unit_range(arr), labels


def read_image(path: Path, size: int) -> np.ndarray:
    """uint8 [size, size, 3]; grayscale sources are replicated over channels."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise OSError(f"unreadable image {path}: {exc}") from exc


def to_unit_range(arr: np.ndarray) -> Tensor:
    """uint8 [n, h, w, 3] -> float [n, 3, h, w] in [-1, 1] (default dtype)."""
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    return t.to(torch.get_default_dtype()) / 127.5 - 1.0


def to_uint8(x: Tensor) -> np.ndarray:
    """float [n, 3, h, w] in [-1, 1] -> uint8 [n, h, w, 3]."""
    y = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return y.permute(0, 2, 3, 1).contiguous().numpy()


def folder_checksum(root: str | Path, relpaths: list[str]) -> str:
    h = hashlib.sha256()
    for rel in sorted(relpaths):
        h.update(rel.encode("utf-8"))
        h.update(b"\0")
        h.update(hashlib.sha256((Path(root) / rel).read_bytes()).digest())
    return h.hexdigest()


def generate_synthetic(specs: list[SyntheticDomainSpec], n_per_domain: int, seed: int, root: str | Path,
                       n_test_per_domain: int = 0, image_size: int = 32,
                       names: list[str] | None = None) -> DatasetManifest:
    """Render every domain's train (and test) split to PNG and write a manifest."""
    if len(specs) < 2:
        raise ValueError("need at least two domains")
    k = specs[0].num_classes
    if any(s.num_classes != k for s in specs):
        raise ValueError("all domains must share the class set")
    for n in (n_per_domain, n_test_per_domain):
        if n % k:
            raise ValueError(f"{n} images per domain is not divisible by {k} classes")
    names = names or [s.kind for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("domain names must be unique")
    root = Path(root)
    streams = SeedStreams(seed)
    classes = [f"{i}_{name}" for i, name in enumerate(specs[0].classes)]
    files: dict[str, list[tuple[str, int]]] = {}
    for spec, name in zip(specs, names):
        for split, n in (("train", n_per_domain), ("test", n_test_per_domain)):
            if n == 0:
                continue
            rng = streams.numpy(f"data/{name}/{split}")
            labels = np.repeat(np.arange(k), n // k)
            rng.shuffle(labels)
            entries = []
            for c in classes:
                (root / name / split / c).mkdir(parents=True, exist_ok=True)
            for i, lab in enumerate(labels):
                rel = f"{name}/{split}/{classes[lab]}/{i:05d}.png"
                Image.fromarray(spec.render(int(lab), image_size, rng), "RGB").save(root / rel, optimize=False)
                entries.append((rel, int(lab)))
            files[DatasetManifest.key(name, split)] = entries
    manifest = DatasetManifest(str(root), list(names), classes, image_size, files)
    manifest.checksum = folder_checksum(root, [p for v in files.values() for p, _ in v])
    manifest.save()
    return manifest


def load_folder(root: str | Path, image_size: int = 32, domains: list[str] | None = None) -> DatasetManifest:
    """Scan ``root/<domain>/<split>/<class>/*.png`` into a manifest.

    Domain order is taken from ``domains``, else from an existing
    ``manifest.json``, else alphabetical. The checksum is always recomputed
    from file contents.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if domains is None:
        mpath = root / "manifest.json"
        if mpath.exists():
            domains = json.loads(mpath.read_text())["domains"]
        else:
            domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    class_names: set[str] = set()
    for d in domains:
        for split_dir in (root / d).iterdir():
            if split_dir.is_dir():
                class_names.update(p.name for p in split_dir.iterdir() if p.is_dir())
    classes = sorted(class_names)
    files = {}
    for d in domains:
        if not (root / d).is_dir():
            raise FileNotFoundError(f"missing domain folder {root / d}")
        for split_dir in sorted(p for p in (root / d).iterdir() if p.is_dir()):
            entries = []
            for lab, c in enumerate(classes):
                cdir = split_dir / c
                if not cdir.is_dir():
                    continue
                pngs = sorted(cdir.glob("*.png"))
                if not pngs:
                    raise FileNotFoundError(f"empty class directory {cdir}")
                entries += [(str(p.relative_to(root)), lab) for p in pngs]
            entries.sort()
            files[DatasetManifest.key(d, split_dir.name)] = entries
    manifest = DatasetManifest(str(root), list(domains), classes, image_size, files)
    manifest.checksum = folder_checksum(root, [p for v in files.values() for p, _ in v])
    return manifest


# -- batch composition ------------------------------------------------------------


@dataclass
class Batch:
    x: Tensor          # [m, 3, s, s]
    l: Tensor          # input domain per image, 0-based
    lo: Tensor         # output domain per image
    xo: Tensor         # style image per image, drawn from domain lo
    index: Tensor      # index of x within its domain pool
    style_index: Tensor  # index of xo within domain lo's pool


class BatchComposer:
    """Stratified batches over per-domain image pools.

    Each batch holds at least two images from every domain; the remaining
    slots go to domains in proportion to pool size. Images are drawn without
    replacement from a per-domain shuffled order that is refreshed when it
    runs out. Output domains are uniform over all domains and each style
    image is uniform within its output domain's pool.
    """

    def __init__(self, pools: list[Tensor], m: int, content_rng: np.random.Generator,
                 style_rng: np.random.Generator, min_per_domain: int = 2):
        k = len(pools)
        if m < min_per_domain * k:
            raise ValueError(f"batch size {m} cannot hold {min_per_domain} images from each of {k} domains")
        for d, p in enumerate(pools):
            if p.shape[0] < min_per_domain:
                raise ValueError(f"domain {d} has fewer than {min_per_domain} images")
        self.pools = pools
        self.m = m
        self.min_per_domain = min_per_domain
        self.content_rng = content_rng
        self.style_rng = style_rng
        sizes = np.array([p.shape[0] for p in pools], dtype=np.float64)
        self.probs = sizes / sizes.sum()
        self._order = [content_rng.permutation(p.shape[0]) for p in pools]
        self._cursor = [0] * k

    @property
    def num_domains(self) -> int:
        return len(self.pools)

    def _take(self, d: int, n: int) -> np.ndarray:
        out = []
        while n > 0:
            order, cur = self._order[d], self._cursor[d]
            if cur >= len(order):
                self._order[d] = order = self.content_rng.permutation(len(order))
                self._cursor[d] = cur = 0
            take = min(n, len(order) - cur)
            out.append(order[cur:cur + take])
            self._cursor[d] = cur + take
            n -= take
        return np.concatenate(out)

    def plan(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(l, index, lo, style_index) as numpy arrays without touching images."""
        k = self.num_domains
        counts = np.full(k, self.min_per_domain)
        extra = self.m - counts.sum()
        if extra:
            counts += np.bincount(self.content_rng.choice(k, size=extra, p=self.probs), minlength=k)
        l = np.repeat(np.arange(k), counts)
        index = np.concatenate([self._take(d, int(c)) for d, c in enumerate(counts)])
        lo = self.style_rng.integers(0, k, size=self.m)
        sizes = np.array([p.shape[0] for p in self.pools])
        style_index = np.floor(self.style_rng.random(self.m) * sizes[lo]).astype(np.int64)
        return l, index, lo, style_index

    def next(self) -> Batch:
        l, index, lo, sidx = self.plan()
        x = torch.stack([self.pools[d][i] for d, i in zip(l, index)])
        xo = torch.stack([self.pools[d][i] for d, i in zip(lo, sidx)])
        t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.int64))  # noqa: E731
        return Batch(x, t(l), t(lo), xo, t(index), t(sidx))


def compose_batch(pools: list[Tensor], m: int, streams: SeedStreams) -> Batch:
    """One batch from a fresh composer seeded by ``streams``."""
    return BatchComposer(pools, m, streams.numpy("data/batches"), streams.numpy("style-pick")).next()


def specs_for(kinds: list[str] | tuple[str, ...], num_classes: int) -> list[SyntheticDomainSpec]:
    return [SyntheticDomainSpec(i, k, num_classes) for i, k in enumerate(kinds)]
