"""Differentiable building blocks used by every network in the package.

All ops are thin, checked wrappers over torch: they validate shapes, keep
reverse-mode differentiability, and refuse to hand back non-finite values.
The module also carries the Adam optimizer, the finite-difference gradient
checker and the binary checkpoint container.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "DecompositionError",
    "set_precision",
    "dtype_for",
    "check_finite",
    "conv2d",
    "linear",
    "relu",
    "leaky_relu",
    "avg_pool_2x2",
    "upsample_nearest_2x",
    "add",
    "elementwise_mul",
    "mean_over",
    "matmul",
    "concat",
    "cholesky",
    "triangular_inverse",
    "affine_grid_sample",
    "Adam",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_header",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class DecompositionError(RuntimeError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, where: str = ""):
        self.pivot = pivot
        self.where = where
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}Cholesky decomposition failed at pivot index {pivot} (matrix not positive-definite)")


_DTYPES = {32: torch.float32, 64: torch.float64}

# Finite checks cost one reduction per op; they can be switched off for
# benchmarking but stay on by default.
CHECK_FINITE = True


def dtype_for(bits: int) -> torch.dtype:
    try:
        return _DTYPES[int(bits)]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {bits!r}") from None


def set_precision(bits: int) -> torch.dtype:
    """Make ``bits``-wide floats the default dtype for new tensors."""
    dtype = dtype_for(bits)
    torch.set_default_dtype(dtype)
    return dtype


def check_finite(x: Tensor, what: str) -> Tensor:
    # a sum is non-finite iff some element is (or the total overflows, which
    # is worth flagging too); one pass instead of isfinite().all()
    if CHECK_FINITE and not math.isfinite(float(x.detach().sum())):
        raise NonFiniteError(f"non-finite values produced by {what}")
    return x


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation; ``padding`` defaults to "same"."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {tuple(x.shape)} and {tuple(weight.shape)}")
    k = weight.shape[-1]
    if weight.shape[-2] != k or k not in (1, 3, 5):
        raise ShapeError(f"conv2d kernel must be square with k in (1, 3, 5), got {tuple(weight.shape[-2:])}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    if padding is None:
        padding = k // 2
    return check_finite(F.conv2d(x, weight, bias, padding=padding), "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear dimension mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    return check_finite(F.linear(x, weight, bias), "linear")


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return F.leaky_relu(x, slope)


def avg_pool_2x2(x: Tensor) -> Tensor:
    if x.dim() != 4 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"avg_pool_2x2 needs even spatial extents, got {tuple(x.shape)}")
    return F.avg_pool2d(x, 2)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    if x.dim() != 4:
        raise ShapeError(f"upsample_nearest_2x expects NCHW, got {tuple(x.shape)}")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def mean_over(x: Tensor, dims: int | Sequence[int], keepdim: bool = False) -> Tensor:
    return x.mean(dim=dims, keepdim=keepdim)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def concat(tensors: Sequence[Tensor], dim: int = 1) -> Tensor:
    return torch.cat(list(tensors), dim=dim)


def cholesky(a: Tensor, where: str = "") -> Tensor:
    """Lower Cholesky factor of a (batch of) SPD matrices.

    Raises DecompositionError naming the first failing pivot; for batched
    input the earliest failing matrix is reported.
    """
    if a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"cholesky needs square matrices, got {tuple(a.shape)}")
    L, info = torch.linalg.cholesky_ex(a)
    bad = info.reshape(-1)
    if bool((bad != 0).any()):
        # info holds the 1-based order of the failing leading minor
        first = int(bad[bad != 0][0])
        raise DecompositionError(first - 1, where)
    return check_finite(L, f"cholesky{' ' + where if where else ''}")


def triangular_inverse(L: Tensor) -> Tensor:
    """Inverse of a lower-triangular matrix (or batch) by forward substitution."""
    if L.shape[-1] != L.shape[-2]:
        raise ShapeError(f"triangular_inverse needs square matrices, got {tuple(L.shape)}")
    diag = torch.diagonal(L, dim1=-2, dim2=-1)
    if bool((diag == 0).any()):
        raise ZeroDivisionError("triangular_inverse: zero on the diagonal")
    eye = torch.eye(L.shape[-1], dtype=L.dtype, device=L.device).expand_as(L)
    return check_finite(torch.linalg.solve_triangular(L, eye, upper=False), "triangular_inverse")


def affine_grid_sample(x: Tensor, theta: Tensor) -> Tensor:
    """Bilinear warp: output(p) = x(theta @ [p, 1]) in [-1, 1]^2 coordinates.

    Samples outside the image read as zero. ``theta`` is [N, 2, 3] and is
    treated as a constant.
    """
    if x.dim() != 4 or theta.shape != (x.shape[0], 2, 3):
        raise ShapeError(f"affine_grid_sample expects x [N,C,H,W] and theta [N,2,3], got {tuple(x.shape)}, {tuple(theta.shape)}")
    n, c, h, w = x.shape
    theta = theta.detach().to(x.dtype)
    # Pixel-centred coordinates (j + 0.5 - W/2) are exact half-integers, so the
    # identity and whole-pixel shifts land exactly on source pixels.
    cx = torch.arange(w, dtype=x.dtype) + 0.5 - w / 2
    cy = torch.arange(h, dtype=x.dtype) + 0.5 - h / 2
    cy, cx = torch.meshgrid(cy, cx, indexing="ij")
    cx = cx.reshape(1, -1)
    cy = cy.reshape(1, -1)
    t = theta.reshape(n, 6, 1)
    u = t[:, 0] * cx + t[:, 1] * (w / h) * cy + (w / 2) * t[:, 2] + (w / 2 - 0.5)
    v = t[:, 3] * (h / w) * cx + t[:, 4] * cy + (h / 2) * t[:, 5] + (h / 2 - 0.5)
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    fu = u - u0
    fv = v - v0
    flat = x.reshape(n, c, h * w)
    out = torch.zeros_like(flat)
    for du, dv, wt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu = u0 + du
        vv = v0 + dv
        inside = (uu >= 0) & (uu <= w - 1) & (vv >= 0) & (vv <= h - 1)
        idx = (vv.clamp(0, h - 1) * w + uu.clamp(0, w - 1)).long()
        vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(n, c, h * w))
        out = out + vals * (wt * inside).unsqueeze(1)
    return check_finite(out.reshape(n, c, h, w), "affine_grid_sample")


class Adam:
    """Adam with bias correction over a list of named parameters.

    Moment buffers live here, keyed by parameter name, so a checkpoint can
    store them next to the weights.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, Tensor]],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params: dict[str, Tensor] = {}
        for name, p in named_params:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = p
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: Mapping[str, Tensor | None]) -> None:
        for name, g in grads.items():
            if g is not None and not bool(torch.isfinite(g).all()):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m / c1, denom, value=-self.lr)

    def step_from_loss(self, loss: Tensor) -> dict[str, Tensor]:
        """Differentiate ``loss`` w.r.t. this optimizer's params only and step."""
        names = list(self.params)
        gs = torch.autograd.grad(loss, [self.params[n] for n in names], allow_unused=True)
        grads = {n: g for n, g in zip(names, gs)}
        self.step(grads)
        return grads

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``inputs``. The error per
    element is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*xs)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    ad = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, ad):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * eps)
                a = gflat[i].item()
                err = abs(a - fd) / max(1.0, abs(a), abs(fd))
                worst = max(worst, err)
    return worst


# -- checkpoint container ---------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"TRIGANCK"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header
#   ...       raw data blob; every entry's offsets are relative to its start
#
# Header keys: format_version, precision (32|64), byte_order ("little"),
# meta (free-form), entries: [{name, kind ("param"|"buffer"), dtype, shape,
# offset, nbytes, adam: {step, m_offset, v_offset} | null}].

CHECKPOINT_MAGIC = b"TRIGANCK"
CHECKPOINT_VERSION = 1


def _le_bytes(t: Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(
    path: str | os.PathLike,
    parts: Sequence[tuple[str, torch.nn.Module, Adam | None]],
    precision: int,
    meta: Mapping | None = None,
) -> None:
    """Write modules (+ optional Adam state) to ``path`` atomically.

    ``parts`` holds ``(prefix, module, optimizer)``; entry names are
    ``prefix + parameter name``. The optimizer must have been built from the
    module's ``named_parameters()`` (names without prefix).
    """
    blob = io.BytesIO()
    entries = []

    def put(t: Tensor) -> tuple[int, int]:
        data = _le_bytes(t)
        off = blob.tell()
        blob.write(data)
        return off, len(data)

    for prefix, module, opt in parts:
        for name, p in module.named_parameters():
            off, n = put(p)
            adam = None
            if opt is not None and name in opt.params:
                m_off, _ = put(opt.m[name])
                v_off, _ = put(opt.v[name])
                adam = {"step": opt.step_count, "m_offset": m_off, "v_offset": v_off}
            entries.append({
                "name": prefix + name, "kind": "param", "dtype": str(p.dtype).replace("torch.", ""),
                "shape": list(p.shape), "offset": off, "nbytes": n, "adam": adam,
            })
        for name, b in module.named_buffers():
            off, n = put(b)
            entries.append({
                "name": prefix + name, "kind": "buffer", "dtype": str(b.dtype).replace("torch.", ""),
                "shape": list(b.shape), "offset": off, "nbytes": n, "adam": None,
            })
    header = {
        "format_version": CHECKPOINT_VERSION,
        "precision": int(precision),
        "byte_order": "little",
        "meta": dict(meta or {}),
        "entries": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob.getvalue())
    os.replace(tmp, path)


def _read_checkpoint(path: str | os.PathLike) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header, raw[12 + hlen:]


def checkpoint_header(path: str | os.PathLike) -> dict:
    return _read_checkpoint(path)[0]


def load_checkpoint(
    path: str | os.PathLike,
    parts: Sequence[tuple[str, torch.nn.Module, Adam | None]],
    strict: bool = True,
) -> dict:
    """Restore modules (and Adam moments) saved by :func:`save_checkpoint`.

    Returns the header. With ``strict`` every module tensor must be present.
    """
    header, blob = _read_checkpoint(path)
    by_name = {e["name"]: e for e in header["entries"]}

    def get(entry: dict, offset: int) -> Tensor:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(entry["shape"])

    with torch.no_grad():
        for prefix, module, opt in parts:
            tensors = list(module.named_parameters()) + list(module.named_buffers())
            for name, t in tensors:
                entry = by_name.get(prefix + name)
                if entry is None:
                    if strict:
                        raise KeyError(f"{path}: missing entry {prefix + name!r}")
                    continue
                if list(t.shape) != entry["shape"]:
                    raise ShapeError(f"{prefix + name}: checkpoint shape {entry['shape']} != model {list(t.shape)}")
                t.copy_(get(entry, entry["offset"]).to(t.dtype))
                if opt is not None and entry["adam"] is not None and name in opt.params:
                    opt.m[name].copy_(get(entry, entry["adam"]["m_offset"]))
                    opt.v[name].copy_(get(entry, entry["adam"]["v_offset"]))
                    opt.step_count = int(entry["adam"]["step"])
    return header
