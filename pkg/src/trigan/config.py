"""Experiment configuration: one flat ``key = value`` text file.

Values are parsed according to the field's declared type; tuples are
comma-separated. Lines starting with ``#`` are comments. Unknown keys are
errors so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class ExperimentConfig:
    seed: int = 0
    precision: int = 32

    # data
    domains: tuple[str, ...] = ("grayscale-on-white", "hue-rotated", "color-inverted")
    num_classes: int = 5
    image_size: int = 32
    n_per_domain: int = 2000
    n_test_per_domain: int = 500

    # generator
    stem_channels: int = 32
    iwt_channels: tuple[int, ...] = (64, 128)
    ada_channels: tuple[int, ...] = (64, 32)
    mlp_hidden: tuple[int, ...] = (256, 128, 128, 256)
    max_group: int = 32
    wc_eps: float = 1e-3
    gamma_noise: float = 0.01

    # discriminator
    d_channels: tuple[int, ...] = (64, 128)
    power_iterations: int = 1

    # adversarial training
    variant: str = "A"
    epochs: int = 30
    batch_size: int = 64
    max_steps: int = 0  # 0 = no cap
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lam: float = 10.0
    rot_deg: float = 15.0
    scale_min: float = 0.85
    scale_max: float = 1.15
    translate: float = 0.1
    shear: float = 0.0
    grid_rows: int = 8
    checkpoint_every: int = 1

    # target synthesis and classifier
    synth_epochs: int = 10
    include_sources: bool = False
    cls_epochs: int = 10
    cls_batch: int = 64
    cls_lr: float = 1e-3
    cls_channels: tuple[int, ...] = (32, 64, 128)
    cls_hidden: int = 128

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.variant not in "ABCDEF" or len(self.variant) != 1:
            raise ValueError(f"unknown ablation variant {self.variant!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if len(self.domains) < 2:
            raise ValueError("need at least two domains")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("scale range must satisfy 0 < scale_min <= scale_max")

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    # -- serialization -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        base = base or cls()
        types = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in pairs.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = _parse(types[key], raw, key)
        return dataclasses.replace(base, **values)

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "ExperimentConfig":
        pairs = parse_text(Path(path).read_text())
        pairs.update(parse_overrides(overrides or []))
        return cls.from_pairs(pairs)


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse(tp, raw: str, key: str):
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp in (int, float, str):
            return tp(raw)
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(inner(x.strip()) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {raw!r}") from exc
    raise TypeError(f"unsupported config type for {key}: {tp}")
