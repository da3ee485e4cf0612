"""Named random sub-streams derived from one root seed.

Each consumer asks for its own stream by name ("data", "theta", "style-pick",
"init", ...). A stream's seed depends only on (root seed, name), so adding or
removing draws in one consumer never shifts another consumer's numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(root)}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


class SeedStreams:
    def __init__(self, root: int):
        self.root = int(root)

    def seed(self, name: str) -> int:
        return derive_seed(self.root, name)

    def torch(self, name: str) -> torch.Generator:
        return torch.Generator().manual_seed(self.seed(name))

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.seed(name))

    def child(self, name: str) -> "SeedStreams":
        return SeedStreams(self.seed(name))
