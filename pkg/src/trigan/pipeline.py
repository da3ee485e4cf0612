"""End-to-end experiment: data -> translator -> synthetic target set -> classifiers."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import diffcore as dc
from .config import ExperimentConfig
from .data import DatasetManifest, generate_synthetic, load_folder, specs_for
from .streams import SeedStreams
from .training import (
    accuracy,
    classifier_train,
    gan_train,
    synthesize_target_set,
)


def prepare_data(cfg: ExperimentConfig, root: str | Path) -> DatasetManifest:
    """Reuse a dataset under ``root`` if it matches its manifest, else generate it."""
    root = Path(root)
    mpath = root / "manifest.json"
    if mpath.exists():
        saved = json.loads(mpath.read_text())
        sizes = {k: len(v) for k, v in saved["files"].items()}
        want = {f"{d}/{s}": n for d in cfg.domains
                for s, n in (("train", cfg.n_per_domain), ("test", cfg.n_test_per_domain)) if n}
        if (saved["domains"] == list(cfg.domains) and len(saved["classes"]) == cfg.num_classes
                and saved["image_size"] == cfg.image_size and sizes == want):
            manifest = load_folder(root, cfg.image_size)
            if manifest.checksum == saved["checksum"]:
                return manifest
    return generate_synthetic(specs_for(cfg.domains, cfg.num_classes), cfg.n_per_domain, cfg.seed, root,
                              n_test_per_domain=cfg.n_test_per_domain, image_size=cfg.image_size,
                              names=list(cfg.domains))


def load_pools(manifest: DatasetManifest, split: str = "train") -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [manifest.load(d, split) for d in manifest.domains]


def run_pipeline(cfg: ExperimentConfig, out_dir: str | Path, data_root: str | Path | None = None,
                 log: Callable[[str], None] | None = None) -> dict:
    """Run every stage and write ``results.json``; returns the same dict."""
    dc.set_precision(cfg.precision)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    t = time.perf_counter()
    manifest = prepare_data(cfg, data_root or out_dir / "data")
    train = load_pools(manifest, "train")
    x_test, y_test = manifest.load(manifest.domains[-1], "test")
    timings["data_s"] = time.perf_counter() - t

    t = time.perf_counter()
    run = gan_train(cfg, [x for x, _ in train], out_dir / "gan", log)
    timings["gan_s"] = time.perf_counter() - t

    t = time.perf_counter()
    streams = SeedStreams(cfg.seed)
    target = cfg.num_domains - 1
    sources = [(x, y, d) for d, (x, y) in enumerate(train[:-1])]
    tset = synthesize_target_set(run.G, sources, train[-1][0], cfg.synth_epochs, streams.numpy("style-pick/synth"),
                                 target, cfg.batch_size, cfg.include_sources)
    tset.save(out_dir / "target_set.npz")
    timings["synth_s"] = time.perf_counter() - t

    t = time.perf_counter()
    test = (x_test, y_test)
    src_x = torch.cat([x for x, _, _ in sources])
    src_y = torch.cat([y for _, y, _ in sources])
    source_only = classifier_train([(src_x, src_y)], test, cfg, streams, "source_only", log)
    oracle = classifier_train([train[-1]], test, cfg, streams, "oracle", log)
    slices = [tset.epoch_slice(e) for e in tset.epochs]
    trigan = classifier_train(slices, test, cfg, streams, "trigan", log)
    timings["classifiers_s"] = time.perf_counter() - t

    # content preservation: the oracle target classifier reads translated images
    last_x, last_y = tset.epoch_slice(tset.epochs[-1], with_sources=False)
    content = accuracy(oracle.model, last_x, torch.from_numpy(last_y))
    results = {
        "source_only_acc": source_only.accuracy,
        "oracle_acc": oracle.accuracy,
        "trigan_acc": trigan.accuracy,
        "uplift_pp": 100.0 * (trigan.accuracy - source_only.accuracy),
        "content_preservation": content,
        "target_set_size": len(tset),
        "gan_steps": run.steps,
        "timings": timings,
        "total_s": float(sum(timings.values())),
        "history": {"source_only": source_only.history, "oracle": oracle.history, "trigan": trigan.history},
        "data_checksum": manifest.checksum,
    }
    (out_dir / "results.json").write_text(json.dumps(results, indent=1))
    return results


def summarize_direction_counts(path: str | Path) -> dict[int, np.ndarray]:
    """Per-epoch (l, l^O) count matrices from ``directions.csv``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    k = max(int(r["l"]) for r in rows) + 1
    out: dict[int, np.ndarray] = {}
    for r in rows:
        e = int(r["epoch"])
        out.setdefault(e, np.zeros((k, k), dtype=np.int64))[int(r["l"]), int(r["lo"])] = int(r["count"])
    return out
