"""Command-line interface.

    trigan [--config F] [--seed N] [--out-dir D] [--precision 32|64] [--override k=v ...] <command> ...

Commands: gen-data, train-gan, translate, synth-target, train-cls, ablate,
gradcheck, report, pipeline.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import diffcore as dc
from .config import ExperimentConfig, parse_overrides, parse_text


def _log(msg: str) -> None:
    print(msg, flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trigan", description="Multi-source domain adaptation by image translation.")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out-dir", default="runs/default", help="output directory (default: %(default)s)")
    p.add_argument("--precision", type=int, choices=(32, 64), help="compute precision in bits")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def data_arg(sp):
        sp.add_argument("--data-root", help="dataset root (default: <out-dir>/data)")

    sp = sub.add_parser("gen-data", help="render the synthetic multi-domain dataset")
    data_arg(sp)

    sp = sub.add_parser("train-gan", help="adversarially train the translator")
    data_arg(sp)

    sp = sub.add_parser("translate", help="translate images with a trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", nargs="+", required=True, help="input PNG files")
    sp.add_argument("--input-domain", type=int, required=True)
    sp.add_argument("--output-domain", type=int, required=True)
    sp.add_argument("--style", required=True, help="style reference PNG from the output domain")
    sp.add_argument("--output", required=True, help="output directory for translated PNGs")

    sp = sub.add_parser("synth-target", help="build the translated, labeled target training set")
    sp.add_argument("--checkpoint", required=True)
    data_arg(sp)

    sp = sub.add_parser("train-cls", help="train a target classifier and report target accuracy")
    sp.add_argument("--train", choices=("trigan", "source", "oracle"), default="trigan")
    sp.add_argument("--target-set", help="target set .npz (default: <out-dir>/target_set.npz)")
    data_arg(sp)

    sp = sub.add_parser("ablate", help="train one ablation variant")
    sp.add_argument("variant", choices=list("ABCDEF"))
    data_arg(sp)

    sp = sub.add_parser("gradcheck", help="run every registered finite-difference gradient check")
    sp.add_argument("--only", nargs="*", help="subset of check names")

    sp = sub.add_parser("report", help="summarize a run directory")
    sp.add_argument("--run-dir", help="run directory (default: <out-dir>)")

    sp = sub.add_parser("pipeline", help="data, translator, target set and all classifiers")
    data_arg(sp)
    return p


def resolve_config(args) -> ExperimentConfig:
    pairs = parse_text(Path(args.config).read_text()) if args.config else {}
    pairs.update(parse_overrides(args.override))
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.precision is not None:
        pairs["precision"] = str(args.precision)
    return ExperimentConfig.from_pairs(pairs)


def _data_root(args) -> Path:
    return Path(args.data_root) if getattr(args, "data_root", None) else Path(args.out_dir) / "data"


def cmd_gen_data(args, cfg):
    from .pipeline import prepare_data

    m = prepare_data(cfg, _data_root(args))
    _log(f"dataset at {m.root}: domains={m.domains} classes={len(m.classes)} checksum={m.checksum}")
    return 0


def _train(args, cfg, out: Path):
    from .pipeline import load_pools, prepare_data
    from .training import gan_train, parameter_fingerprint

    manifest = prepare_data(cfg, _data_root(args))
    pools = [x for x, _ in load_pools(manifest)]
    run = gan_train(cfg, pools, out, _log)
    fp = {"variant": cfg.variant, "consistency": run.consistency,
          "generator": parameter_fingerprint(run.G), "discriminator": parameter_fingerprint(run.D)}
    (out / "fingerprint.json").write_text(json.dumps(fp, indent=1))
    _log(f"trained {run.steps} steps; metrics at {run.metrics_path}")
    return 0


def cmd_train_gan(args, cfg):
    return _train(args, cfg, Path(args.out_dir) / "gan")


def cmd_ablate(args, cfg):
    cfg = cfg.replace(variant=args.variant)
    return _train(args, cfg, Path(args.out_dir) / f"ablate_{args.variant}")


def cmd_translate(args, cfg):
    from .data import read_image, to_uint8, to_unit_range
    from .training import load_models

    G, _, ccfg = load_models(args.checkpoint)
    size = ccfg.image_size
    x = to_unit_range(np.stack([read_image(Path(p), size) for p in args.input]))
    xs = to_unit_range(read_image(Path(args.style), size)[None]).expand(x.shape[0], -1, -1, -1)
    k = ccfg.num_domains
    for d in (args.input_domain, args.output_domain):
        if not 0 <= d < k:
            raise SystemExit(f"domain label {d} outside [0, {k})")
    m = x.shape[0]
    with torch.no_grad():
        out = G(x, torch.full((m,), args.input_domain), torch.full((m,), args.output_domain),
                style=G.style_params(xs))
    dest = Path(args.output)
    dest.mkdir(parents=True, exist_ok=True)
    for p, img in zip(args.input, to_uint8(out)):
        Image.fromarray(img, "RGB").save(dest / Path(p).name)
    _log(f"wrote {m} images to {dest}")
    return 0


def cmd_synth_target(args, cfg):
    from .pipeline import load_pools, prepare_data
    from .streams import SeedStreams
    from .training import load_models, synthesize_target_set

    G, _, ccfg = load_models(args.checkpoint)
    manifest = prepare_data(ccfg, _data_root(args))
    train = load_pools(manifest)
    sources = [(x, y, d) for d, (x, y) in enumerate(train[:-1])]
    tset = synthesize_target_set(G, sources, train[-1][0], cfg.synth_epochs,
                                 SeedStreams(cfg.seed).numpy("style-pick/synth"), ccfg.num_domains - 1,
                                 cfg.batch_size, cfg.include_sources)
    out = Path(args.out_dir) / "target_set.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    tset.save(out)
    _log(f"target set: {len(tset)} images -> {out}")
    return 0


def cmd_train_cls(args, cfg):
    from .pipeline import load_pools, prepare_data
    from .streams import SeedStreams
    from .training import SyntheticTargetSet, classifier_train

    manifest = prepare_data(cfg, _data_root(args))
    train = load_pools(manifest)
    test = manifest.load(manifest.domains[-1], "test")
    if args.train == "source":
        sets = [(torch.cat([x for x, _ in train[:-1]]), torch.cat([y for _, y in train[:-1]]))]
    elif args.train == "oracle":
        sets = [train[-1]]
    else:
        tset = SyntheticTargetSet.load(args.target_set or Path(args.out_dir) / "target_set.npz")
        sets = [tset.epoch_slice(e) for e in tset.epochs]
    res = classifier_train(sets, test, cfg, SeedStreams(cfg.seed), {"source": "source_only"}.get(args.train, args.train),
                           _log)
    out = Path(args.out_dir) / f"cls_{args.train}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"train": args.train, "target_acc": res.accuracy, "history": res.history}, indent=1))
    _log(f"target accuracy ({args.train}): {res.accuracy:.4f}")
    return 0


def cmd_gradcheck(args, cfg):
    from .checks import REGISTRY, run_checks

    names = args.only or None
    if names:
        unknown = [n for n in names if n not in REGISTRY]
        if unknown:
            raise SystemExit(f"unknown checks: {unknown}")
    results = run_checks(names, seed=cfg.seed)
    for r in results:
        _log(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} err={r.error:.3e} thr={r.threshold:.0e} ({r.seconds:.2f}s)")
    ok = all(r.passed for r in results)
    _log(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def cmd_report(args, cfg):
    from .report import render_report

    print(render_report(args.run_dir or args.out_dir))
    return 0


def cmd_pipeline(args, cfg):
    from .pipeline import run_pipeline

    t = time.perf_counter()
    res = run_pipeline(cfg, args.out_dir, _data_root(args), _log)
    _log(json.dumps({k: v for k, v in res.items() if k != "history"}, indent=1))
    _log(f"total {time.perf_counter() - t:.1f}s")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-gan": cmd_train_gan,
    "translate": cmd_translate,
    "synth-target": cmd_synth_target,
    "train-cls": cmd_train_cls,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError) as exc:
        parser.error(str(exc))
    dc.set_precision(cfg.precision)
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
