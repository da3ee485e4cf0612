import json
from pathlib import Path

import pytest

from trigan.cli import main
from trigan.config import ExperimentConfig, parse_overrides, parse_text

TINY = ["image_size=16", "stem_channels=4", "iwt_channels=8,8", "ada_channels=8,4", "mlp_hidden=8,8",
        "max_group=8", "d_channels=4,8", "n_per_domain=10", "n_test_per_domain=5", "batch_size=6",
        "epochs=1", "grid_rows=2", "synth_epochs=1", "cls_epochs=1", "cls_channels=4,4,4", "cls_hidden=8"]


def tiny_args(tmp_path, *rest):
    args = ["--out-dir", str(tmp_path / "run")]
    for kv in TINY:
        args += ["--override", kv]
    return args + list(rest)


def test_parse_text_and_types():
    pairs = parse_text("# comment\nseed = 3\n\nlam = 2.5  \niwt_channels = 8, 16\ninclude_sources = true\n")
    cfg = ExperimentConfig.from_pairs(pairs)
    assert cfg.seed == 3 and cfg.lam == 2.5 and cfg.iwt_channels == (8, 16) and cfg.include_sources is True
    with pytest.raises(ValueError):
        parse_text("seed 3")


def test_round_trip_and_overrides(tmp_path):
    cfg = ExperimentConfig(seed=7)
    cfg.save(tmp_path / "c.cfg")
    back = ExperimentConfig.load(tmp_path / "c.cfg", ["lr_g=0.001", "variant=B"])
    assert back == cfg.replace(lr_g=0.001, variant="B")
    assert parse_overrides(["a=1", "b = x"]) == {"a": "1", "b": "x"}
    with pytest.raises(ValueError):
        parse_overrides(["novalue"])


def test_validation_errors():
    with pytest.raises(KeyError):
        ExperimentConfig.from_pairs({"learning_rate": "1"})
    with pytest.raises(ValueError):
        ExperimentConfig.from_pairs({"seed": "abc"})
    for bad in (dict(precision=16), dict(variant="Z"), dict(lam=-1.0), dict(scale_min=2.0)):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)


def test_desk_config_loads():
    cfg = ExperimentConfig.load(Path(__file__).parent.parent / "configs" / "desk.cfg")
    assert cfg.num_domains == 3 and cfg.n_per_domain == 2000 and cfg.epochs == 30


def test_unknown_key_and_flag_exit_nonzero(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["--override", "bogus=1", "gen-data"])
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        main(["--no-such-flag", "gen-data"])
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        main(["ablate", "Q"])
    assert e.value.code != 0


def test_gradcheck_subset_exit_code(capsys):
    assert main(["gradcheck", "--only", "conv2d", "cholesky"]) == 0
    out = capsys.readouterr().out
    assert "PASS conv2d" in out and "2/2 checks passed" in out
    with pytest.raises(SystemExit):
        main(["gradcheck", "--only", "nope"])


def test_cli_end_to_end_tiny(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(tiny_args(tmp_path, "gen-data")) == 0
    assert (run / "data" / "manifest.json").exists()
    assert main(tiny_args(tmp_path, "train-gan")) == 0
    fp = json.loads((run / "gan" / "fingerprint.json").read_text())
    assert fp["variant"] == "A" and fp["consistency"] == "eq"
    ckpt = run / "gan" / "ckpt_e1.trg"

    assert main(tiny_args(tmp_path, "synth-target", "--checkpoint", str(ckpt))) == 0
    assert (run / "target_set.npz").exists()
    assert main(tiny_args(tmp_path, "train-cls", "--train", "trigan")) == 0
    res = json.loads((run / "cls_trigan.json").read_text())
    assert 0.0 <= res["target_acc"] <= 1.0

    pngs = sorted((run / "data").glob("grayscale-on-white/test/*/*.png"))[:2]
    style = next((run / "data").glob("color-inverted/test/*/*.png"))
    out_dir = tmp_path / "translated"
    assert main(tiny_args(tmp_path, "translate", "--checkpoint", str(ckpt), "--input", *map(str, pngs),
                          "--input-domain", "0", "--output-domain", "2", "--style", str(style),
                          "--output", str(out_dir))) == 0
    assert sorted(p.name for p in out_dir.iterdir()) == sorted(p.name for p in pngs)
    with pytest.raises(SystemExit):
        main(tiny_args(tmp_path, "translate", "--checkpoint", str(ckpt), "--input", str(pngs[0]),
                       "--input-domain", "0", "--output-domain", "5", "--style", str(style),
                       "--output", str(out_dir)))

    assert main(tiny_args(tmp_path, "report", "--run-dir", str(run / "gan"))) == 0
    assert (run / "gan" / "report.md").read_text().startswith("## Adversarial training")


def test_ablate_cycle_variant_logs_cycle_loss(tmp_path):
    assert main(tiny_args(tmp_path, "--override", "max_steps=2", "ablate", "B")) == 0
    header = (tmp_path / "run" / "ablate_B" / "metrics.csv").read_text().splitlines()[0]
    assert "loss_cycle" in header and "loss_eq" not in header


def test_pipeline_tiny_writes_results_and_report(tmp_path):
    assert main(tiny_args(tmp_path, "pipeline")) == 0
    res = json.loads((tmp_path / "run" / "results.json").read_text())
    for k in ("source_only_acc", "oracle_acc", "trigan_acc", "uplift_pp", "target_set_size"):
        assert k in res
    assert res["target_set_size"] == 20
    assert main(tiny_args(tmp_path, "report")) == 0
    assert (tmp_path / "run" / "uplift.png").exists()
