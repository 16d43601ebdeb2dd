import json

import pytest

from unrolled_lrp import cli
from unrolled_lrp.cli import ConfigError, RunConfig, load_config, main, parse_overrides


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--set", f"data_dir={root / 'd'}", "--set", "n_images=30", "--set", "n_train=20",
               "--set", 'scene={"height": 16, "width": 16, "size_range": [0.12, 0.2], "max_objects": 2}') == 0
    common = ["--set", f"data_dir={root / 'd'}", "--set", "width=3", "--set", "steps_per_epoch=2"]
    assert run("pretrain", *common, "--set", f"out_dir={root / 'pre'}", "--set", "epochs=1") == 0
    assert run("train", *common, "--set", f"out_dir={root / 'run'}", "--set", "epochs=2", "--set", "regime=4",
               "--set", f"pretrained={root / 'pre' / 'pretrain.ckpt'}", "--set", "export_ids=[20, 21]") == 0
    return root


class TestConfig:
    def test_overrides_parse_json(self):
        assert parse_overrides(["lr=0.01", "out_dir=runs/x", "export_ids=[1,2]"]) == \
            {"lr": 0.01, "out_dir": "runs/x", "export_ids": [1, 2]}

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            parse_overrides(["lr"])

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            load_config(RunConfig, None, {"bogus": 1})

    @pytest.mark.parametrize("field,value", [("model_kind", "resnet"), ("encoder_preset", "vgg16"), ("lr", -1.0),
                                             ("epochs", -1), ("regime", 0), ("batch_size", 2.5)])
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigError):
            load_config(RunConfig, None, {field: value})

    def test_file_then_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"lr": 0.5, "epochs": 3}))
        cfg = load_config(RunConfig, p, {"epochs": 4})
        assert (cfg.lr, cfg.epochs) == (0.5, 4)

    def test_single_class_rejected_before_generation(self, tmp_path, capsys):
        code = run("gen-data", "--set", f"data_dir={tmp_path / 'd'}",
                   "--set", 'scene={"palette": [["a", "circle", [1, 0, 0]]]}')
        assert code == 2 and not (tmp_path / "d").exists()
        assert "foreground" in capsys.readouterr().err


class TestGenData:
    def test_same_config_identical_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--set", f"data_dir={tmp_path / name}", "--set", "n_images=4",
                       "--set", "n_train=3", "--set", 'scene={"height": 16, "width": 16}') == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        meta = json.loads((tmp_path / "a" / "meta.json").read_text())
        assert meta["config"]["height"] == 16 and meta["n_train"] == 3

    def test_default_split(self):
        cfg = load_config(cli.DataConfig)
        assert (cfg.n_images, cfg.n_train) == (1000, 800)


class TestTrainEvalExport:
    def test_outputs(self, workspace):
        out = workspace / "run"
        for name in ("model.ckpt", "history.csv", "config.json", "summary.json"):
            assert (out / name).exists()
        assert json.loads((out / "config.json").read_text())["regime"] == 4

    def test_eval_matches_best_history_row(self, workspace, capsys):
        out = workspace / "run"
        assert run("eval", out / "model.ckpt", "--data-dir", workspace / "d") == 0
        rows = [line.split(",") for line in (out / "history.csv").read_text().splitlines()[1:]]
        best = max(float(r[2]) for r in rows if r[1] == "val")
        report = json.loads((out / "eval_val.json").read_text())
        assert report["miou"] == best
        assert set(report["per_class"]) == {"background", "circle", "square", "triangle", "cross"}
        assert f"mIoU {best:.4f}" in capsys.readouterr().out

    def test_history_deterministic(self, workspace):
        assert run("train", "--config", workspace / "run" / "config.json",
                   "--set", f"out_dir={workspace / 'run2'}", "--set", "export_ids=null") == 0
        assert (workspace / "run2" / "history.csv").read_bytes() == (workspace / "run" / "history.csv").read_bytes()

    def test_kind_mismatch(self, workspace, capsys):
        assert run("eval", workspace / "run" / "model.ckpt", "--data-dir", workspace / "d",
                   "--set", "model_kind=unet") == 2
        assert "unet" in capsys.readouterr().err

    def test_missing_checkpoint(self, workspace):
        assert run("eval", workspace / "nope.ckpt", "--data-dir", workspace / "d") == 2

    def test_missing_data(self, workspace, tmp_path):
        assert run("train", "--set", f"data_dir={tmp_path / 'none'}", "--set", f"out_dir={tmp_path / 'o'}") == 2

    def test_export_one_image(self, workspace, tmp_path):
        assert run("export", workspace / "run" / "model.ckpt", "--data-dir", workspace / "d",
                   "--ids", 22, "--out", tmp_path / "ex") == 0
        pngs = sorted(p.name for p in (tmp_path / "ex").glob("*.png"))
        assert len(pngs) == 5 + 1 and "0022_seg.png" in pngs

    def test_export_unknown_id(self, workspace, tmp_path):
        assert run("export", workspace / "run" / "model.ckpt", "--data-dir", workspace / "d",
                   "--ids", 3, "--out", tmp_path / "ex") == 2

    def test_per_epoch_export(self, workspace):
        for epoch in (1, 2):
            d = workspace / "run" / "export" / f"epoch_{epoch:03d}"
            assert len(list(d.glob("*.png"))) == 2 * 6


class TestCheckVerb:
    def test_exit_codes(self, tmp_path, monkeypatch):
        small = dict(width=3, size=8, batch=2, fd_samples=4)
        real = cli.checks.SuiteConfig
        monkeypatch.setattr(cli.checks, "SuiteConfig", lambda **kw: real(**kw, **small))
        assert run("check", "--seeds", 1, "--presets", "vgg-mini", "--out", tmp_path / "ok.csv") == 0
        assert run("check", "--seeds", 1, "--presets", "vgg-mini", "--fault", "unflipped-kernels",
                   "--out", tmp_path / "bad.csv") == 1
        assert (tmp_path / "bad.csv").read_text().count(",fail,") > 0


class TestSweep:
    def test_tiny_sweep_is_resumable(self, tmp_path):
        args = ["sweep", "--set", f"out_dir={tmp_path / 's'}",
                "--set", 'data={"n_images": 30, "n_train": 20, "scene": {"height": 16, "width": 16, '
                         '"size_range": [0.12, 0.2], "max_objects": 2}}',
                "--set", "kinds=[\"unrolled_lrp\", \"fcn\"]", "--set", "regimes=[4, 20]", "--set", "seeds=[0, 1]",
                "--set", 'run={"epochs": 1, "width": 3, "steps_per_epoch": 2}', "--set", 'pretrain={"epochs": 1}',
                "--set", "lr_grid=[0.001, 0.01]", "--set", "select_epochs=1", "--set", "export_ids=[20]"]
        assert run(*args) == 0
        summary = (tmp_path / "s" / "summary.csv").read_text().splitlines()
        assert len(summary) == 1 + 2 * 2
        assert summary[0].startswith("model_kind,regime,n_seeds,miou_mean,miou_std")
        chosen = json.loads((tmp_path / "s" / "lr_selection.json").read_text())["chosen"]
        assert set(chosen) == {"unrolled_lrp", "fcn"}
        assert (tmp_path / "s" / "cells" / "unrolled_lrp_r20_s0" / "export" / "epoch_001").is_dir()
        stamp = (tmp_path / "s" / "cells" / "fcn_r4_s1" / "summary.json").stat().st_mtime_ns
        assert run(*args) == 0
        assert (tmp_path / "s" / "cells" / "fcn_r4_s1" / "summary.json").stat().st_mtime_ns == stamp
