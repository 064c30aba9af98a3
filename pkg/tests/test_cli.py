import os

import numpy as np
import pytest

from loopprune.cli import main
from loopprune.codec import DatasetManifest
from loopprune.config import load_config
from loopprune.errors import ConfigError
from loopprune.model import load_model


def write_config(path, source_dir, out_dir, **extra):
    text = f"""[run]
seed = 7
output_dir = {out_dir}

[dataset]
source_dir = {source_dir}
qps = 22, 37
patch_size = 48
train_fraction = 0.75

[model]
width_scale = 0.25

[train]
epochs = {extra.get('epochs', 2)}
lr = 0.001
batch_size = 8

[prune]
st = 0.8
ct = 0.001
max_drop = {extra.get('max_drop', 0.1)}
pt = 0.9
train_epochs = {extra.get('prune_epochs', 1)}
batch_size = 4
"""
    path.write_text(text)
    return path


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path, fixture_images):
        cfg_path = write_config(tmp_path / "run.cfg", fixture_images, tmp_path / "out")
        cfg = load_config(cfg_path, overrides=["train.epochs=5", "prune.st=0.5"])
        assert cfg.epochs == 5
        assert cfg.st == 0.5
        assert cfg.qps == [22, 37]

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[train]\nnonsense = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")

    def test_env_seed_override(self, tmp_path, fixture_images, monkeypatch):
        cfg_path = write_config(tmp_path / "run.cfg", fixture_images, tmp_path / "out")
        monkeypatch.setenv("LOOPPRUNE_SEED", "123")
        assert load_config(cfg_path).seed == 123

    def test_bad_value_message_names_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[train]\nepochs = soon\n")
        with pytest.raises(ConfigError, match="train.epochs"):
            load_config(path)


class TestGenData:
    def test_generates_and_reports(self, tmp_path, fixture_images, capsys):
        cfg = write_config(tmp_path / "run.cfg", fixture_images, tmp_path / "out")
        assert main(["gen-data", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "qp=22" in out and "qp=37" in out
        manifest = DatasetManifest.load(tmp_path / "out" / "data" / "manifest.txt")
        assert manifest.qps() == [22, 37]

    def test_missing_source_dir_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "run.cfg", tmp_path / "missing", tmp_path / "out")
        assert main(["gen-data", "--config", str(cfg)]) == 2
        assert "missing" in capsys.readouterr().err

    def test_rerun_same_seed_identical_manifest(self, tmp_path, fixture_images):
        cfg1 = write_config(tmp_path / "a.cfg", fixture_images, tmp_path / "out1")
        cfg2 = write_config(tmp_path / "b.cfg", fixture_images, tmp_path / "out2")
        assert main(["gen-data", "--config", str(cfg1)]) == 0
        assert main(["gen-data", "--config", str(cfg2)]) == 0
        a = (tmp_path / "out1" / "data" / "manifest.txt").read_bytes()
        b = (tmp_path / "out2" / "data" / "manifest.txt").read_bytes()
        assert a == b


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """gen-data + short train shared by the train/prune/eval tests."""
    from conftest import synthetic_image
    from loopprune.codec import write_pgm

    root = tmp_path_factory.mktemp("pipeline")
    src = root / "images"
    src.mkdir()
    for i in range(4):
        write_pgm(src / f"img{i}.pgm", synthetic_image(100 + i))
    cfg = write_config(root / "run.cfg", src, root / "out", epochs=2)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return root, cfg


class TestTrain:
    def test_outputs(self, pipeline_dir):
        root, cfg = pipeline_dir
        train_dir = root / "out" / "train"
        assert (train_dir / "baseline.ckpt").exists()
        log = (train_dir / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_mae,val_psnr_db"
        assert len(log) == 3  # two epochs logged
        assert (train_dir / "build_report.txt").read_text().startswith("total_parameters=")

    def test_zero_epochs_header_only_log(self, tmp_path, fixture_images):
        cfg = write_config(tmp_path / "run.cfg", fixture_images, tmp_path / "out", epochs=0)
        assert main(["gen-data", "--config", str(cfg)]) == 0
        assert main(["train", "--config", str(cfg)]) == 0
        log = (tmp_path / "out" / "train" / "train_log.csv").read_text()
        assert log == "epoch,train_mae,val_psnr_db\n"
        model = load_model(tmp_path / "out" / "train" / "baseline.ckpt")
        assert model.prune_history == []


class TestPrune:
    def test_prune_writes_trace_and_checkpoint(self, pipeline_dir, capsys):
        root, cfg = pipeline_dir
        assert main(["prune", "--config", str(cfg), "--set", "prune.max_drop=5.0"]) == 0
        out = capsys.readouterr().out
        assert "params_before=" in out and "params_after=" in out
        prune_dir = root / "out" / "prune"
        assert (prune_dir / "pruned.ckpt").exists()
        lines = (prune_dir / "trace.csv").read_text().splitlines()
        assert lines[0] == "iteration,params,psnr_db,infer_time_s,removed_channels,accepted"
        assert len(lines) >= 2
        accepted_params = [int(l.split(",")[1]) for l in lines[1:] if l.endswith(",1")]
        assert all(a > b for a, b in zip(accepted_params, accepted_params[1:]))
        assert (prune_dir / "trace.svg").read_text().startswith("<svg")

    def test_pt_zero_checkpoint_byte_identical(self, pipeline_dir):
        root, cfg = pipeline_dir
        assert main(["prune", "--config", str(cfg), "--set", "prune.pt=0"]) == 0
        baseline = (root / "out" / "train" / "baseline.ckpt").read_bytes()
        pruned = (root / "out" / "prune" / "pruned.ckpt").read_bytes()
        assert pruned == baseline
        trace = (root / "out" / "prune" / "trace.csv").read_text().splitlines()
        assert trace[-1].endswith(",0")  # final attempt rolled back

    def test_missing_checkpoint_exit_2(self, tmp_path, fixture_images):
        cfg = write_config(tmp_path / "run.cfg", fixture_images, tmp_path / "out")
        assert main(["gen-data", "--config", str(cfg)]) == 0
        assert main(["prune", "--config", str(cfg)]) == 2


class TestEval:
    def test_identity_checkpoint_matches_degraded(self, pipeline_dir, tmp_path):
        root, cfg = pipeline_dir
        from loopprune.model import build_default_uclf, save_model

        ident = tmp_path / "identity.ckpt"
        save_model(build_default_uclf(0.25, seed=0), ident)  # zero tail -> identity
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ident)]) == 0
        rd = (root / "out" / "eval" / "rd.csv").read_text().splitlines()
        rows = [l.split(",") for l in rd[1:]]
        by = {(r[0], int(r[1])): (float(r[2]), float(r[3])) for r in rows}
        for qp in (22, 37):
            assert by[("model_a", qp)] == by[("degraded", qp)]
        report = (root / "out" / "eval" / "report.txt").read_text()
        assert "BD metrics skipped" in report  # only two QPs in this manifest

    def test_two_checkpoints_before_after(self, pipeline_dir, tmp_path):
        root, cfg = pipeline_dir
        ckpt = root / "out" / "train" / "baseline.ckpt"
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--checkpoint2", str(ckpt)]) == 0
        report = (root / "out" / "eval" / "report.txt").read_text()
        assert "#Par" in report
        rd = (root / "out" / "eval" / "rd.csv").read_text()
        assert "model_b" in rd

    def test_eval_deterministic_bytes(self, pipeline_dir):
        root, cfg = pipeline_dir
        ckpt = root / "out" / "train" / "baseline.ckpt"
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
        first = (root / "out" / "eval" / "rd.csv").read_bytes()
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
        assert (root / "out" / "eval" / "rd.csv").read_bytes() == first


class TestLock:
    def test_lock_blocks_and_releases(self, tmp_path, fixture_images, capsys):
        cfg = write_config(tmp_path / "run.cfg", fixture_images, tmp_path / "out")
        lock = tmp_path / "out" / ".loopprune.lock"
        lock.parent.mkdir(parents=True)
        lock.touch()
        assert main(["gen-data", "--config", str(cfg)]) == 1
        assert "locked" in capsys.readouterr().err
        lock.unlink()
        assert main(["gen-data", "--config", str(cfg)]) == 0
        assert not lock.exists()
