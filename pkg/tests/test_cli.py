"""Presets, checkpoint container and the command-line workflow on synthetic data."""

import json
import math

import numpy as np
import pytest

from ccaug import checkpoint as C
from ccaug.cli import main, make_head, run_train
from ccaug.config import PRESETS, expand
from ccaug.network import NetworkConfig

SMALL = ["--channels", "4,4,6,6,8", "--epochs", "1", "--batch-size", "16"]


class TestPresets:
    def test_rot69(self):
        cfg = expand({"preset": "mnist-rot-69"})
        hw = dict(cfg.dataset.half_widths)
        assert hw["6"] == hw["9"] == pytest.approx(math.pi / 4)
        assert all(hw[str(k)] == pytest.approx(math.pi) for k in (0, 1, 2, 3, 4, 5, 7, 8))
        assert cfg.transforms == ("rotation",) and cfg.train.lam == 0.05 and cfg.train.epochs == 10

    def test_graded(self):
        hw = dict(expand({"preset": "mnist-rot-graded"}).dataset.half_widths)
        assert hw["0"] == 0.0 and hw["4"] == pytest.approx(math.pi / 3)
        assert hw["5"] == pytest.approx(math.pi / 4) and hw["9"] == pytest.approx(math.pi / 6)

    def test_cifar_presets(self):
        b = expand({"preset": "cifar10-brightness"})
        assert dict(b.dataset.half_widths) == {n: 0.2 for n in ("airplane", "bird", "cat", "deer", "ship")}
        assert b.transforms == ("brightness",) and b.network.in_channels == 3 and b.network.image_size == 32
        c = expand({"preset": "cifar100-natural"})
        assert c.dataset.corruption is None and c.transforms == ("rotation",)

    def test_overrides_and_roundtrip(self):
        cfg = expand({"preset": "mnist-rot-69", "train": {"seed": 3}, "model": "shared",
                      "dataset": {"subset": 50}})
        assert cfg.train.seed == 3 and cfg.train.lam == 0.05 and cfg.dataset.subset == 50
        assert type(cfg).from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        assert make_head(cfg).K == 1

    def test_theta_init(self):
        cfg = expand({"preset": "mnist-rot-69", "theta_init": {"rotation": 0.5}})
        assert cfg.theta_init == (("rotation", 0.5),)
        np.testing.assert_array_equal(make_head(cfg).theta.data, np.full((1, 10), 0.5))
        assert type(cfg).from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        np.testing.assert_array_equal(make_head(expand({"preset": "mnist-rot-69"})).theta.data, np.float32(0.1))
        with pytest.raises(ValueError):
            expand({"preset": "mnist-rot-69", "theta_init": {"brightness": 0.0}})

    def test_errors(self):
        with pytest.raises(ValueError):
            expand({"preset": "nope"})
        with pytest.raises(ValueError):
            expand({})
        with pytest.raises(ValueError):
            expand({"preset": "mnist-rot-69", "model": "other"})

    def test_every_preset_expands(self):
        for name in PRESETS:
            assert expand({"preset": name}).preset == name


def test_checkpoint_roundtrip_and_rejects(tmp_path, data_root):
    cfg = expand({"preset": "mnist-rot-69", "data_root": str(data_root), "out": str(tmp_path / "r"),
                  "network": {"channels": [4, 4, 6, 6, 8]}, "train": {"epochs": 1, "batch_size": 32}})
    paths = run_train(cfg)
    ck = C.load(paths["checkpoint"])
    C.save(ck, tmp_path / "copy.ckpt")
    assert C.load(tmp_path / "copy.ckpt") == ck
    assert paths["checkpoint"].read_bytes() == (tmp_path / "copy.ckpt").read_bytes()
    assert ck.network == NetworkConfig(channels=(4, 4, 6, 6, 8)) and ck.history.shape == (2, 1, 10)
    raw = paths["checkpoint"].read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(C.CheckpointError):
        C.load(tmp_path / "bad")
    (tmp_path / "ver").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(C.CheckpointError):
        C.load(tmp_path / "ver")
    (tmp_path / "short").write_bytes(raw[:-7])
    with pytest.raises(C.CheckpointError):
        C.load(tmp_path / "short")


def _train(tmp_path, data_root, out, *extra, preset="mnist-rot-69"):
    argv = ["train", *(["--preset", preset] if preset else []), "--data-root", str(data_root),
            "--out", str(tmp_path / out), *SMALL, *extra]
    assert main(argv) == 0
    return tmp_path / out


FILES = ("checkpoint.ckpt", "history.csv", "train_log.csv", "config.json",
         "ev/eval.json", "orient.csv", "orient_acc.csv", "hist.csv")


def _workflow(tmp_path, data_root):
    run = _train(tmp_path, data_root, "a", "--seed", "2")
    ck = str(run / "checkpoint.ckpt")
    assert main(["eval", "--checkpoint", ck, "--out", str(run / "ev")]) == 0
    assert main(["sweep", "--checkpoint", ck, "--kind", "orientation", "--target", "6",
                 "--out", str(run / "orient.csv")]) == 0
    assert main(["sweep", "--checkpoint", ck, "--kind", "orientation", "--target", "9", "--accuracy",
                 "--out", str(run / "orient_acc.csv")]) == 0
    assert main(["export-history", "--checkpoint", ck, "--out", str(run / "hist.csv")]) == 0
    return run, {f: (run / f).read_bytes() for f in FILES}


def test_cli_workflow_is_reproducible(tmp_path, data_root, capsys):
    run, first = _workflow(tmp_path, data_root)
    _, second = _workflow(tmp_path, data_root)
    for name in FILES:
        assert first[name] == second[name], name
    cfg = json.loads(first["config.json"])
    assert cfg["train"]["seed"] == 2 and cfg["preset"] == "mnist-rot-69"
    rep = json.loads(first["ev/eval.json"])
    assert rep["n"] == 30 and set(rep["per_class"]) == {str(i) for i in range(10)}
    assert first["hist.csv"] == first["history.csv"]
    assert len(first["orient.csv"].decode().splitlines()) == 33


def test_cli_shared_and_brightness(tmp_path, data_root):
    s = _train(tmp_path, data_root, "s", "--model", "shared")
    assert main(["export-history", "--checkpoint", str(s / "checkpoint.ckpt"), "--out", str(s / "h.csv")]) == 0
    assert ",all," in (s / "h.csv").read_text()
    argv = ["train", "--preset", "cifar10-brightness", "--data-root", str(data_root), "--out",
            str(tmp_path / "c"), *SMALL]
    assert main(argv) == 0
    ck = str(tmp_path / "c" / "checkpoint.ckpt")
    assert main(["sweep", "--checkpoint", ck, "--kind", "brightness", "--out", str(tmp_path / "c" / "b.csv")]) == 0
    lines = (tmp_path / "c" / "b.csv").read_text().splitlines()
    assert len(lines) == 32 and lines[1].startswith("-0.3")
    # brightness-only checkpoints cannot run orientation sweeps
    assert main(["sweep", "--checkpoint", ck, "--kind", "orientation", "--target", "cat",
                 "--out", str(tmp_path / "x.csv")]) == 2


def test_cli_errors(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    assert main(["train", "--preset", "mnist-rot-69", "--data-root", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--preset", "bogus"])


def test_config_file(tmp_path, data_root):
    doc = {"preset": "mnist-rot-graded", "train": {"lam": 0.1}, "theta_init": {"rotation": 0.3}}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    out = _train(tmp_path, data_root, "g", "--config", str(tmp_path / "c.json"), preset=None)
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train"]["lam"] == 0.1 and cfg["preset"] == "mnist-rot-graded" and cfg["train"]["epochs"] == 1
    assert np.isfinite(C.load(out / "checkpoint.ckpt").theta).all()
    assert cfg["theta_init"] == {"rotation": 0.3}
    np.testing.assert_allclose(C.load(out / "checkpoint.ckpt").history[0], 0.3)
    over = _train(tmp_path, data_root, "h", "--theta-init", "rotation=0.2")
    np.testing.assert_allclose(C.load(over / "checkpoint.ckpt").history[0], 0.2)
