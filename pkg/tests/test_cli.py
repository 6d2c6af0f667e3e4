import csv
import os

import numpy as np
import pytest
from PIL import Image

from shufflemamba import data, metrics
from shufflemamba.cli import load_net, main
from shufflemamba.config import ConfigError, load_config
from shufflemamba.io import load_checkpoint
from shufflemamba.rng import RngStream
from shufflemamba.train import cosine_lr

TINY = """\
# tiny network for command tests
d_model = 8
state_size = 4
n_rm = 1
n_rcim = 1
n_rmim = 1
patch_size = 1
expand = 2
ms_channels = 4
mc_samples = 4
seed = 0
perm_mode = per_block
pos_kernel = 3
conv_kernel = 3
dtype = float64
pos_order = conv_ln
steps = 6
batch_size = 2
lr = 5e-4
lr_min = 5e-8
eval_every = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["gen", "--out", str(root / "data"), "--count", "3", "--size", "16,16", "--seed", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestGen:
    def test_single_sample_files(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--count", "1", "--size", "16"]) == 0
        smt = sorted(p for p in os.listdir(tmp_path) if p.endswith(".smt"))
        assert len(smt) == 4
        assert (tmp_path / "index.txt").read_text().split() == ["00000"]
        assert (tmp_path / "manifest.txt").exists()

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen", "--out", str(tmp_path / d), "--count", "2", "--size", "16", "--seed", "5"]) == 0
        for name in os.listdir(tmp_path / "a"):
            if name.endswith(".smt") or name == "index.txt":
                assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_scale(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path), "--size", "18,16", "--scale", "4"]) == 1
        assert "scale" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace / "run"
        rows = read_csv(run / "loss.csv")
        assert rows[0] == ["step", "lr", "loss"]
        assert len(rows) - 1 == 6
        assert (run / "checkpoint.cfg").exists() and (run / "manifest.txt").exists()
        manifest = (run / "manifest.txt").read_text()
        assert "command = train" in manifest and "config_hash = " in manifest

    def test_missing_key(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(TINY.replace("state_size = 4\n", ""))
        code = main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "state_size" in capsys.readouterr().err

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            load_config(TINY + "bogus = 1\n")

    def test_resume_continues_schedule(self, workspace, tmp_path):
        cfg = workspace / "tiny.cfg"
        dat = str(workspace / "data")
        half = tmp_path / "half"
        assert main(["train", "--config", str(cfg), "--data", dat, "--out", str(half), "--stop-at", "3"]) == 0
        assert load_checkpoint(half / "checkpoint.smt")["meta.step"][0] == 3
        assert main(["train", "--config", str(cfg), "--data", dat, "--out", str(half),
                     "--resume", str(half / "checkpoint.smt")]) == 0
        rows = read_csv(half / "loss.csv")[1:]
        assert [int(r[0]) for r in rows] == list(range(6))
        assert float(rows[3][1]) == pytest.approx(cosine_lr(3, 6), rel=1e-9)
        full = read_csv(workspace / "run" / "loss.csv")[1:]
        for a, b in zip(rows, full):
            assert float(a[2]) == pytest.approx(float(b[2]), rel=1e-6)

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_nan_exit_code(self, tmp_path):
        samples = data.make_dataset(2, size=(16, 16), seed=0)
        for s in samples:
            s.M_up[0, 0, 0] = np.nan
        data.save_dataset(tmp_path / "d", samples)
        (tmp_path / "c.cfg").write_text(TINY)
        assert main(["train", "--config", str(tmp_path / "c.cfg"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "o")]) == 2


class TestEval:
    def test_columns_and_single_forward(self, workspace):
        out = workspace / "eval1" / "metrics.csv"
        ck = str(workspace / "run" / "checkpoint.smt")
        assert main(["eval", "--checkpoint", ck, "--data", str(workspace / "data"), "--mc", "1",
                     "--seed", "7", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["image_id", "psnr", "ssim", "sam", "ergas"]
        net = load_net(ck)
        _, samples = data.load_dataset(workspace / "data")
        ref = metrics.psnr(net.forward(samples[0], RngStream(7, 7)), samples[0].GT)
        assert float(rows[1][1]) == pytest.approx(ref, abs=1e-6)

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.smt"), "--data",
                     str(workspace / "data"), "--out", str(tmp_path / "m.csv")]) == 1


class TestErfAndSweep:
    def test_erf_png_and_check(self, workspace, capsys):
        out = workspace / "erf" / "map.png"
        code = main(["erf", "--config", str(workspace / "tiny.cfg"), "--size", "16,16", "--mode", "both",
                     "--samples", "16", "--out", str(out), "--check"])
        assert code == 0
        for mode in ("raster", "shuffle"):
            assert Image.open(workspace / "erf" / f"map_{mode}.png").size == (16, 16)
        assert "off-center CV" in capsys.readouterr().out

    def test_erf_bad_mode(self, workspace):
        assert main(["erf", "--config", str(workspace / "tiny.cfg"), "--mode", "zigzag"]) == 1

    def test_sweep_rows(self, workspace):
        out = workspace / "sweep" / "sweep.csv"
        assert main(["sweep", "--checkpoint", str(workspace / "run" / "checkpoint.smt"), "--data",
                     str(workspace / "data"), "--Ms", "1,2", "--trials", "2", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["M", "psnr_mean", "psnr_std", "time_per_image_s", "peak_memory_mb"]
        assert [r[0] for r in rows[1:]] == ["1", "2"]

    def test_help_exit_zero(self):
        assert main(["--help"]) == 0
