import subprocess
import sys

import numpy as np
import pytest

from rwta import cli
from rwta import config as C
from rwta.data import load_dataset, write_idx
from rwta.errors import ConfigError
from rwta.train import load_checkpoint


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = (rng.random((10, 12, 12)) * 255).astype(np.uint8)
    labels = (np.arange(10) % 3).astype(np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    return ip, lp


TINY = ["--set", "channels=4", "--set", "dec_kernel=3", "--set", "batch_size=4"]


class TestRunConfig:
    def test_round_trip_defaults(self):
        c = C.RunConfig()
        assert C.parse(C.serialize(c)) == c

    def test_round_trip_non_defaults(self):
        c = C.RunConfig(channels=7, lr=1e-3 / 3, max_updates=None, clip_norm=0.5, zca=True, images="a b.idx", svm_reg_grid="1e-4,1e-2")
        assert C.parse(C.serialize(c)) == c

    def test_every_key_has_a_default(self):
        text = C.serialize(C.RunConfig())
        assert all(" = " in line for line in text.splitlines())

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'chanels'"):
            C.parse("chanels = 4")

    def test_comments_and_blank_lines(self):
        assert C.parse("# model\n\nchannels = 9  # narrow\n").channels == 9

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            C.parse("precision = 16")
        with pytest.raises(ConfigError):
            C.parse("zca = maybe")

    def test_repeated_key(self):
        with pytest.raises(ConfigError):
            C.parse("seed = 1\nseed = 2")


def run(*argv):
    return cli.main(list(argv))


class TestCommands:
    def test_synth_rotate_counts(self, idx_files, tmp_path, capsys):
        ip, lp = idx_files
        assert run("synth", "--images", str(ip), "--labels", str(lp), "--mode", "rotate", "--frames", "5", "--step", "18", "--out", str(tmp_path / "s")) == 0
        ds = load_dataset(tmp_path / "s" / "videos.rwd")
        assert ds.videos.shape == (10, 5, 1, 12, 12)
        assert C.load(tmp_path / "s" / "synth.cfg").frames == 5

    def test_synth_scan_with_zca(self, idx_files, tmp_path):
        ip, lp = idx_files
        out = tmp_path / "s"
        assert run("synth", "--images", str(ip), "--labels", str(lp), "--mode", "scan", "--set", "pad_to=16", "--set", "window=8", "--set", "stride=4", "--set", "zca=true", "--out", str(out)) == 0
        ds = load_dataset(out / "videos.rwd")
        assert ds.videos.shape == (10, 9, 1, 8, 8)
        assert (out / "zca.npz").exists()
        again = tmp_path / "t"
        assert run("synth", "--images", str(ip), "--labels", str(lp), "--mode", "scan", "--set", "pad_to=16", "--set", "window=8", "--set", "stride=4", "--set", f"zca_from={out / 'zca.npz'}", "--out", str(again)) == 0
        np.testing.assert_array_equal(load_dataset(again / "videos.rwd").videos, ds.videos)

    @pytest.fixture
    def videos(self, idx_files, tmp_path):
        ip, lp = idx_files
        run("synth", "--images", str(ip), "--labels", str(lp), "--frames", "3", "--out", str(tmp_path / "s"))
        return tmp_path / "s" / "videos.rwd"

    def test_train_twice_identical(self, videos, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("channels = 4\ndec_kernel = 3\nbatch_size = 4\nmax_updates = 3\n")
        for name in ("a", "b"):
            assert run("train", "--config", str(cfg), "--seed", "7", "--deterministic", "--train-data", str(videos), "--out", str(tmp_path / name)) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()
        assert C.load(tmp_path / "a" / "train.cfg").seed == 7

    def test_finetune_eval_and_filters(self, videos, tmp_path, capsys):
        assert run("train", *TINY, "--set", "max_updates=2", "--train-data", str(videos), "--out", str(tmp_path / "t")) == 0
        ckpt = tmp_path / "t" / "checkpoint.ckpt"
        assert run("finetune", *TINY, "--set", "max_updates=3", "--checkpoint", str(ckpt), "--train-data", str(videos), "--val-data", str(videos), "--out", str(tmp_path / "f")) == 0
        assert load_checkpoint(tmp_path / "f" / "finetune.ckpt").params["head.k"].shape == (3, 4, 1, 1)
        assert (tmp_path / "f" / "finetune_epochs.csv").exists()

        assert run("eval", "--checkpoint", str(ckpt), "--train-data", str(videos), "--test-data", str(videos), "--set", "dump_features=true", "--set", "svm_reg_grid=1e-4,1e-2", "--out", str(tmp_path / "e")) == 0
        assert capsys.readouterr().out.strip().splitlines()[-1].startswith("accuracy=")
        assert (tmp_path / "e" / "features_test.csv").read_text().startswith("video_id,label,f_0")
        assert run("eval", "--mode", "vote", "--set", "vote_window=2", "--set", "feature_mode=last-state", "--checkpoint", str(ckpt), "--train-data", str(videos), "--test-data", str(videos), "--out", str(tmp_path / "v")) == 0
        assert run("eval", "--mode", "vote", "--set", "feature_mode=pooled", "--checkpoint", str(ckpt), "--train-data", str(videos), "--test-data", str(videos), "--out", str(tmp_path / "p")) == 0
        assert (tmp_path / "p" / "report.csv").exists()

        assert run("dump-filters", "--checkpoint", str(ckpt), "--out", str(tmp_path / "d")) == 0
        pgm = (tmp_path / "d" / "filters" / "filter_000.pgm").read_bytes()
        assert pgm.startswith(b"P5\n3 3\n255\n") and len(pgm) == len(b"P5\n3 3\n255\n") + 9
        assert len(list((tmp_path / "d" / "filters").glob("filter_*.pgm"))) == 4
        assert (tmp_path / "d" / "filters" / "grid.pgm").read_bytes().startswith(b"P5\n9 9\n255\n")

    def test_finetune_from_scratch(self, videos, tmp_path):
        assert run("finetune", *TINY, "--set", "max_updates=1", "--train-data", str(videos), "--out", str(tmp_path / "f")) == 0

    def test_gradcheck(self, capsys):
        assert run("gradcheck", "--precision", "64") == 0
        out = capsys.readouterr().out
        worst = float(out.strip().splitlines()[-1].split()[-1])
        assert out.count("\n") == 10 and worst < 1e-4


class TestErrors:
    def test_unknown_command_exit_2(self):
        proc = subprocess.run([sys.executable, "-m", "rwta", "bogus"], capture_output=True)
        assert proc.returncode == 2

    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run("train", "--bogus")
        assert exc.value.code == 2

    def test_unknown_config_key_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("train", "--set", "nope=1")
        assert exc.value.code == 2

    def test_missing_input_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run("train")
        assert exc.value.code == 2

    def test_runtime_failure_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.rwd"
        bad.write_bytes(b"junk")
        assert run("train", "--train-data", str(bad), "--out", str(tmp_path / "o")) == 1
        assert "error" in capsys.readouterr().err

    def test_pgm_constant_image(self, tmp_path):
        cli.write_pgm(tmp_path / "c.pgm", np.full((2, 3), 4.0))
        assert (tmp_path / "c.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes(6)
