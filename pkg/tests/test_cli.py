import hashlib
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from pconvnet.cli import main
from pconvnet.imageproc import (dilate, read_manifest, read_mask, read_pgm, synthesize_blobs,
                                write_mask, write_pgm)
from pconvnet.metrics import MetricReport
from pconvnet.model import ModelConfig, build_model
from pconvnet.trainer import (AdamState, Checkpoint, TrainConfig, load_checkpoint,
                              save_checkpoint)

SUBCOMMANDS = ["make-data", "train", "inpaint", "segment", "eval"]


def _tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def _save_model(path, config):
    model = build_model(config)
    ckpt = Checkpoint(config, TrainConfig(), {k: v.copy() for k, v in model.state_arrays().items()},
                      AdamState.zeros_like(model.params), (0, 1, 0, 1))
    save_checkpoint(path, ckpt)


@pytest.fixture(scope="module")
def texture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tex")
    assert main(["make-data", "--kind", "textures", "--out", str(out), "--count", "6",
                 "--size", "16", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(texture_dir, tmp_path_factory):
    work = tmp_path_factory.mktemp("run")
    cfg = work / "run.cfg"
    cfg.write_text(f"# toy run\ndataset = {texture_dir / 'manifest.tsv'}\ndepth = 2\n"
                   "base_channels = 4\nmax_iters = 4\nbatch_size = 2\ncheckpoint_interval = 2\n")
    assert main(["train", str(cfg)]) == 0
    return work


class TestHelp:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_every_subcommand_documents_flags(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert "usage" in text

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "pconvnet", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert all(cmd in proc.stdout for cmd in SUBCOMMANDS)

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--bogus"])
        assert exc.value.code == 2


class TestMakeData:
    def test_same_seed_same_tree(self, tmp_path):
        for name in ("a", "b"):
            main(["make-data", "--kind", "blobs", "--out", str(tmp_path / name), "--count", "3",
                  "--size", "16", "--seed", "5"])
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_env_seed_is_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PCONV_SEED", "5")
        main(["make-data", "--kind", "blobs", "--out", str(tmp_path / "env"), "--count", "3",
              "--size", "16"])
        main(["make-data", "--kind", "blobs", "--out", str(tmp_path / "flag"), "--count", "3",
              "--size", "16", "--seed", "5"])
        assert _tree_digest(tmp_path / "env") == _tree_digest(tmp_path / "flag")

    def test_zero_count(self, tmp_path):
        assert main(["make-data", "--kind", "masks", "--out", str(tmp_path), "--count", "0"]) == 0
        assert (tmp_path / "manifest.tsv").read_text() == ""

    def test_mask_coverage_flags(self, tmp_path):
        main(["make-data", "--kind", "masks", "--out", str(tmp_path), "--count", "5",
              "--size", "32", "--coverage-min", "0.1", "--coverage-max", "0.15"])
        for (path,) in read_manifest(tmp_path / "manifest.tsv"):
            frac = (read_mask(path) == 0).mean()
            assert 0.1 <= frac <= 0.15

    def test_unwritable_directory(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["make-data", "--kind", "masks", "--out", str(blocker / "sub")]) == 2
        assert "cannot write" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_log(self, trained):
        ckpt = load_checkpoint(trained / "checkpoint.pcv")
        assert ckpt.iteration == 4
        lines = (trained / "loss_log.tsv").read_text().splitlines()
        assert lines[0].split("\t")[:3] == ["iter", "lr", "total"]
        assert len(lines) == 5

    def test_dry_run(self, texture_dir, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset = {texture_dir / 'manifest.tsv'}\n")
        assert main(["train", str(cfg), "--dry-run"]) == 0
        assert not (tmp_path / "checkpoint.pcv").exists()

    def test_unknown_key(self, texture_dir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset = {texture_dir / 'manifest.tsv'}\nlearning_rate = 1\nfoo = 2\n")
        assert main(["train", str(cfg), "--dry-run"]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("dataset = nowhere/manifest.tsv\n")
        assert main(["train", str(cfg)]) == 2

    def test_flags_override_file(self, texture_dir, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset = {texture_dir / 'manifest.tsv'}\ndepth = 2\nbase_channels = 4\n"
                       "max_iters = 5\nbatch_size = 2\n")
        assert main(["train", str(cfg), "--set", "max_iters=1", "--seed", "9"]) == 0
        ckpt = load_checkpoint(tmp_path / "checkpoint.pcv")
        assert ckpt.iteration == 1
        assert ckpt.model_config.seed == 9 and ckpt.train_config.seed == 9

    def test_nan_loss_exits_3(self, texture_dir, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset = {texture_dir / 'manifest.tsv'}\ndepth = 2\nbase_channels = 4\n"
                       "max_iters = 3\nbatch_size = 2\nlr_initial = 1e30\n")
        assert main(["train", str(cfg)]) == 3


class TestInpaint:
    def test_valid_pixels_pass_through(self, trained, texture_dir, tmp_path):
        img, msk = read_manifest(texture_dir / "manifest.tsv")[0]
        out = tmp_path / "rec.pgm"
        assert main(["inpaint", "--checkpoint", str(trained / "checkpoint.pcv"), "--image", img,
                     "--mask", msk, "--out", str(out)]) == 0
        rec, src, m = read_pgm(out).pixels, read_pgm(img).pixels, read_mask(msk)
        np.testing.assert_array_equal(rec[m == 1], src[m == 1])
        assert (rec[m == 0] != src[m == 0]).any()
        again = tmp_path / "again.pgm"
        main(["inpaint", "--checkpoint", str(trained / "checkpoint.pcv"), "--image", img,
              "--mask", msk, "--out", str(again)])
        assert out.read_bytes() == again.read_bytes()

    def test_all_valid_mask_is_identity(self, trained, texture_dir, tmp_path):
        img, _ = read_manifest(texture_dir / "manifest.tsv")[0]
        write_mask(tmp_path / "ones.pgm", np.ones((16, 16)))
        main(["inpaint", "--checkpoint", str(trained / "checkpoint.pcv"), "--image", img,
              "--mask", str(tmp_path / "ones.pgm"), "--out", str(tmp_path / "o.pgm")])
        assert (tmp_path / "o.pgm").read_bytes() == open(img, "rb").read()

    def test_indivisible_extent(self, trained, tmp_path, capsys):
        write_pgm(tmp_path / "odd.pgm", np.zeros((15, 16)))
        write_mask(tmp_path / "m.pgm", np.ones((15, 16)))
        code = main(["inpaint", "--checkpoint", str(trained / "checkpoint.pcv"),
                     "--image", str(tmp_path / "odd.pgm"), "--mask", str(tmp_path / "m.pgm"),
                     "--out", str(tmp_path / "o.pgm")])
        assert code == 2
        assert "pad" in capsys.readouterr().err

    def test_bad_checkpoint(self, tmp_path, texture_dir):
        (tmp_path / "bad.pcv").write_bytes(b"nope")
        img, msk = read_manifest(texture_dir / "manifest.tsv")[0]
        assert main(["inpaint", "--checkpoint", str(tmp_path / "bad.pcv"), "--image", img,
                     "--mask", msk, "--out", str(tmp_path / "o.pgm")]) == 2


@pytest.fixture(scope="module")
def seg_setup(tmp_path_factory):
    d = tmp_path_factory.mktemp("seg")
    _save_model(d / "seg.pcv", ModelConfig(variant="seg_unet", depth=2, base_channels=4))
    images, _ = synthesize_blobs(0, 16, 1)
    write_pgm(d / "img.pgm", images[0])
    return d


class TestSegment:
    def _run(self, d, *extra):
        out = d / "mask.pgm"
        code = main(["segment", "--checkpoint", str(d / "seg.pcv"), "--image", str(d / "img.pgm"),
                     "--out", str(out), *extra])
        return code, read_mask(out)

    def test_threshold_zero_is_all_foreground(self, seg_setup):
        code, m = self._run(seg_setup, "--threshold", "0")
        assert code == 0 and (m == 0).all()

    def test_threshold_one_is_all_background(self, seg_setup):
        _, m = self._run(seg_setup, "--threshold", "1")
        assert (m == 1).all()

    def test_dilation_matches_library(self, seg_setup):
        _, plain = self._run(seg_setup, "--threshold", "0.5")
        _, grown = self._run(seg_setup, "--threshold", "0.5", "--dilate", "3")
        np.testing.assert_array_equal(grown, dilate(plain, 3))

    def test_wrong_variant(self, trained, seg_setup):
        code = main(["segment", "--checkpoint", str(trained / "checkpoint.pcv"),
                     "--image", str(seg_setup / "img.pgm"), "--out", str(seg_setup / "x.pgm")])
        assert code == 2


class TestEval:
    @pytest.fixture
    def pairs(self, texture_dir, tmp_path):
        rows = read_manifest(texture_dir / "manifest.tsv")[:3]
        rng = np.random.default_rng(0)
        lines = []
        for k, (img, msk) in enumerate(rows):
            noisy = np.clip(read_pgm(img).pixels + 0.05 * rng.standard_normal((16, 16)), 0, 1)
            write_pgm(tmp_path / f"rec{k}.pgm", noisy)
            lines.append(f"rec{k}.pgm\t{img}\t{msk}\n")
        (tmp_path / "pairs.tsv").write_text("".join(lines))
        return tmp_path / "pairs.tsv"

    def test_line_counts_and_summary(self, pairs, tmp_path):
        out = tmp_path / "report.tsv"
        assert main(["eval", "--manifest", str(pairs), "--metrics", "psnr,dice",
                     "--region", "valid", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        samples = [MetricReport.parse(x) for x in lines if not x.startswith("summary")]
        summaries = [x.split("\t") for x in lines if x.startswith("summary")]
        assert len(samples) == 3 * 2 and len(summaries) == 2
        for _, metric, region, mean, std in summaries:
            vals = [r.value for r in samples if r.metric == metric]
            # report values carry 6 significant digits, which bounds the agreement
            assert float(mean) == pytest.approx(np.mean(vals), rel=1e-5)
            assert float(std) == pytest.approx(np.std(vals), abs=1e-5 * max(map(abs, vals)))

    def test_self_comparison(self, texture_dir, tmp_path, capsys):
        img, _ = read_manifest(texture_dir / "manifest.tsv")[0]
        (tmp_path / "self.tsv").write_text(f"{img}\t{img}\n")
        main(["eval", "--manifest", str(tmp_path / "self.tsv"), "--metrics", "psnr,ssim"])
        reports = [MetricReport.parse(x) for x in capsys.readouterr().out.splitlines()
                   if not x.startswith("summary")]
        assert reports[0].value == math.inf
        assert reports[1].value == pytest.approx(1.0, abs=1e-9)

    def test_unreadable_sample_exits_1(self, pairs, tmp_path, capsys):
        with open(pairs, "a") as fh:
            fh.write("missing.pgm\tmissing_ref.pgm\n")
        assert main(["eval", "--manifest", str(pairs)]) == 1
        out = capsys.readouterr().out
        assert "missing\tpsnr\twhole\terror" in out
        assert sum(1 for x in out.splitlines() if not x.startswith("summary")) == 8
