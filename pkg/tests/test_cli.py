import json
import subprocess
import sys

import numpy as np
import pytest

from esisr.cli import main, parse_prep, UsageError
from esisr.corpus import CorpusManifest, gen_corpus
from esisr.imgcore import Image, ColorSpace, gray, load_image, save_image
from esisr.model import EsisrConfig, build, save_checkpoint
from esisr.verify import NoRedimension, Resize, ToyEmbedder, evaluate_pipeline, labeled_images


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    gen_corpus(1, 6, 2, d, 48, 48)
    return d


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    for s in (2, 3):
        save_checkpoint(build(EsisrConfig(scale=s), seed=s), d / f"esisr_x{s}.ckpt")
    return d


@pytest.fixture
def image_file(tmp_path):
    p = tmp_path / "in.png"
    save_image(gray(np.random.default_rng(0).random((20, 24))), p)
    return p


class TestBasics:
    def test_help_via_module(self):
        out = subprocess.run([sys.executable, "-m", "esisr", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for cmd in ("gen-corpus", "train", "sr", "metrics", "resize", "bsif", "verify", "det"):
            assert cmd in out.stdout

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        assert main(["metrics", str(tmp_path / "a.png"), str(tmp_path / "b.png")]) == 1
        assert "error" in capsys.readouterr().err


class TestImageCommands:
    def test_metrics_identity(self, image_file, capsys):
        assert main(["metrics", str(image_file), str(image_file)]) == 0
        out = capsys.readouterr().out
        assert "psnr=100.00" in out and "ssim=1.0000" in out and "delta=0.0000" in out

    def test_metrics_size_mismatch(self, image_file, tmp_path):
        other = tmp_path / "o.png"
        save_image(gray(np.zeros((8, 8))), other)
        assert main(["metrics", str(image_file), str(other)]) == 1

    def test_resize_and_down(self, image_file, tmp_path):
        assert main(["resize", "--scale", "3", "--method", "area", str(image_file), str(tmp_path / "u.png")]) == 0
        up = load_image(tmp_path / "u.png")
        assert (up.width, up.height) == (72, 60)
        assert main(["resize", "--down", "--scale", "2", str(image_file), str(tmp_path / "d.png")]) == 0
        assert load_image(tmp_path / "d.png").width == 12

    def test_sr_with_model_path(self, image_file, tmp_path, model_dir):
        out = tmp_path / "sr.png"
        assert main(["sr", "--model", str(model_dir / "esisr_x3.ckpt"), str(image_file), str(out)]) == 0
        img = load_image(out)
        assert (img.width, img.height) == (72, 60)

    def test_sr_from_env(self, image_file, tmp_path, model_dir, monkeypatch):
        monkeypatch.setenv("ESISR_MODEL_DIR", str(model_dir))
        assert main(["sr", "--scale", "2", str(image_file), str(tmp_path / "sr.png")]) == 0
        assert load_image(tmp_path / "sr.png").width == 48

    def test_sr_rgb(self, tmp_path, model_dir):
        save_image(Image(np.random.default_rng(1).random((3, 10, 10)), ColorSpace.RGB), tmp_path / "c.png")
        assert main(["sr", "--model", str(model_dir / "esisr_x2.ckpt"), str(tmp_path / "c.png"),
                     str(tmp_path / "o.png")]) == 0
        assert load_image(tmp_path / "o.png").colorspace is ColorSpace.RGB

    def test_sr_scale_mismatch(self, image_file, tmp_path, model_dir):
        code = main(["sr", "--scale", "3", "--model", str(model_dir / "esisr_x2.ckpt"), str(image_file),
                     str(tmp_path / "o.png")])
        assert code == 2

    def test_sr_needs_model_or_scale(self, image_file, tmp_path):
        assert main(["sr", str(image_file), str(tmp_path / "o.png")]) == 2

    def test_bsif_rows(self, image_file, capsys):
        assert main(["bsif", "--header", str(image_file), str(image_file)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        assert len(lines[0].split(",")) == 193 and lines[1] == lines[2]
        cells = np.array([float(v) for v in lines[1].split(",")[1:]]).reshape(6, 32)
        np.testing.assert_allclose(cells.sum(axis=1), 1, atol=1e-6)


class TestCorpusAndTraining:
    def test_gen_corpus(self, tmp_path, capsys):
        assert main(["gen-corpus", "--subjects", "2", "--samples", "2", "--size", "32", "--out", str(tmp_path)]) == 0
        assert len(CorpusManifest.read(tmp_path)) == 4

    def test_train_writes_outputs(self, corpus_dir, tmp_path, capsys):
        code = main(["train", "--corpus-dir", str(corpus_dir), "--epochs", "1", "--patches-per-epoch", "16",
                     "--batch-size", "8", "--patch-size", "24", "--out", str(tmp_path)])
        assert code == 0
        for name in ("esisr_x2.ckpt", "train_log.csv", "loss_log.csv"):
            assert (tmp_path / name).is_file()
        assert "params=37968" in capsys.readouterr().out

    def test_train_bad_patch(self, corpus_dir, tmp_path):
        assert main(["train", "--corpus-dir", str(corpus_dir), "--scale", "3", "--patch-size", "32",
                     "--out", str(tmp_path)]) == 2

    def test_config_file(self, corpus_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"corpus_dir": str(corpus_dir), "epochs": 0, "patch_size": 24,
                                             "out": str(tmp_path / "m")}}))
        assert main(["--config", str(cfg), "train"]) == 0
        assert "epochs=0" in capsys.readouterr().out

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"epochz": 3}}))
        with pytest.raises(SystemExit) as exc:
            main(["--config", str(cfg), "train", "--corpus-dir", "x"])
        assert exc.value.code == 2


class TestVerify:
    def test_matches_module(self, corpus_dir, tmp_path, capsys):
        assert main(["verify", "--corpus", str(corpus_dir), "--prep", "none", "area:2",
                     "--json", str(tmp_path / "r.json")]) == 0
        out = capsys.readouterr().out
        rows = json.loads((tmp_path / "r.json").read_text())
        images = labeled_images(CorpusManifest.read(corpus_dir))
        for row, prep in zip(rows, (NoRedimension(), Resize("area", 2))):
            r = evaluate_pipeline(images, prep=prep, extractor=ToyEmbedder())
            assert row["eer"] == r.eer and row["fnmr"] == r.fnmr
            assert f"eer={r.eer:.4f}" in out
        assert "Inter-Area x2" in out and "No Redimension" in out

    def test_esisr_prep(self, corpus_dir, model_dir, capsys):
        assert main(["verify", "--corpus", str(corpus_dir), "--prep", "esisr:2", "--extractor", "toy", "bsif",
                     "--model-dir", str(model_dir)]) == 0
        assert "ESISR x2" in capsys.readouterr().out

    def test_embeddings(self, tmp_path, capsys):
        p = tmp_path / "e.csv"
        p.write_text("subject_id,sample_id,v0,v1\na,1,0,0\na,2,0,1\nb,1,5,5\nb,2,5,6\n")
        assert main(["verify", "--embeddings", str(p)]) == 0
        assert "eer=0.0000" in capsys.readouterr().out

    def test_embeddings_with_prep(self, tmp_path):
        assert main(["verify", "--embeddings", "e.csv", "--prep", "area:2"]) == 2

    def test_needs_input(self):
        assert main(["verify"]) == 2

    def test_bad_prep(self):
        with pytest.raises(UsageError):
            parse_prep("bogus:2")
        with pytest.raises(UsageError):
            parse_prep("area")

    def test_det(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "det.csv"
        nd = tmp_path / "nd.csv"
        assert main(["det", "--corpus", str(corpus_dir), "--out", str(out), "--normal-deviates", str(nd)]) == 0
        data = np.loadtxt(out, delimiter=",", skiprows=1)
        assert np.all(np.diff(data[:, 1]) >= 0) and np.all(np.diff(data[:, 2]) <= 0)
        assert np.all(np.isfinite(np.loadtxt(nd, delimiter=",", skiprows=1)))

    def test_det_single_config(self, corpus_dir, tmp_path):
        assert main(["det", "--corpus", str(corpus_dir), "--prep", "none", "area:2",
                     "--out", str(tmp_path / "d.csv")]) == 2
