import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esisr.bsif import generate_test_bank
from esisr.imgcore import ResizeMethod, gray
from esisr.model import EsisrConfig, build
from esisr.verify import (
    Bsif,
    DetCurve,
    EmbeddingFile,
    EmbeddingTable,
    IngestError,
    NoRedimension,
    ProtocolError,
    Resize,
    ScoreSet,
    SuperResolve,
    ToyEmbedder,
    build_cross_scores,
    build_scores,
    det_curve,
    eer,
    euclidean_distance,
    evaluate_pipeline,
    fnmr_at_fmr,
    format_report,
    load_embeddings_csv,
    operating_point,
    rates,
    report_json,
    run_grid,
    save_embeddings_csv,
    sweep_thresholds,
    toy_embed,
)
from helpers import brute_force_eer, brute_force_fnmr, brute_force_rates


def oracle_thresholds(mated, nonmated):
    vals = sorted(set(mated) | set(nonmated))
    span = vals[-1] - vals[0] or 1.0
    return [vals[0] - span] + [(a + b) / 2 for a, b in zip(vals, vals[1:])] + [vals[-1] + span]


def random_scores(seed):
    rng = np.random.default_rng(seed)
    nm, nn = rng.integers(10, 501, size=2)
    shift = rng.uniform(0, 2)
    mated = np.round(rng.gamma(2.0, 0.5, nm), int(rng.integers(1, 4)))
    nonmated = np.round(rng.gamma(2.0, 0.5, nn) + shift, int(rng.integers(1, 4)))
    return ScoreSet(mated, nonmated)


def small_table(subjects=("a", "a", "b", "b"), seed=0, dim=4):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(list(subjects), [str(i) for i in range(len(subjects))], rng.random((len(subjects), dim)))


def blob_images(n_subjects=4, n_samples=3, size=32, seed=0):
    """Distinct smooth patterns per subject with small per-sample noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for s in range(n_subjects):
        f = rng.uniform(1, 3, 2)
        base = 0.5 + 0.3 * np.sin(2 * np.pi * f[0] * xx + s) * np.cos(2 * np.pi * f[1] * yy)
        for j in range(n_samples):
            out.append((f"s{s}", str(j), gray(np.clip(base + 0.02 * rng.standard_normal(base.shape), 0, 1))))
    return out


class TestDistance:
    def test_values(self):
        assert euclidean_distance([1, 2], [1, 2]) == 0
        assert euclidean_distance([0, 0], [3, 4]) == 5

    def test_symmetric(self):
        a, b = np.random.default_rng(0).random((2, 7))
        assert euclidean_distance(a, b) == euclidean_distance(b, a)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            euclidean_distance([0, 0], [0, 0, 0])


class TestTable:
    def test_duplicate_key(self):
        with pytest.raises(IngestError, match="duplicate"):
            EmbeddingTable(["a", "a"], ["1", "1"], np.zeros((2, 3)))

    def test_non_finite(self):
        with pytest.raises(IngestError):
            EmbeddingTable(["a"], ["1"], [[0.0, np.nan]])

    def test_csv_round_trip(self, tmp_path):
        t = small_table(dim=5)
        save_embeddings_csv(t, tmp_path / "e.csv")
        back = load_embeddings_csv(tmp_path / "e.csv")
        assert back.subjects == t.subjects and back.samples == t.samples
        np.testing.assert_array_equal(back.vectors, t.vectors)

    @pytest.mark.parametrize("text", ["", "id,sample,v0\na,1,0\n", "subject_id,sample_id,v0,v1\na,1,0\n",
                                      "subject_id,sample_id,v0\na,1,x\n"])
    def test_bad_csv(self, tmp_path, text):
        (tmp_path / "e.csv").write_text(text)
        with pytest.raises(IngestError):
            load_embeddings_csv(tmp_path / "e.csv")


class TestBuildScores:
    def test_pair_counts(self):
        s = build_scores(small_table())
        assert (s.mated.size, s.nonmated.size) == (2, 4)
        assert s.metadata["pairing"] == "exhaustive"

    def test_values_match_loops(self):
        t = small_table(("a", "b", "a", "c", "b"), seed=1)
        mated, nonmated = [], []
        for i in range(len(t)):
            for j in range(i + 1, len(t)):
                d = euclidean_distance(t.vectors[i], t.vectors[j])
                (mated if t.subjects[i] == t.subjects[j] else nonmated).append(d)
        s = build_scores(t)
        np.testing.assert_allclose(s.mated, mated)
        np.testing.assert_allclose(s.nonmated, nonmated)

    def test_single_sample_per_subject(self):
        with pytest.raises(ProtocolError):
            build_scores(small_table(("a", "b", "c")))

    def test_single_subject(self):
        with pytest.raises(ProtocolError):
            build_scores(small_table(("a", "a")))

    def test_cap_is_seeded(self):
        t = small_table(tuple("aabbccddee"), seed=2)
        a = build_scores(t, max_nonmated=10, seed=3)
        b = build_scores(t, max_nonmated=10, seed=3)
        assert a.nonmated.size == 10 and a.metadata["pairing"].startswith("sampled")
        np.testing.assert_array_equal(a.nonmated, b.nonmated)
        assert set(a.nonmated) <= set(build_scores(t).nonmated)

    def test_cross(self):
        g, p = small_table(("a", "b"), seed=3), small_table(("a", "b", "c"), seed=4)
        s = build_cross_scores(g, p)
        assert (s.mated.size, s.nonmated.size) == (2, 4)

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            ScoreSet([-0.1], [0.2])


class TestEer:
    def test_perfect_separation(self):
        assert eer(ScoreSet([0.1, 0.2], [0.3, 0.4]))[0] == 0

    def test_worked_example(self):
        rate, thr = eer(ScoreSet([0.1, 0.2, 0.4], [0.3, 0.5, 0.6]))
        assert rate == pytest.approx(1 / 3, abs=1e-12)
        assert 0.2 <= thr <= 0.45

    def test_identical_distributions(self):
        rng = np.random.default_rng(5)
        for n in (10, 57, 200):
            x = rng.random(n)
            assert abs(eer(ScoreSet(x, x))[0] - 0.5) <= 1 / n

    def test_empty_class(self):
        with pytest.raises(ProtocolError):
            eer(ScoreSet([], [0.1]))

    @pytest.mark.parametrize("seed", range(50))
    def test_brute_force_recount(self, seed):
        s = random_scores(seed)
        t = oracle_thresholds(s.mated.tolist(), s.nonmated.tolist())
        np.testing.assert_allclose(sweep_thresholds(s), t, rtol=0, atol=1e-12)
        c = det_curve(s)
        fmr, fnmr = brute_force_rates(s.mated, s.nonmated, t)
        np.testing.assert_array_equal(c.fmr, fmr)
        np.testing.assert_array_equal(c.fnmr, fnmr)
        assert eer(s)[0] == pytest.approx(brute_force_eer(s.mated, s.nonmated, t), abs=1e-12)
        for target in (0.01, 0.1, 0.3):
            assert fnmr_at_fmr(s, target) == brute_force_fnmr(s.mated, s.nonmated, t, target)

    def test_eer_point_on_curve(self):
        s = random_scores(99)
        rate, thr = eer(s)
        fmr, fnmr = rates(s, [thr])
        assert abs(fmr[0] - fnmr[0]) <= 1 / min(s.mated.size, s.nonmated.size) + 1e-12


class TestFnmrAtFmr:
    def test_perfect_separation(self):
        assert fnmr_at_fmr(ScoreSet([0.1, 0.2], [0.3, 0.4]), 0.1) == 0

    def test_admits_at_most_one_false_match(self):
        rng = np.random.default_rng(6)
        s = ScoreSet(rng.random(30), rng.random(10) + 0.3)
        fnmr, thr, fmr = operating_point(s, 0.10)
        assert np.sum(s.nonmated < thr) <= 1 and fmr <= 0.10
        # the next sweep threshold would admit a second false match
        t = sweep_thresholds(s)
        nxt = t[np.searchsorted(t, thr) + 1]
        assert np.sum(s.nonmated < nxt) > 1

    def test_monotone_in_target(self):
        s = random_scores(7)
        vals = [fnmr_at_fmr(s, t) for t in (0.01, 0.05, 0.1, 0.2, 0.5, 0.9)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("target", [0, 1, -0.1])
    def test_bad_target(self, target):
        with pytest.raises(ValueError):
            fnmr_at_fmr(ScoreSet([0.1], [0.2]), target)


class TestDet:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone(self, seed):
        c = det_curve(random_scores(seed))
        assert np.all(np.diff(c.thresholds) > 0)
        assert np.all(np.diff(c.fmr) >= 0) and np.all(np.diff(c.fnmr) <= 0)
        assert (c.fmr[0], c.fnmr[0], c.fmr[-1], c.fnmr[-1]) == (0, 1, 1, 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        t = EmbeddingTable(list("aabbbcc"), list("0123456"), rng.random((7, 3)))
        tc = EmbeddingTable(t.subjects, t.samples, c * t.vectors)
        s, sc = build_scores(t), build_scores(tc)
        assert eer(s)[0] == pytest.approx(eer(sc)[0], abs=1e-12)
        assert fnmr_at_fmr(s) == fnmr_at_fmr(sc)
        d, dc = det_curve(s), det_curve(sc)
        np.testing.assert_array_equal(d.fmr, dc.fmr)
        np.testing.assert_array_equal(d.fnmr, dc.fnmr)
        np.testing.assert_allclose(dc.thresholds, c * d.thresholds, rtol=1e-9)

    def test_csv_round_trip(self, tmp_path):
        c = det_curve(random_scores(8))
        c.to_csv(tmp_path / "det.csv")
        assert (tmp_path / "det.csv").read_text().splitlines()[0] == "threshold,fmr,fnmr"
        back = DetCurve.read_csv(tmp_path / "det.csv")
        np.testing.assert_array_equal(back.thresholds, c.thresholds)
        np.testing.assert_array_equal(back.fmr, c.fmr)

    def test_normal_deviates_finite(self):
        x, y = det_curve(random_scores(9)).normal_deviates()
        assert np.all(np.isfinite(x)) and np.all(np.isfinite(y))


class TestPreparation:
    def test_labels(self):
        assert NoRedimension().label == "No Redimension"
        assert Resize(ResizeMethod.AREA, 2).label == "Inter-Area x2"
        assert SuperResolve(build(EsisrConfig(scale=3))).label == "ESISR x3"
        assert ToyEmbedder().label == "Toy 8x8"
        assert Bsif(generate_test_bank()).label == "BSIF 5x5-5"

    def test_resize_scales(self):
        img = gray(np.zeros((10, 12)))
        out = Resize(ResizeMethod.LINEAR, 3).apply(img)
        assert (out.height, out.width) == (30, 36)

    def test_toy_embed(self):
        v = toy_embed(gray(np.random.default_rng(10).random((40, 40))))
        assert v.shape == (64,)
        assert abs(v.mean()) < 1e-12 and np.linalg.norm(v) == pytest.approx(1)
        assert not toy_embed(gray(np.full((16, 16), 0.3))).any()

    def test_toy_embed_gain_offset_invariant(self):
        x = np.random.default_rng(11).random((32, 32))
        np.testing.assert_allclose(toy_embed(gray(0.5 * x + 0.2)), toy_embed(gray(x)), atol=1e-12)


class TestPipeline:
    def test_embedding_file_pass_through(self, tmp_path):
        t = small_table(tuple("aabbbcc"), seed=12)
        save_embeddings_csv(t, tmp_path / "e.csv")
        r = evaluate_pipeline(None, extractor=EmbeddingFile(str(tmp_path / "e.csv")))
        s = build_scores(t)
        assert r.eer == eer(s)[0] and r.fnmr == fnmr_at_fmr(s)
        assert (r.n_mated, r.n_nonmated) == (s.mated.size, s.nonmated.size)

    def test_embedding_file_rejects_prep(self, tmp_path):
        with pytest.raises(ValueError):
            evaluate_pipeline(None, prep=Resize(ResizeMethod.AREA, 2), extractor=EmbeddingFile("x.csv"))

    def test_identical_gallery_and_probes(self):
        imgs = blob_images()
        r = evaluate_pipeline(imgs, imgs)
        assert r.eer == 0 and r.pairing.startswith("cross")

    def test_super_resolve_then_bsif_keeps_length(self):
        imgs = blob_images(2, 2, size=24)
        bank = generate_test_bank()
        r0 = evaluate_pipeline(imgs, extractor=Bsif(bank))
        r1 = evaluate_pipeline(imgs, prep=SuperResolve(build(EsisrConfig(scale=2))), extractor=Bsif(bank))
        assert r0.dim == r1.dim == 192

    def test_separable_subjects(self):
        r = evaluate_pipeline(blob_images(5, 3))
        assert r.eer < 0.2

    def test_grid_and_reports(self):
        imgs = blob_images(3, 2, size=24)
        preps = [NoRedimension(), Resize(ResizeMethod.CUBIC, 2)]
        exts = [ToyEmbedder(), Bsif(generate_test_bank())]
        results = run_grid(imgs, preps, exts)
        assert [(r.prep, r.extractor) for r in results] == [(p.label, e.label) for p in preps for e in exts]
        direct = evaluate_pipeline(imgs, prep=preps[1], extractor=exts[1])
        assert results[3].eer == direct.eer and results[3].fnmr == direct.fnmr
        text = format_report(results)
        assert "Inter-Cubic x2" in text and "BSIF 5x5-5" in text and "pairing: exhaustive" in text
        rows = json.loads(report_json(results))
        assert len(rows) == 4 and {"prep", "extractor", "eer", "fnmr"} <= set(rows[0])
