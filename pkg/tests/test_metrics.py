import numpy as np
import pytest
from PIL import Image

from rgbtsal.metrics import (mae, pr_curve, f_measure, adaptive_f_measure, s_measure,
                             e_measure, e_measure_curve, evaluate_pairs, evaluate_dataset,
                             thresholds, MetricReport)
from rgbtsal.exceptions import InputError, UsageError
from oracles import (mae_oracle, pr_oracle, f_oracle, adaptive_f_oracle,
                     s_measure_oracle, e_measure_oracle)


def random_pair(rng, size=16):
    pred = rng.random((size, size))
    gt = (rng.random((size, size)) > rng.uniform(0.2, 0.8)).astype(np.float64)
    return pred, gt


class TestMae:
    def test_perfect(self):
        gt = np.eye(8)
        assert mae(gt, gt) == 0.0

    def test_opposite(self):
        assert mae(np.ones((4, 4)), np.zeros((4, 4))) == 1.0

    def test_uniform_half(self):
        gt = (np.random.default_rng(0).random((6, 6)) > 0.5).astype(float)
        assert mae(np.full((6, 6), 0.5), gt) == pytest.approx(0.5)

    def test_symmetry_on_binary_maps(self):
        rng = np.random.default_rng(1)
        a = (rng.random((8, 8)) > 0.5).astype(float)
        b = (rng.random((8, 8)) > 0.5).astype(float)
        assert mae(a, b) == mae(b, a)

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pred, gt = random_pair(rng)
            assert mae(pred, gt) == pytest.approx(mae_oracle(pred, gt), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            mae(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_out_of_range_pred(self):
        with pytest.raises(InputError):
            mae(np.full((4, 4), 1.5), np.ones((4, 4)))


class TestPrCurve:
    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pred, gt = random_pair(rng)
            if gt.sum() == 0:
                gt[0, 0] = 1.0
            p, r = pr_curve(pred, gt)
            p_ref, r_ref = pr_oracle(pred, gt)
            np.testing.assert_allclose(p, p_ref, atol=1e-12)
            np.testing.assert_allclose(r, r_ref, atol=1e-12)

    def test_recall_nonincreasing(self):
        rng = np.random.default_rng(4)
        pred, gt = random_pair(rng)
        gt[0, 0] = 1.0
        _, r = pr_curve(pred, gt)
        assert np.all(np.diff(r) <= 0)

    def test_empty_positive_convention(self):
        pred = np.zeros((4, 4))
        gt = np.ones((4, 4))
        p, r = pr_curve(pred, gt)
        # beyond threshold 0 nothing is predicted positive: precision pinned to 1
        assert p[1] == 1.0 and r[1] == 0.0

    def test_no_foreground_rejected(self):
        with pytest.raises(InputError):
            pr_curve(np.random.default_rng(5).random((4, 4)), np.zeros((4, 4)))


class TestFMeasure:
    def test_perfect(self):
        assert f_measure(1.0, 1.0) == pytest.approx(1.0)

    def test_reference_point(self):
        assert f_measure(0.5, 1.0) == pytest.approx(0.5652173913043478, abs=1e-12)

    def test_zero_recall(self):
        assert f_measure(1.0, 0.0) == 0.0

    def test_degenerate_denominator(self):
        assert f_measure(0.0, 0.0) == 0.0

    def test_adaptive_matches_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            pred, gt = random_pair(rng)
            if gt.sum() == 0:
                gt[0, 0] = 1.0
            assert adaptive_f_measure(pred, gt) == pytest.approx(
                adaptive_f_oracle(pred, gt), abs=1e-12)


class TestSMeasure:
    def test_perfect_binary_prediction(self):
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1.0
        assert s_measure(gt, gt) == pytest.approx(1.0, abs=1e-6)

    def test_all_zero_gt_and_pred(self):
        assert s_measure(np.zeros((5, 5)), np.zeros((5, 5))) == pytest.approx(1.0)

    def test_all_one_gt(self):
        pred = np.full((5, 5), 0.8)
        assert s_measure(pred, np.ones((5, 5))) == pytest.approx(0.8)

    def test_inverted_prediction_scores_low(self):
        gt = np.zeros((8, 8))
        gt[2:6, 2:6] = 1.0
        assert s_measure(1.0 - gt, gt) < 0.5

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            pred, gt = random_pair(rng)
            assert s_measure(pred, gt) == pytest.approx(
                s_measure_oracle(pred, gt), abs=1e-9)

    def test_range(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pred, gt = random_pair(rng)
            assert 0.0 <= s_measure(pred, gt) <= 1.0


class TestEMeasure:
    def test_perfect_binary_prediction(self):
        gt = np.zeros((4, 4))
        gt[:2, :] = 1.0
        assert e_measure(gt, gt) == pytest.approx(1.0, abs=1e-6)

    def test_checkerboard_inversion(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert e_measure(1.0 - gt, gt) == pytest.approx(0.25, abs=1e-9)

    def test_constant_equal_maps(self):
        assert e_measure(np.ones((4, 4)), np.ones((4, 4))) == pytest.approx(1.0)
        assert e_measure(np.zeros((4, 4)), np.zeros((4, 4))) == pytest.approx(1.0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            pred, gt = random_pair(rng)
            assert e_measure(pred, gt) == pytest.approx(
                e_measure_oracle(pred, gt), abs=1e-9)

    def test_matches_oracle_degenerate_gt(self):
        rng = np.random.default_rng(10)
        pred = rng.random((8, 8))
        for gt in (np.zeros((8, 8)), np.ones((8, 8))):
            assert e_measure(pred, gt) == pytest.approx(e_measure_oracle(pred, gt), abs=1e-9)

    def test_curve_length(self):
        rng = np.random.default_rng(11)
        pred, gt = random_pair(rng)
        assert e_measure_curve(pred, gt).shape == (256,)


class TestEvaluatePairs:
    def test_single_perfect_prediction(self):
        gt = np.zeros((8, 8))
        gt[2:5, 3:6] = 1.0
        report = evaluate_pairs([("a", gt, gt)])
        assert report.n_images == 1
        assert report.f_max == pytest.approx(1.0)
        assert report.f_adaptive == pytest.approx(1.0)
        assert report.s == pytest.approx(1.0, abs=1e-6)
        assert report.e_max == pytest.approx(1.0, abs=1e-6)
        assert report.mae == 0.0
        assert len(report.pr) == 256

    def test_duplicate_idempotent(self):
        rng = np.random.default_rng(12)
        pred, gt = random_pair(rng)
        gt[0, 0] = 1.0
        single = evaluate_pairs([("a", pred, gt)])
        double = evaluate_pairs([("a", pred, gt), ("b", pred, gt)])
        for key in ("f_max", "f_adaptive", "s", "e_max", "mae"):
            assert getattr(single, key) == pytest.approx(getattr(double, key), abs=1e-12)

    def test_no_foreground_flagged_and_excluded(self):
        rng = np.random.default_rng(13)
        pred, gt = random_pair(rng)
        gt[0, 0] = 1.0
        with_flagged = evaluate_pairs([("good", pred, gt), ("empty", pred, np.zeros_like(gt))])
        without = evaluate_pairs([("good", pred, gt)])
        assert with_flagged.flagged == ["empty"]
        assert with_flagged.n_images == 2
        assert with_flagged.f_max == pytest.approx(without.f_max)
        assert with_flagged.s == pytest.approx(without.s)
        # mae and e still include the flagged image
        assert with_flagged.mae != pytest.approx(without.mae)

    def test_no_pairs_rejected(self):
        with pytest.raises(UsageError):
            evaluate_pairs([])


def write_gray(path, array):
    Image.fromarray(np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)).save(path)


class TestEvaluateDataset:
    def make_dirs(self, tmp_path, stems=("x", "y")):
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        rng = np.random.default_rng(14)
        for stem in stems:
            gt = np.zeros((16, 16))
            gt[4:10, 5:12] = 1.0
            write_gray(gt_dir / f"{stem}.png", gt)
            write_gray(pred_dir / f"{stem}.png", np.clip(gt + rng.normal(0, 0.1, gt.shape), 0, 1))
        return pred_dir, gt_dir

    def test_complete_report(self, tmp_path):
        pred_dir, gt_dir = self.make_dirs(tmp_path)
        report = evaluate_dataset(pred_dir, gt_dir)
        assert report.n_images == 2
        for key in ("f_max", "f_adaptive", "s", "e_max", "mae"):
            value = getattr(report, key)
            assert value is not None and 0.0 <= value <= 1.0
        assert len(report.pr) == 256
        assert report.skipped == []

    def test_missing_pairs_listed(self, tmp_path):
        pred_dir, gt_dir = self.make_dirs(tmp_path)
        write_gray(pred_dir / "orphan.png", np.zeros((8, 8)))
        report = evaluate_dataset(pred_dir, gt_dir)
        assert report.skipped == ["orphan"]
        assert report.n_images == 2

    def test_empty_directory_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        pred_dir, gt_dir = self.make_dirs(tmp_path)
        with pytest.raises(UsageError):
            evaluate_dataset(tmp_path / "empty", gt_dir)

    def test_size_mismatch_resized_with_warning(self, tmp_path):
        pred_dir, gt_dir = self.make_dirs(tmp_path, stems=("x",))
        write_gray(pred_dir / "x.png", np.ones((8, 8)))
        with pytest.warns(UserWarning):
            report = evaluate_dataset(pred_dir, gt_dir)
        assert report.n_images == 1

    def test_report_json_roundtrip(self, tmp_path):
        pred_dir, gt_dir = self.make_dirs(tmp_path)
        report = evaluate_dataset(pred_dir, gt_dir)
        path = tmp_path / "report.json"
        report.to_json(path)
        loaded = MetricReport.from_json(path)
        assert loaded.mae == pytest.approx(report.mae)
        assert loaded.n_images == report.n_images
        assert len(loaded.pr) == 256


class TestThresholds:
    def test_grid(self):
        t = thresholds()
        assert t[0] == 0.0 and t[-1] == 1.0 and len(t) == 256
