import math

import numpy as np
import pytest

from daplab import analysis
from daplab import model as m
from daplab.classes import IGNORE_ID, NUM_CLASSES
from daplab.datagen import LabeledImage
from daplab.errors import InputError


def gaussian(mean, variance, class_id=0):
    return analysis.ClassGaussian(class_id, np.asarray(mean, dtype=np.float64),
                                  np.asarray(variance, dtype=np.float64), 1000)


class TestEvaluate:
    def test_perfect_prediction_scores_one(self):
        state = m.init_student(seed=0)
        rng = np.random.default_rng(0)
        items = []
        for _ in range(3):
            image = rng.uniform(size=(3, 16, 16))
            items.append(LabeledImage(image, analysis.predict_labels(state, image)))
        metrics = analysis.evaluate(state, items)
        present = ~np.isnan(metrics.per_class_iou)
        assert metrics.miou == 1.0
        np.testing.assert_array_equal(metrics.per_class_iou[present], 1.0)

    def test_hand_counted_iou(self):
        # class 1: TP=4, FP=2, FN=1 -> IOU = 4/7
        truth = np.zeros((4, 4), dtype=np.uint8)
        truth[0, :4] = 1
        truth[1, 0] = 1
        pred = np.zeros((4, 4), dtype=np.uint8)
        pred[0, :4] = 1          # 4 true positives
        pred[1, 0] = 0           # 1 false negative
        pred[2, 0] = 1           # 2 false positives
        pred[2, 1] = 1
        confusion = analysis.confusion_from_pairs(truth, pred)
        metrics = analysis.metrics_from_confusion(confusion)
        assert metrics.per_class_iou[1] == pytest.approx(4.0 / 7.0)

    def test_confusion_row_sums_match_truth_counts(self):
        rng = np.random.default_rng(1)
        truth = rng.integers(0, NUM_CLASSES, size=(8, 8)).astype(np.uint8)
        pred = rng.integers(0, NUM_CLASSES, size=(8, 8)).astype(np.uint8)
        confusion = analysis.confusion_from_pairs(truth, pred)
        np.testing.assert_array_equal(
            confusion.sum(axis=1),
            np.bincount(truth.ravel(), minlength=NUM_CLASSES))

    def test_ignore_pixels_excluded(self):
        truth = np.array([[0, IGNORE_ID]], dtype=np.uint8)
        pred = np.array([[0, 3]], dtype=np.uint8)
        confusion = analysis.confusion_from_pairs(truth, pred)
        assert confusion.sum() == 1

    def test_absent_class_excluded_from_miou(self):
        confusion = np.zeros((3, 3), dtype=np.int64)
        confusion[0, 0] = 5
        confusion[1, 1] = 3
        confusion[1, 0] = 1
        metrics = analysis.metrics_from_confusion(confusion)
        assert np.isnan(metrics.per_class_iou[2])
        # class 0: TP=5, FP=1 -> 5/6; class 1: TP=3, FN=1 -> 3/4
        assert metrics.miou == pytest.approx((5.0 / 6.0 + 3.0 / 4.0) / 2.0)

    def test_order_invariance(self):
        state = m.init_student(seed=2)
        rng = np.random.default_rng(3)
        items = [LabeledImage(rng.uniform(size=(3, 16, 16)),
                              rng.integers(0, NUM_CLASSES, (16, 16)).astype(np.uint8))
                 for _ in range(4)]
        a = analysis.evaluate(state, items)
        b = analysis.evaluate(state, items[::-1])
        np.testing.assert_array_equal(a.confusion, b.confusion)
        assert a.miou == b.miou

    def test_empty_split_rejected(self):
        with pytest.raises(InputError):
            analysis.evaluate(m.init_student(seed=0), [])


class TestClassFeatureStats:
    def test_identical_features_give_exact_mean_floored_variance(self):
        v = np.array([1.0, -2.0, 3.0])
        stats = analysis.fit_class_gaussians({0: [np.tile(v, (40, 1))]})
        np.testing.assert_array_equal(stats[0].mean, v)
        np.testing.assert_array_equal(stats[0].variance,
                                      np.full(3, analysis.VARIANCE_FLOOR))
        assert stats[0].count == 40

    def test_cosine_of_mean_with_itself_is_one(self):
        v = np.array([0.3, 0.4])
        assert analysis.cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_synthetic_clouds_match_closed_form(self):
        rng = np.random.default_rng(4)
        mean_a, mean_b = np.array([2.0, 0.0]), np.array([1.0, 1.0])
        cloud_a = mean_a + rng.normal(size=(500, 2))
        cloud_b = mean_b + rng.normal(size=(500, 2))
        # recenter so the sample means are exactly the targets
        cloud_a += mean_a - cloud_a.mean(axis=0)
        cloud_b += mean_b - cloud_b.mean(axis=0)
        stats = analysis.fit_class_gaussians({0: [cloud_a], 1: [cloud_b]})
        np.testing.assert_allclose(stats[0].mean, mean_a, atol=1e-12)
        np.testing.assert_allclose(stats[1].mean, mean_b, atol=1e-12)
        expected = (mean_a @ mean_b) / (np.linalg.norm(mean_a) * np.linalg.norm(mean_b))
        assert analysis.cosine_similarity(stats[0].mean, stats[1].mean) == \
            pytest.approx(expected, abs=1e-12)

    def test_absent_class_marked_none(self):
        state = m.init_student(seed=5)
        rng = np.random.default_rng(6)
        image = rng.uniform(size=(3, 16, 16))
        labels = np.zeros((16, 16), dtype=np.uint8)   # only class 0 present
        stats, cosine = analysis.class_feature_stats(
            state, [LabeledImage(image, labels)], [0, 5])
        assert stats[0] is not None and stats[0].count > 0
        assert stats[5] is None
        assert np.isnan(cosine[0, 1]) and np.isnan(cosine[1, 1])
        assert cosine[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_nearest_label_downsampling_convention(self):
        labels = np.arange(64, dtype=np.uint8).reshape(8, 8) % NUM_CLASSES
        small = analysis.nearest_labels(labels, 4, 4)
        np.testing.assert_array_equal(small, labels[::2, ::2])


class TestGaussianIOU:
    def test_identical_gaussians_score_one(self):
        a = gaussian([0.0, 1.0], [1.0, 2.0])
        b = gaussian([0.0, 1.0], [1.0, 2.0], class_id=1)
        iou = analysis.gaussian_iou(a, b, 100_000, np.random.default_rng(0))
        assert 0.98 <= iou <= 1.0

    def test_far_apart_gaussians_barely_overlap(self):
        a = gaussian([0.0], [1.0])
        b = gaussian([20.0], [1.0], class_id=1)
        iou = analysis.gaussian_iou(a, b, 10_000, np.random.default_rng(1))
        assert iou < 0.01

    def test_one_dimensional_closed_form(self):
        # means 0 and 2, unit variance: the density boundary is x = 1, so
        # r = Phi(-1) on both sides and the score is 2*Phi(-1)/(2-2*Phi(-1))
        phi = 0.5 * (1.0 + math.erf(-1.0 / math.sqrt(2.0)))
        expected = 2.0 * phi / (2.0 - 2.0 * phi)
        assert expected == pytest.approx(0.1886, abs=5e-4)
        a = gaussian([0.0], [1.0])
        b = gaussian([2.0], [1.0], class_id=1)
        iou = analysis.gaussian_iou(a, b, 100_000, np.random.default_rng(2))
        assert iou == pytest.approx(expected, abs=0.01)

    def test_symmetry_in_expectation(self):
        a = gaussian([0.0, 0.0], [1.0, 1.0])
        b = gaussian([1.0, 0.5], [2.0, 1.0], class_id=1)
        ab = analysis.gaussian_iou(a, b, 100_000, np.random.default_rng(3))
        ba = analysis.gaussian_iou(b, a, 100_000, np.random.default_rng(4))
        assert abs(ab - ba) < 0.02

    def test_monotone_decrease_with_separation(self):
        rng = np.random.default_rng(5)
        scores = []
        for offset in (0.0, 0.5, 1.0, 2.0, 4.0):
            a = gaussian([0.0, 0.0], [1.0, 1.0])
            b = gaussian([offset, 0.0], [1.0, 1.0], class_id=1)
            scores.append(analysis.gaussian_iou(a, b, 50_000, rng))
        assert all(x > y for x, y in zip(scores, scores[1:]))

    def test_small_sample_count_rejected(self):
        a = gaussian([0.0], [1.0])
        with pytest.raises(InputError):
            analysis.gaussian_iou(a, a, 10, np.random.default_rng(6))

    def test_degenerate_covariance_rejected(self):
        a = gaussian([0.0], [1.0])
        bad = gaussian([0.0], [0.0], class_id=1)
        with pytest.raises(InputError):
            analysis.gaussian_iou(a, bad, 1000, np.random.default_rng(7))


class TestRelationshipMatrix:
    def test_orthonormal_rows_give_identity(self):
        np.testing.assert_allclose(analysis.relationship_matrix(np.eye(4)),
                                   np.eye(4), atol=1e-15)

    def test_one_hot_embeddings_give_identity(self):
        from daplab.priors import build_one_hot
        e = build_one_hot(NUM_CLASSES)
        np.testing.assert_allclose(analysis.relationship_matrix(e.vectors),
                                   np.eye(NUM_CLASSES), atol=1e-15)

    def test_known_planar_angles(self):
        vectors = np.array([[1.0, 0.0],
                            [math.cos(math.pi / 3), math.sin(math.pi / 3)],
                            [0.0, 2.0]])
        rel = analysis.relationship_matrix(vectors)
        assert rel[0, 1] == pytest.approx(math.cos(math.pi / 3), abs=1e-12)
        assert rel[0, 2] == pytest.approx(0.0, abs=1e-12)
        assert rel[1, 2] == pytest.approx(math.cos(math.pi / 6), abs=1e-12)
        np.testing.assert_allclose(rel, rel.T, atol=1e-15)
        np.testing.assert_allclose(np.diag(rel), 1.0, atol=1e-12)

    def test_zero_row_names_class(self):
        vectors = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(InputError, match="sidewalk"):
            analysis.relationship_matrix(vectors, names=("road", "sidewalk"))


class TestHeatmap:
    def test_identity_matrix_bins(self, tmp_path):
        path = tmp_path / "rel.pgm"
        analysis.emit_heatmap(np.eye(3), path)
        data = path.read_bytes()
        assert data.startswith(b"P5\n3 3\n255\n")
        pixels = np.frombuffer(data[-9:], dtype=np.uint8).reshape(3, 3)
        assert (np.diag(pixels) == 255).all()
        off = pixels[~np.eye(3, dtype=bool)]
        assert (off < 255).all() and (off == off[0]).all()

    def test_constant_matrix_uniform_image(self, tmp_path):
        path = tmp_path / "c.pgm"
        analysis.emit_heatmap(np.full((2, 2), 0.25), path)
        pixels = np.frombuffer(path.read_bytes()[-4:], dtype=np.uint8)
        assert (pixels == pixels[0]).all()

    def test_sidecar_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        matrix = rng.uniform(-1, 1, size=(4, 4))
        path = tmp_path / "m.pgm"
        analysis.emit_heatmap(matrix, path)
        parsed = analysis.read_heatmap_sidecar(tmp_path / "m.pgm.csv")
        np.testing.assert_allclose(parsed, matrix, atol=5e-7)

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(InputError):
            analysis.emit_heatmap(np.array([[np.inf]]), tmp_path / "x.pgm")

    def test_values_clipped(self, tmp_path):
        path = tmp_path / "clip.pgm"
        analysis.emit_heatmap(np.array([[5.0, -5.0]]), path)
        pixels = np.frombuffer(path.read_bytes()[-2:], dtype=np.uint8)
        np.testing.assert_array_equal(pixels, [255, 0])


class TestMetricsCSV:
    def test_metrics_csv_layout(self, tmp_path):
        metrics = analysis.metrics_from_confusion(np.eye(NUM_CLASSES, dtype=np.int64))
        path = tmp_path / "metrics.csv"
        analysis.write_metrics_csv(metrics, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "class,iou"
        assert lines[1].startswith("road,")
        assert lines[-1] == "miou,1.000000"

    def test_confusion_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        confusion = rng.integers(0, 50, size=(NUM_CLASSES, NUM_CLASSES))
        path = tmp_path / "confusion.csv"
        analysis.write_confusion_csv(confusion, path)
        np.testing.assert_array_equal(analysis.read_confusion_csv(path), confusion)
