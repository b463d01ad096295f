"""Tests for recall, Otsu binarization, mIoU, grounding and the report."""

import shutil
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from src.evaluation import (
    GroundingError,
    evaluate,
    ground_queries,
    ground_query,
    heatmaps_from_weights,
    iou,
    mass_inside,
    miou,
    otsu_threshold,
    ranks,
    recall_at_1,
)
from src.model import CaftModel
from src.tensor import no_grad
from src.vision import encode_image


def brute_force_otsu(heatmap: np.ndarray) -> np.ndarray:
    """Exhaustive search over all 256 thresholds with exact class statistics."""
    values = (heatmap - heatmap.min()) / (heatmap.max() - heatmap.min())
    bins = np.minimum((values * 256).astype(int), 255).ravel()
    n = bins.size
    best, best_t = None, None
    for t in range(255):
        low, high = bins[bins <= t], bins[bins > t]
        if low.size == 0 or high.size == 0:
            continue
        w0, w1 = Fraction(low.size, n), Fraction(high.size, n)
        mu0 = Fraction(int(low.sum()), low.size)
        mu1 = Fraction(int(high.sum()), high.size)
        between = w0 * w1 * (mu0 - mu1) ** 2
        if best is None or between > best:
            best, best_t = between, t
    return (bins > best_t).reshape(heatmap.shape)


class TestRecall:
    """Recall at 1 and ranks."""

    def test_identity(self):
        """Perfect scores give recall 1."""
        assert recall_at_1(np.eye(4), [0, 1, 2, 3]) == 1.0

    def test_ties_go_to_lowest_index(self):
        """A constant matrix retrieves column 0 everywhere."""
        assert recall_at_1(np.ones((4, 4)), [3, 3, 3, 3]) == 0.0
        assert recall_at_1(np.ones((4, 4)), [0, 0, 0, 0]) == 1.0

    def test_matches_sort_oracle(self):
        """Recall equals the share of rank-0 hits from a full stable sort."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            scores = rng.normal(size=(50, 50))
            truth = rng.integers(0, 50, size=50)
            order = np.argsort(-scores, axis=1, kind="stable")
            expected = np.mean(order[:, 0] == truth)
            assert recall_at_1(scores, truth) == expected
            oracle_ranks = [
                int(np.where(row == t)[0][0]) for row, t in zip(order, truth)
            ]
            assert ranks(scores, truth) == oracle_ranks

    def test_monotone_transform(self):
        """Strictly increasing transforms do not change recall."""
        rng = np.random.default_rng(1)
        scores = rng.normal(size=(10, 10))
        truth = list(range(10))
        assert recall_at_1(scores, truth) == recall_at_1(np.exp(3 * scores), truth)


class TestOtsu:
    """Histogram thresholding."""

    def test_bimodal(self):
        """Two clusters split exactly."""
        mask, degenerate = otsu_threshold(np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0]))
        assert mask.tolist() == [False, False, False, True, True, True]
        assert not degenerate

    def test_constant_is_degenerate(self):
        """A flat heatmap yields an empty mask and the degenerate flag."""
        mask, degenerate = otsu_threshold(np.full((4, 4), 0.25))
        assert not mask.any()
        assert degenerate

    def test_matches_brute_force(self):
        """The chosen split matches an exhaustive exact search."""
        rng = np.random.default_rng(2)
        for _ in range(30):
            heatmap = rng.random((8, 8)) ** 3
            mask, _ = otsu_threshold(heatmap)
            np.testing.assert_array_equal(mask, brute_force_otsu(heatmap))

    def test_affine_invariance(self):
        """Positive affine rescaling keeps the mask."""
        rng = np.random.default_rng(3)
        heatmap = rng.integers(0, 50, size=(6, 6)).astype(float)
        mask, _ = otsu_threshold(heatmap)
        scaled, _ = otsu_threshold(4.0 * heatmap + 2.0)
        np.testing.assert_array_equal(mask, scaled)


class TestMasks:
    """IoU, mIoU and mass inside a mask."""

    def test_iou_cases(self):
        """Identity, disjoint, one-third overlap and empty union."""
        a = np.array([[True, True, False]])
        b = np.array([[False, True, True]])
        assert iou(a, a) == 1.0
        assert iou(a & ~b, b & ~a) == 0.0
        assert iou(a, b) == pytest.approx(1 / 3)
        assert iou(np.zeros((1, 3), bool), np.zeros((1, 3), bool)) == 1.0

    def test_miou_symmetric(self):
        """mIoU does not depend on argument order."""
        rng = np.random.default_rng(4)
        preds = [rng.random((5, 5)) > 0.5 for _ in range(6)]
        truths = [rng.random((5, 5)) > 0.5 for _ in range(6)]
        assert miou(preds, truths) == miou(truths, preds)

    def test_shape_mismatch(self):
        """Different mask sizes are rejected."""
        with pytest.raises(GroundingError):
            miou([np.zeros((2, 2), bool)], [np.zeros((3, 3), bool)])

    def test_count_mismatch(self):
        """Different numbers of masks are rejected."""
        with pytest.raises(GroundingError):
            miou([np.zeros((2, 2), bool)], [])

    def test_mass_inside(self):
        """Mass inside counts the heatmap share covered by the mask."""
        heatmap = np.array([[0.5, 0.25], [0.25, 0.0]])
        mask = np.array([[True, False], [True, False]])
        assert mass_inside(heatmap, mask) == pytest.approx(0.75)


class TestHeatmaps:
    """Segment weights pushed to pixels."""

    def setup_method(self):
        """Set up a crisp 2x2 image with two segments."""
        self.pixel_map = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])

    def test_uniform_weights_on_crisp_map(self):
        """Uniform weights over crisp segments give a uniform heatmap."""
        heatmap = heatmaps_from_weights(self.pixel_map, np.array([[0.5, 0.5]]), (2, 2))
        np.testing.assert_allclose(heatmap, np.full((1, 2, 2), 0.25))

    def test_single_segment(self):
        """All weight on one segment lights up exactly its pixels."""
        heatmap = heatmaps_from_weights(self.pixel_map, np.array([[0.0, 1.0]]), (2, 2))
        np.testing.assert_allclose(heatmap[0], [[0.0, 0.0], [0.5, 0.5]])


class TestGrounding:
    """Grounding with a small untrained model."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_heatmap_sums_to_one(self, tiny_config, vocab, samples):
        """Each query heatmap is a distribution over pixels."""
        model = CaftModel(tiny_config, 0)
        with no_grad():
            image = encode_image(samples[0].image, model.vision, tiny_config)
        heatmaps = ground_queries(samples[0].long_caption[1:], image, model, vocab)
        assert heatmaps.shape == (len(samples[0].long_caption) - 1, 24, 24)
        np.testing.assert_allclose(heatmaps.sum(axis=(1, 2)), 1.0, atol=1e-6)
        assert np.all(heatmaps >= 0.0)

    def test_ground_query_mask(self, tiny_config, vocab, samples):
        """ground_query returns the Otsu mask of its heatmap."""
        model = CaftModel(tiny_config, 0)
        with no_grad():
            image = encode_image(samples[0].image, model.vision, tiny_config)
        result = ground_query(samples[0].long_caption[1], image, model, vocab)
        mask, _ = otsu_threshold(result.heatmap)
        np.testing.assert_array_equal(result.mask, mask)

    def test_empty_query(self, tiny_config, vocab, samples):
        """A query without words is rejected."""
        model = CaftModel(tiny_config, 0)
        with no_grad():
            image = encode_image(samples[0].image, model.vision, tiny_config)
        with pytest.raises(GroundingError):
            ground_queries(["..."], image, model, vocab)

    def test_report(self, tiny_config, vocab, samples):
        """The report has one section per alpha and one row per object sentence."""
        model = CaftModel(tiny_config, 0)
        heatmaps = Path(self.temp_dir) / "maps"
        report = evaluate(
            model, vocab, samples[:6], [0.0, 0.3, 0.7, 1.0],
            max_workers=2, heatmap_dir=str(heatmaps),
        )
        text = report.render()
        assert text.count("[alpha ") == 4
        assert text.count("alpha,i2t_r1,t2i_r1") == 4
        objects = sum(len(s.scene.objects) for s in samples[:6])
        assert len(report.grounding) == objects
        ids = [g.query_id for g in report.grounding]
        assert ids == sorted(ids)
        assert "[summary]" in text and "degenerate," in text
        first = report.grounding[0].query_id
        assert (heatmaps / f"{first}_heatmap.pgm").is_file()
        assert (heatmaps / f"{first}_mask.pgm").is_file()

        path = Path(self.temp_dir) / "report.txt"
        report.write(str(path))
        assert path.read_text() == text

    def test_order_independent(self, tiny_config, vocab, samples):
        """Shuffling the corpus leaves the metrics unchanged."""
        model = CaftModel(tiny_config, 0)
        forward = evaluate(model, vocab, samples[:5], [0.3])
        backward = evaluate(model, vocab, samples[:5][::-1], [0.3])
        assert forward.retrieval[0].i2t_r1 == backward.retrieval[0].i2t_r1
        assert forward.retrieval[0].t2i_r1 == backward.retrieval[0].t2i_r1
        assert forward.miou == pytest.approx(backward.miou, abs=1e-9)
