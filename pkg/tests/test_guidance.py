import numpy as np
import pytest

from clickforge.guidance import (Click, next_robot_click, render_disks,
                                 sample_training_clicks)
from clickforge.raster import Mask


def enumerate_disk(row, col, radius, height, width):
    count = 0
    for i in range(height):
        for j in range(width):
            if (i - row) ** 2 + (j - col) ** 2 <= radius ** 2:
                count += 1
    return count


class TestRenderDisks:
    def test_interior_radius5_has_81_pixels(self):
        g = render_disks([Click(10, 10, "positive", 1)], 32, 32, radius=5)
        assert int(g.positive.sum()) == enumerate_disk(10, 10, 5, 32, 32) == 81
        assert int(g.negative.sum()) == 0

    def test_corner_disk_clips(self):
        g = render_disks([Click(0, 0, "positive", 1)], 32, 32, radius=5)
        assert int(g.positive.sum()) == enumerate_disk(0, 0, 5, 32, 32)

    def test_empty_clicks(self):
        g = render_disks([], 16, 20)
        assert g.positive.sum() == 0 and g.negative.sum() == 0
        assert g.positive.shape == (16, 20)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        clicks = [Click(int(rng.integers(24)), int(rng.integers(24)),
                        "positive" if rng.random() < 0.5 else "negative", k + 1)
                  for k in range(8)]
        g1 = render_disks(clicks, 24, 24)
        g2 = render_disks(list(reversed(clicks)), 24, 24)
        assert np.array_equal(g1.positive, g2.positive)
        assert np.array_equal(g1.negative, g2.negative)

    def test_coverage_property(self):
        clicks = [Click(5, 7, "positive", 1), Click(20, 3, "positive", 2)]
        g = render_disks(clicks, 25, 25, radius=4)
        for i in range(25):
            for j in range(25):
                near = any((i - c.row) ** 2 + (j - c.col) ** 2 <= 16
                           for c in clicks)
                assert bool(g.positive[i, j]) == near

    def test_out_of_bounds_click(self):
        with pytest.raises(ValueError, match="outside"):
            render_disks([Click(40, 2, "positive", 1)], 32, 32)

    def test_click_validation(self):
        with pytest.raises(ValueError, match="polarity"):
            Click(1, 1, "middle", 1)
        with pytest.raises(ValueError, match="1-based"):
            Click(1, 1, "positive", 0)


class TestRobotClicker:
    def test_centered_square_clicks_center(self):
        gt = np.zeros((31, 31), dtype=np.uint8)
        gt[10:21, 10:21] = 1
        click = next_robot_click(np.zeros_like(gt), gt)
        assert (click.row, click.col) == (15, 15)
        assert click.polarity == "positive"

    def test_full_frame_false_positive(self):
        pred = np.ones((33, 33), dtype=np.uint8)
        gt = np.zeros_like(pred)
        click = next_robot_click(pred, gt)
        assert (click.row, click.col) == (16, 16)
        assert click.polarity == "negative"

    def test_equal_prediction_rejected(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:5, 2:5] = 1
        with pytest.raises(ValueError, match="no click needed"):
            next_robot_click(m, m.copy())

    def test_click_always_lands_on_disagreement(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            pred = (rng.random((20, 20)) > 0.6).astype(np.uint8)
            gt = (rng.random((20, 20)) > 0.6).astype(np.uint8)
            if np.array_equal(pred, gt):
                continue
            c = next_robot_click(pred, gt)
            assert pred[c.row, c.col] != gt[c.row, c.col]
            expected = "positive" if gt[c.row, c.col] else "negative"
            assert c.polarity == expected

    def test_fixing_selected_component_reduces_error(self):
        rng = np.random.default_rng(5)
        from scipy import ndimage
        for _ in range(20):
            pred = (rng.random((20, 20)) > 0.55).astype(np.uint8)
            gt = (rng.random((20, 20)) > 0.55).astype(np.uint8)
            if np.array_equal(pred, gt):
                continue
            c = next_robot_click(pred, gt)
            error = pred != gt
            labels, _n = ndimage.label(error)
            comp = labels == labels[c.row, c.col]
            fixed = np.where(comp, gt, pred)
            assert (fixed != gt).sum() < error.sum()

    def test_false_negative_wins_ties_toward_positive(self):
        # one FN pixel and one FP pixel: equal areas, positive must win
        pred = np.zeros((9, 9), dtype=np.uint8)
        gt = np.zeros_like(pred)
        gt[2, 2] = 1      # false negative
        pred[6, 6] = 1    # false positive
        click = next_robot_click(pred, gt)
        assert click.polarity == "positive"
        assert (click.row, click.col) == (2, 2)


class TestTrainingClickSampler:
    def test_deterministic(self):
        gt = Mask(np.pad(np.ones((10, 12), dtype=np.uint8), 8))
        c1 = sample_training_clicks(gt, 123)
        c2 = sample_training_clicks(gt, 123)
        assert c1 == c2

    def test_positive_clicks_inside_foreground(self):
        rng = np.random.default_rng(0)
        checked = 0
        seed = 0
        while checked < 1000:
            gt = np.zeros((26, 26), dtype=np.uint8)
            r, c = rng.integers(4, 14), rng.integers(4, 14)
            gt[r:r + 10, c:c + 10] = 1
            for click in sample_training_clicks(gt, seed):
                if click.polarity == "positive":
                    assert gt[click.row, click.col] == 1
                    checked += 1
            seed += 1

    def test_full_frame_has_no_negatives(self):
        gt = np.ones((20, 20), dtype=np.uint8)
        for seed in range(30):
            clicks = sample_training_clicks(gt, seed)
            assert all(c.polarity == "positive" for c in clicks)

    def test_counts_and_ordinals(self):
        gt = np.zeros((30, 30), dtype=np.uint8)
        gt[5:20, 5:20] = 1
        for seed in range(40):
            clicks = sample_training_clicks(gt, seed)
            assert 1 <= len(clicks) <= 10
            assert [c.ordinal for c in clicks] == list(range(1, len(clicks) + 1))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            sample_training_clicks(np.zeros((8, 8), dtype=np.uint8), 0)
