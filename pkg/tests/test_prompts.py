"""Prompt geometry: distance transform, center point, box noising, simulation."""

import numpy as np
import pytest

from sonoseg.prompts import Box, Point, center_point, distance_transform_l1, gt_box, noise_box, sample_training_prompt


def brute_force_l1(mask):
    """All-pairs city-block distance to background (image border counts)."""
    mask = np.asarray(mask) != 0
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int64)
    bg = [(r, c) for r in range(h) for c in range(w) if not mask[r, c]]
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            best = min(r + 1, h - r, c + 1, w - c)  # virtual background outside
            for br, bc in bg:
                best = min(best, abs(r - br) + abs(c - bc))
            out[r, c] = best
    return out


class TestDistanceTransform:
    def test_all_background(self):
        np.testing.assert_array_equal(distance_transform_l1(np.zeros((4, 5))), 0)

    def test_single_interior_pixel(self):
        mask = np.zeros((5, 5))
        mask[2, 2] = 1
        assert distance_transform_l1(mask)[2, 2] == 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            h, w = rng.integers(1, 17, size=2)
            mask = (rng.random((h, w)) < rng.uniform(0.2, 0.9)).astype(np.uint8)
            np.testing.assert_array_equal(distance_transform_l1(mask), brute_force_l1(mask))

    def test_all_foreground_uses_border(self):
        out = distance_transform_l1(np.ones((5, 5)))
        assert out[2, 2] == 3 and out[0, 0] == 1


class TestCenterPoint:
    def test_filled_square_center(self):
        p = center_point(np.ones((5, 5)))
        assert (int(p.y), int(p.x)) == (2, 2)
        assert p == Point(2.5, 2.5)

    def test_single_pixel(self):
        mask = np.zeros((6, 6))
        mask[4, 1] = 1
        assert center_point(mask) == Point(1.5, 4.5)

    def test_concave_mask_stays_inside(self):
        # C shape: bbox centroid lands in the hollow, the center point must not
        mask = np.zeros((9, 9), dtype=np.uint8)
        mask[1:8, 1:3] = 1
        mask[1:3, 1:8] = 1
        mask[6:8, 1:8] = 1
        p = center_point(mask)
        r, c = int(p.y), int(p.x)
        assert mask[r, c] == 1
        centroid_r, centroid_c = 4, 4  # bbox centre is hollow
        assert mask[centroid_r, centroid_c] == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            center_point(np.zeros((3, 3)))


class TestGtBox:
    def test_single_pixel_corner_form(self):
        mask = np.zeros((6, 6))
        mask[2, 3] = 1
        assert gt_box(mask) == Box(3.0, 2.0, 4.0, 3.0)

    def test_matches_tight_bbox(self):
        from sonoseg.rle import tight_bbox

        rng = np.random.default_rng(1)
        for _ in range(20):
            mask = (rng.random((10, 14)) < 0.2).astype(np.uint8)
            if not mask.any():
                continue
            x, y, w, h = tight_bbox(mask)
            assert gt_box(mask) == Box(x, y, x + w, y + h)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            gt_box(np.zeros((2, 2)))


class TestNoiseBox:
    def test_displacement_bounded_by_five_percent(self):
        rng = np.random.default_rng(0)
        box = Box(0.0, 0.0, 100.0, 100.0)
        max_seen = 0.0
        for _ in range(10_000):
            out = noise_box(box, 1000, 1000, rng, max_frac=0.05)
            for d in (out.x1 - box.x1, out.x2 - box.x2, out.y1 - box.y1, out.y2 - box.y2):
                assert abs(d) <= 5.0 + 1e-9
                max_seen = max(max_seen, abs(d))
        assert max_seen > 4.5  # the support is actually reached

    def test_zero_frac_is_identity(self):
        rng = np.random.default_rng(1)
        box = Box(3.0, 4.0, 20.0, 30.0)
        assert noise_box(box, 64, 64, rng, max_frac=0.0) == box

    def test_degenerate_box_unchanged(self):
        rng = np.random.default_rng(2)
        box = Box(5.0, 5.0, 5.0, 9.0)
        assert noise_box(box, 64, 64, rng) == box

    def test_output_always_valid_near_borders(self):
        rng = np.random.default_rng(3)
        box = Box(0.0, 0.0, 10.0, 8.0)
        for _ in range(2000):
            out = noise_box(box, 10, 8, rng, max_frac=0.05)
            assert 0 <= out.x1 < out.x2 <= 10
            assert 0 <= out.y1 < out.y2 <= 8


class TestSampleTrainingPrompt:
    def make_mask(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[8:20, 10:25] = 1
        return mask

    def test_equal_probability_over_10k_draws(self):
        rng = np.random.default_rng(5)
        mask = self.make_mask()
        kinds = [type(sample_training_prompt(mask, 32, 32, rng)) for _ in range(10_000)]
        frac_points = kinds.count(Point) / len(kinds)
        assert 0.48 <= frac_points <= 0.52

    def test_points_always_on_foreground(self):
        rng = np.random.default_rng(6)
        mask = self.make_mask()
        for _ in range(2000):
            p = sample_training_prompt(mask, 32, 32, rng)
            if isinstance(p, Point):
                assert mask[int(p.y), int(p.x)] == 1

    def test_single_pixel_mask_gives_its_center(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[5, 2] = 1
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = sample_training_prompt(mask, 8, 8, rng)
            if isinstance(p, Point):
                assert p == Point(2.5, 5.5)

    def test_deterministic_given_seed(self):
        mask = self.make_mask()
        a = [sample_training_prompt(mask, 32, 32, np.random.default_rng(11)) for _ in range(1)]
        b = [sample_training_prompt(mask, 32, 32, np.random.default_rng(11)) for _ in range(1)]
        assert a == b

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            sample_training_prompt(np.zeros((4, 4)), 4, 4, np.random.default_rng(0))
