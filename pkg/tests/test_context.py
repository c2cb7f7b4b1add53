"""
Tests for context regions and feature vectors
"""

import math

import numpy as np
import pytest
from scipy import stats

from app.core.errors import DegenerateGravityWarning, InvalidBoundsError
from app.models.configs import RegionConfig
from app.services.bits import pack_bits
from app.services.context import (
    FeatureLayout,
    build_feature_vector,
    describe_region,
    frame_features,
    generate_regions,
    gravity_angle,
    instantiate_region,
    load_region_bank,
    sample_region_area,
    save_region_bank,
)
from app.services.map_model import CameraIntrinsics, Frame, Keypoint, Pose
from app.services.vocabulary import train_vocabulary

CAM = CameraIntrinsics(400.0, 400.0, 2000.0, 2000.0, 4000, 4000)


def _vocab():
    rng = np.random.default_rng(4)
    return train_vocabulary(rng.integers(0, 2, (200, 32), dtype=np.uint8), 6, seed=0)


def _frame(pixels, scales, descriptors, gravity=(0.0, 1.0, 0.0)) -> Frame:
    kps = tuple(
        Keypoint(float(u), float(v), float(s), pack_bits(d))
        for (u, v), s, d in zip(pixels, scales, descriptors)
    )
    return Frame(0, 0, Pose.identity(), tuple(gravity), kps)


def _scene(n=80, seed=5):
    rng = np.random.default_rng(seed)
    pixels = CAM.cx + rng.uniform(-300, 300, (n, 2))
    scales = rng.uniform(4.0, 12.0, n)
    descriptors = rng.integers(0, 2, (n, 32), dtype=np.uint8)
    return pixels, scales, descriptors


class TestRegionGeneration:
    """Random region bank"""

    def test_area_inverse_cdf(self):
        assert sample_region_area(math.log(1e-4)) == pytest.approx(1e-4)
        assert sample_region_area(math.log(0.01)) == pytest.approx(0.01)

    def test_areas_within_bounds(self):
        cfg = RegionConfig(seed=2)
        bank = generate_regions(500, cfg)
        areas = 4.0 * bank.regions[:, 2] * bank.regions[:, 3]
        assert len(bank) == 500
        assert np.all(areas >= cfg.area_min * (1 - 1e-9))
        assert np.all(areas <= cfg.area_max * (1 + 1e-9))
        offsets = np.hypot(bank.regions[:, 0], bank.regions[:, 1])
        assert np.all(offsets <= cfg.offset_radius + 1e-12)

    def test_area_follows_inverse_law(self):
        """Log-area is uniform when the density is proportional to 1/area."""
        cfg = RegionConfig(seed=11)
        bank = generate_regions(1_000_000, cfg)
        log_area = np.log(4.0 * bank.regions[:, 2] * bank.regions[:, 3])
        lo, hi = math.log(cfg.area_min), math.log(cfg.area_max)
        result = stats.kstest(log_area, "uniform", args=(lo, hi - lo))
        assert result.statistic < 0.005

    def test_seed_reproducible(self):
        a = generate_regions(50, RegionConfig(seed=3))
        b = generate_regions(50, RegionConfig(seed=0), seed=3)
        assert a == b

    @pytest.mark.parametrize("overrides", [
        {"area_min": 0.5, "area_max": 0.1},
        {"area_min": 0.0},
        {"area_max": float("nan")},
        {"aspect_min": 2.0, "aspect_max": 1.0},
        {"offset_radius": -1.0},
    ])
    def test_invalid_bounds(self, overrides):
        with pytest.raises(InvalidBoundsError):
            generate_regions(10, RegionConfig(**overrides))

    def test_zero_count(self):
        with pytest.raises(InvalidBoundsError):
            generate_regions(0, RegionConfig())

    def test_save_load(self, tmp_path):
        bank = generate_regions(25, RegionConfig(seed=9))
        path = tmp_path / "regions.txt"
        save_region_bank(bank, path)
        assert load_region_bank(path) == bank


class TestGravity:
    """Projected gravity angle"""

    def test_upright(self):
        assert gravity_angle((0.0, 1.0, 0.0)) == pytest.approx(0.0)

    def test_rolled(self):
        assert gravity_angle((1.0, 0.0, 0.0)) == pytest.approx(-math.pi / 2)

    def test_degenerate_warns(self):
        with pytest.warns(DegenerateGravityWarning):
            assert gravity_angle((0.0, 0.0, 1.0)) == 0.0


class TestFeatures:
    """Region histograms and the feature vector"""

    def test_layout(self):
        layout = FeatureLayout(n_regions=3, k=4, descriptor_bits=32)
        assert layout.dims == 12 + 32
        assert layout.kind_of(11) == "context"
        assert layout.kind_of(12) == "descriptor"
        assert FeatureLayout(3, 4, 32, "context").dims == 12
        assert FeatureLayout(3, 4, 32, "descriptor").dims == 32

    def test_blocks_are_normalized(self):
        vocab = _vocab()
        bank = generate_regions(30, RegionConfig(seed=1))
        pixels, scales, descriptors = _scene()
        frame = _frame(pixels, scales, descriptors)
        V = frame_features(frame, CAM, bank, vocab, 8.0, 32)
        assert V.shape == (80, 30 * vocab.k + 32)
        blocks = V[:, :30 * vocab.k].reshape(80, 30, vocab.k)
        sums = blocks.sum(axis=2)
        assert np.all((np.abs(sums - 1.0) < 1e-5) | (sums == 0.0))
        assert np.array_equal(V[:, 30 * vocab.k:], descriptors)

    def test_matches_single_region_histogram(self):
        vocab = _vocab()
        bank = generate_regions(5, RegionConfig(seed=6))
        pixels, scales, descriptors = _scene()
        frame = _frame(pixels, scales, descriptors)
        v = build_feature_vector(7, frame, bank, vocab, CAM, ref_scale=8.0)
        for j in range(len(bank)):
            rect = instantiate_region(bank.region(j), frame.keypoints[7], CAM, frame.gravity, 8.0)
            hist = describe_region(rect, frame, vocab, 7, CAM)
            assert np.allclose(v[j * vocab.k:(j + 1) * vocab.k], hist, atol=1e-6)

    def test_anchor_excluded(self):
        vocab = _vocab()
        bank = generate_regions(4, RegionConfig(area_min=0.5, area_max=1.0, offset_radius=0.0, seed=0))
        frame = _frame([(CAM.cx, CAM.cy)], [8.0], np.ones((1, 32), dtype=np.uint8))
        v = build_feature_vector(0, frame, bank, vocab, CAM, ref_scale=8.0)
        assert not v[:4 * vocab.k].any()

    def test_scale_invariance(self):
        vocab = _vocab()
        bank = generate_regions(40, RegionConfig(seed=2))
        pixels, scales, descriptors = _scene()
        centre = np.array([CAM.cx, CAM.cy])
        base = frame_features(_frame(pixels, scales, descriptors), CAM, bank, vocab, 8.0, 32)
        zoomed = frame_features(
            _frame(centre + 2.0 * (pixels - centre), 2.0 * scales, descriptors), CAM, bank, vocab, 8.0, 32
        )
        assert np.allclose(base, zoomed, atol=1e-6)

    def test_translation_invariance(self):
        vocab = _vocab()
        bank = generate_regions(40, RegionConfig(seed=2))
        pixels, scales, descriptors = _scene()
        base = frame_features(_frame(pixels, scales, descriptors), CAM, bank, vocab, 8.0, 32)
        moved = frame_features(_frame(pixels + (137.0, -58.0), scales, descriptors), CAM, bank, vocab, 8.0, 32)
        assert np.allclose(base, moved, atol=1e-6)

    def test_rotation_invariance_with_gravity(self):
        vocab = _vocab()
        bank = generate_regions(40, RegionConfig(seed=2))
        pixels, scales, descriptors = _scene()
        alpha = 0.7
        rot = np.array([[math.cos(alpha), -math.sin(alpha)], [math.sin(alpha), math.cos(alpha)]])
        centre = np.array([CAM.cx, CAM.cy])
        rotated = centre + (pixels - centre) @ rot.T
        gravity = (*(rot @ np.array([0.0, 1.0])), 0.0)
        base = frame_features(_frame(pixels, scales, descriptors), CAM, bank, vocab, 8.0, 32)
        turned = frame_features(_frame(rotated, scales, descriptors, gravity), CAM, bank, vocab, 8.0, 32)
        assert np.allclose(base, turned, atol=1e-6)
