import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bevkd.core_types import (BevBox, BevGrid, ClassDistribution, DistillConfig,
                              FeatureMap, PredictionSet, cell_to_world,
                              normalize_yaw, world_to_cell)


@pytest.fixture
def unit_grid():
    return BevGrid(10, 10, 0.0, 10.0, 0.0, 10.0)


class TestWorldToCell:
    def test_cell_center_convention(self, unit_grid):
        assert world_to_cell(unit_grid, 0.5, 0.5) == (0.0, 0.0)

    def test_far_corner(self, unit_grid):
        assert world_to_cell(unit_grid, 9.5, 9.5) == (9.0, 9.0)

    def test_row_is_y_col_is_x(self, unit_grid):
        assert world_to_cell(unit_grid, 5.5, 0.5) == (0.0, 5.0)

    def test_round_trip_1000_points(self, unit_grid):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            x = rng.uniform(0.0, 10.0)
            y = rng.uniform(0.0, 10.0)
            r, c = world_to_cell(unit_grid, x, y)
            x2, y2 = cell_to_world(unit_grid, r, c)
            assert abs(x2 - x) <= 1e-9 and abs(y2 - y) <= 1e-9

    def test_inverse_on_cell_coordinates(self, unit_grid):
        rng = np.random.default_rng(7)
        for _ in range(200):
            r = rng.uniform(-3, 12)
            c = rng.uniform(-3, 12)
            r2, c2 = world_to_cell(unit_grid, *cell_to_world(unit_grid, r, c))
            assert abs(r2 - r) <= 1e-9 and abs(c2 - c) <= 1e-9

    def test_degenerate_grid_rejected(self):
        with pytest.raises(ValueError):
            BevGrid(4, 4, 1.0, 1.0, 0.0, 2.0)
        with pytest.raises(ValueError):
            BevGrid(0, 4, 0.0, 1.0, 0.0, 2.0)


class TestNormalizeYaw:
    def test_zero(self):
        assert normalize_yaw(0.0) == 0.0

    def test_pi_maps_to_minus_pi(self):
        assert normalize_yaw(math.pi) == -math.pi

    def test_three_pi(self):
        assert normalize_yaw(3.0 * math.pi) == pytest.approx(-math.pi, abs=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            normalize_yaw(float("nan"))
        with pytest.raises(ValueError):
            normalize_yaw(float("inf"))

    @given(st.floats(min_value=-50.0, max_value=50.0))
    def test_range_and_congruence(self, theta):
        result = normalize_yaw(theta)
        assert -math.pi <= result < math.pi
        k = (theta - result) / (2.0 * math.pi)
        assert abs(k - round(k)) < 1e-9


class TestClassDistribution:
    def test_valid(self):
        dist = ClassDistribution([0.25, 0.25, 0.5])
        assert dist.argmax() == 2

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            ClassDistribution([0.5, 0.6])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ClassDistribution([1.5, -0.5])

    @given(st.lists(st.floats(min_value=0.001, max_value=1.0), min_size=2, max_size=6))
    def test_normalized_vectors_accepted(self, raw):
        arr = np.array(raw)
        ClassDistribution(arr / arr.sum())


class TestBevBox:
    def test_yaw_normalized_on_build(self):
        box = BevBox(0, 0, 0, 1, 1, 1, yaw=3.0 * math.pi)
        assert box.yaw == pytest.approx(-math.pi)

    def test_rejects_nonpositive_sizes(self):
        with pytest.raises(ValueError):
            BevBox(0, 0, 0, 0.0, 1, 1, 0.0)

    def test_footprint_corners_axis_aligned(self):
        box = BevBox(1.0, 2.0, 0.0, w=2.0, l=4.0, h=1.0, yaw=0.0)
        corners = box.footprint_corners()
        assert corners.shape == (4, 2)
        assert np.allclose(sorted(corners[:, 0]), [-1.0, -1.0, 3.0, 3.0])
        assert np.allclose(sorted(corners[:, 1]), [1.0, 1.0, 3.0, 3.0])


class TestPredictionSet:
    def test_length_mismatch_rejected(self):
        box = BevBox(0, 0, 0, 1, 1, 1, 0)
        dist = ClassDistribution([1.0, 0.0])
        with pytest.raises(ValueError):
            PredictionSet([box], [dist, dist], [[0.0]], [(0.0, 0.0)])

    def test_embedding_dims_must_agree(self):
        box = BevBox(0, 0, 0, 1, 1, 1, 0)
        dist = ClassDistribution([1.0, 0.0])
        with pytest.raises(ValueError):
            PredictionSet([box, box], [dist, dist], [[0.0], [0.0, 1.0]],
                          [(0.0, 0.0), (1.0, 1.0)])


class TestFeatureMap:
    def test_shape_checked(self, unit_grid):
        with pytest.raises(ValueError):
            FeatureMap(unit_grid, np.zeros((3, 10, 2)))

    def test_nonfinite_rejected(self, unit_grid):
        bad = np.zeros((10, 10, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            FeatureMap(unit_grid, bad)


class TestDistillConfig:
    def test_defaults(self):
        cfg = DistillConfig()
        assert (cfg.sigma, cfg.gamma, cfg.alpha, cfg.beta) == (2.0, 0.5, 1.0, 0.25)
        assert (cfg.tau, cfg.lambda_feat) == (0.07, 1.0)
        assert cfg.include_positive_in_denominator and cfg.use_contrastive_cls

    @pytest.mark.parametrize("bad", [
        {"sigma": 0.0}, {"gamma": 1.5}, {"gamma": -0.1}, {"alpha": -1.0},
        {"beta": -0.5}, {"tau": 0.0}, {"lambda_feat": -0.1},
    ])
    def test_range_validation(self, bad):
        with pytest.raises(ValueError):
            DistillConfig(**bad)
