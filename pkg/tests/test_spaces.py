import math

import numpy as np
import pytest

from simcache.spaces import ContinuousSpace, FiniteSpace, PointCatalog, TorusGrid
from oracles import oracle_grid_hop

INF = float("inf")


class TestFiniteSpace:
    def test_diagonal_must_be_zero(self):
        with pytest.raises(ValueError):
            FiniteSpace([[0.0, 1.0], [1.0, 0.5]])

    def test_negative_cost_rejected(self):
        with pytest.raises(ValueError):
            FiniteSpace([[0.0, -1.0], [1.0, 0.0]])

    def test_infinite_entries_are_legal(self, toy_space):
        assert toy_space.cost(0, 2) == INF
        assert toy_space.cost(0, 1) == 1 / 16

    def test_invalid_id(self, toy_space):
        with pytest.raises(ValueError):
            toy_space.cost(0, 7)

    def test_csv_roundtrip(self, tmp_path, toy_space):
        path = tmp_path / "m.csv"
        rows = []
        for row in toy_space.matrix:
            rows.append(",".join("inf" if math.isinf(v) else repr(float(v)) for v in row))
        path.write_text("\n".join(rows) + "\n")
        loaded = FiniteSpace.from_csv(path)
        assert np.array_equal(loaded.matrix, toy_space.matrix)


class TestTorusGrid:
    def test_wraparound_distance(self):
        grid = TorusGrid(13, gamma=1.0)
        assert grid.cost((0, 0), (12, 0)) == 1.0
        assert grid.cost((0, 0), (6, 6)) == 12.0
        assert grid.cost((0, 0), (7, 7)) == 12.0  # wraps both axes

    def test_identity_and_symmetry(self):
        grid = TorusGrid(7, gamma=2.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.integers(0, grid.n, size=2)
            assert grid.cost(a, a) == 0.0
            assert grid.cost(a, b) == grid.cost(b, a)

    def test_costs_from_matches_scalar(self):
        grid = TorusGrid(9, gamma=1.5)
        x = grid.object_id((4, 7))
        row = grid.costs_from(x)
        for z in [0, 5, 17, 40, 80]:
            assert row[z] == pytest.approx(grid.cost(z, x), rel=1e-12)

    def test_costs_to_matches_oracle(self):
        grid = TorusGrid(11)
        rng = np.random.default_rng(1)
        ids = rng.choice(grid.n, size=20, replace=False)
        x = 17
        got = grid.costs_to(x, ids)
        for c, y in zip(got, ids):
            assert c == oracle_grid_hop(11, grid.coords(x), grid.coords(int(y)))

    def test_distance_bounded_by_side(self):
        grid = TorusGrid(8)
        worst = max(grid.cost(0, z) for z in range(grid.n))
        assert worst <= grid.side

    def test_gamma_zero_keeps_identity_cost_zero(self):
        grid = TorusGrid(5, gamma=0.0)
        assert grid.cost(3, 3) == 0.0
        assert grid.cost(3, 4) == 1.0


class TestContinuousSpace:
    def test_norms(self):
        s1 = ContinuousSpace(2, norm=1)
        s2 = ContinuousSpace(2, norm=2)
        assert s1.cost((0, 0), (1, 1)) == pytest.approx(2.0)
        assert s2.cost((0, 0), (3, 4)) == pytest.approx(5.0)

    def test_gamma_power(self):
        s = ContinuousSpace(1, norm=2, gamma=2.0)
        assert s.cost([2.0], [5.0]) == pytest.approx(9.0)

    def test_costs_to_batch(self):
        s = ContinuousSpace(3, norm=2)
        pts = np.array([[0, 0, 0], [1, 1, 1], [2, 0, 0]], dtype=float)
        got = s.costs_to([1, 0, 0], pts)
        assert got == pytest.approx([1.0, math.sqrt(2), 1.0])


class TestPointCatalog:
    def test_acts_as_discrete_space(self):
        pts = np.array([[0.0, 0.0], [3.0, 4.0], [6.0, 8.0]])
        cat = PointCatalog(pts, norm=2, gamma=1.0)
        assert cat.n == 3
        assert cat.cost(0, 1) == pytest.approx(5.0)
        assert cat.costs_from(0) == pytest.approx([0.0, 5.0, 10.0])
        assert cat.costs_to(2, [0, 1]) == pytest.approx([10.0, 5.0])
