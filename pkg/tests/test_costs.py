import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simcache.costs import (
    CacheState,
    CostModel,
    ExpectedCostTracker,
    approx_cost,
    best_approximator,
    delta_cost,
    excursion_cost,
    expected_cost,
    expected_cost_mc,
    movement_cost,
    service_cost,
)
from simcache.spaces import ContinuousSpace, FiniteSpace, TorusGrid
from conftest import toy_matrix
from oracles import oracle_expected_cost, oracle_grid_hop

INF = float("inf")


def random_instance(rng, n, inf_frac=0.2):
    m = rng.uniform(0.01, 4.0, size=(n, n))
    mask = rng.random((n, n)) < inf_frac
    m[mask] = INF
    m = np.minimum(m, m.T)  # keep it symmetric; not required, just convenient
    np.fill_diagonal(m, 0.0)
    rates = rng.dirichlet(np.ones(n))
    return FiniteSpace(m), rates


class TestCostModel:
    def test_chi_base_model(self):
        cm = CostModel(retrieval_cost=2.5)
        assert cm.chi == 2.5
        assert cm.effective_retrieval == 2.5

    def test_chi_extended_model(self):
        cm = CostModel(user_cost=1.0, network_cost=0.5)
        assert cm.effective_retrieval == 1.5
        assert cm.chi == 1.5
        forced = CostModel(user_cost=1.0, network_cost=0.5, require_store=True)
        assert forced.chi == INF
        assert forced.effective_retrieval == 1.5

    def test_split_costs_must_come_together(self):
        with pytest.raises(ValueError):
            CostModel(user_cost=1.0)


class TestCacheState:
    def test_distinct_contents(self):
        with pytest.raises(ValueError):
            CacheState((1, 1, 2))

    def test_order_permutation(self):
        with pytest.raises(ValueError):
            CacheState((1, 2), order=(1, 3))
        CacheState((1, 2), order=(2, 1))


class TestApproxCost:
    def test_toy_values(self, toy_space):
        assert approx_cost(toy_space, 0, 1) == 1 / 16
        assert approx_cost(toy_space, 0, 2) == INF

    def test_identity(self, toy_space):
        for x in range(4):
            assert approx_cost(toy_space, x, x) == 0.0

    def test_grid_wraparound(self):
        grid = TorusGrid(13, gamma=1.0)
        assert approx_cost(grid, (0, 0), (12, 0)) == 1.0


class TestServiceCost:
    def test_all_infinite_pays_retrieval(self, toy_space, toy_cm):
        assert service_cost(toy_space, toy_cm, 3, {0, 2}) == 1.0

    def test_member_is_free(self, toy_space, toy_cm):
        assert service_cost(toy_space, toy_cm, 2, {0, 2}) == 0.0

    def test_approximate_hit(self, toy_space, toy_cm):
        assert service_cost(toy_space, toy_cm, 0, {1, 3}) == 1 / 16

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_bounds_and_zero_iff_free_approximator(self, seed):
        rng = np.random.default_rng(seed)
        space, _ = random_instance(rng, 8)
        cm = CostModel(retrieval_cost=float(rng.uniform(0.5, 3.0)))
        state = rng.choice(8, size=3, replace=False).tolist()
        for x in range(8):
            sc = service_cost(space, cm, x, state)
            assert 0.0 <= sc <= cm.chi
            has_free = any(space.cost(x, y) == 0.0 for y in state)
            assert (sc == 0.0) == has_free


class TestMovementCost:
    def test_cases(self, toy_cm):
        assert movement_cost({0, 2}, {0, 2}, toy_cm) == 0.0
        assert movement_cost({0, 2}, {0, 1}, toy_cm) == 1.0
        assert movement_cost({0, 2}, {1, 3}, toy_cm) == INF

    def test_extended_retrieval(self):
        cm = CostModel(user_cost=2.0, network_cost=3.0)
        assert movement_cost({0}, {1}, cm) == 5.0


class TestExcursionCost:
    def test_toy_values(self, toy_space, toy_cm):
        assert excursion_cost(toy_space, toy_cm, 0, 1) == 1 / 16
        assert excursion_cost(toy_space, toy_cm, 0, 3) == 1.0
        assert excursion_cost(toy_space, toy_cm, 2, 2) == 0.0


class TestBestApproximator:
    def test_toy_tie_break(self, toy_space):
        # object 2 (paper's 3) is served by 1 at 1/16 from {1, 3}
        assert best_approximator(toy_space, 2, {1, 3}) == (1, 1 / 16)

    def test_member_wins(self, toy_space):
        assert best_approximator(toy_space, 3, {0, 3}) == (3, 0.0)

    def test_smallest_id_on_tie(self):
        m = np.zeros((3, 3))
        m[0, 1] = m[0, 2] = 2.0
        m[1, 0] = m[2, 0] = 2.0
        m[1, 2] = m[2, 1] = 5.0
        space = FiniteSpace(m)
        assert best_approximator(space, 0, {2, 1}) == (1, 2.0)

    def test_grid_tessellation_within_two_hops(self):
        # centers generated by repeated (2, 3) knight-like steps tile L=13
        grid = TorusGrid(13, gamma=1.0)
        centers = sorted({((2 * t) % 13) * 13 + ((3 * t) % 13) for t in range(13)})
        assert len(centers) == 13
        for z in range(grid.n):
            y, c = best_approximator(grid, z, centers)
            # independent scan
            brute = min(
                oracle_grid_hop(13, grid.coords(z), grid.coords(ctr)) for ctr in centers
            )
            assert c == brute
            assert c <= 2.0

    def test_brute_force_agreement_random(self):
        rng = np.random.default_rng(7)
        space, _ = random_instance(rng, 40)
        for _ in range(200):
            state = rng.choice(40, size=5, replace=False).tolist()
            x = int(rng.integers(40))
            y, c = best_approximator(space, x, state)
            pairs = sorted((space.cost(x, s), s) for s in state)
            assert c == pairs[0][0]
            assert y == min(s for cc, s in pairs if cc == c)


class TestExpectedCost:
    def test_toy_exact_values(self, toy_space, toy_cm, toy_rates):
        # frozen from the loop oracle; these are the instance's two optima
        oracle_best = oracle_expected_cost(toy_matrix(), toy_rates, 1.0, {1, 3})
        oracle_stuck = oracle_expected_cost(toy_matrix(), toy_rates, 1.0, {0, 2})
        assert oracle_best == 6 / 128
        assert oracle_stuck == 17 / 128
        got_best = expected_cost(toy_space, toy_cm, toy_rates, {1, 3})
        got_stuck = expected_cost(toy_space, toy_cm, toy_rates, {0, 2})
        assert got_best == pytest.approx(6 / 128, rel=1e-12)
        assert got_stuck == pytest.approx(17 / 128, rel=1e-12)

    def test_full_catalog_is_free(self, toy_space, toy_cm, toy_rates):
        assert expected_cost(toy_space, toy_cm, toy_rates, {0, 1, 2, 3}) == 0.0

    def test_empty_state_rejected(self, toy_space, toy_cm, toy_rates):
        with pytest.raises(ValueError):
            expected_cost(toy_space, toy_cm, toy_rates, set())

    def test_monotone_under_inclusion(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            space, rates = random_instance(rng, 12)
            cm = CostModel(retrieval_cost=1.0)
            small = rng.choice(12, size=3, replace=False).tolist()
            extra = [z for z in range(12) if z not in small]
            big = small + rng.choice(extra, size=2, replace=False).tolist()
            assert expected_cost(space, cm, rates, big) <= expected_cost(
                space, cm, rates, small
            ) + 1e-15

    def test_zero_rate_infinite_cost_pair_ignored(self):
        m = np.array([[0.0, INF], [INF, 0.0]])
        space = FiniteSpace(m)
        cm = CostModel(retrieval_cost=1.0, require_store=True)  # chi = inf
        rates = np.array([0.0, 1.0])
        assert expected_cost(space, cm, rates, {1}) == 0.0

    def test_matches_loop_oracle_random(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            space, rates = random_instance(rng, 15)
            cm = CostModel(retrieval_cost=float(rng.uniform(0.5, 2.0)))
            state = rng.choice(15, size=4, replace=False).tolist()
            want = oracle_expected_cost(space.matrix.tolist(), rates, cm.chi, state)
            got = expected_cost(space, cm, rates, state)
            assert got == pytest.approx(want, rel=1e-12)


class TestExpectedCostMc:
    def test_uniform_square_single_center(self):
        # k=1 at the center of the unit square, norm-1 cost, gamma=1:
        # E||z - c||_1 = 2 * E|u - 1/2| = 1/2
        space = ContinuousSpace(2, norm=1, gamma=1.0)
        cm = CostModel(retrieval_cost=10.0)

        def sampler(rng, m):
            return rng.random((m, 2))

        est, se = expected_cost_mc(
            space, cm, sampler, [np.array([0.5, 0.5])], samples=20000, rng=5
        )
        assert abs(est - 0.5) < 4 * se
        assert se < 0.01


class TestDeltaCost:
    def test_matches_full_difference_on_toy(self, toy_space, toy_cm, toy_rates):
        got = delta_cost(toy_space, toy_cm, toy_rates, {0, 2}, insert=1, evict=0)
        want = expected_cost(toy_space, toy_cm, toy_rates, {1, 2}) - expected_cost(
            toy_space, toy_cm, toy_rates, {0, 2}
        )
        assert got == pytest.approx(want, rel=1e-12)

    def test_useless_insert_is_zero(self):
        # inserting an unreachable object while evicting a never-best one
        m = np.full((4, 4), INF)
        np.fill_diagonal(m, 0.0)
        m[1, 0] = 0.5  # 0 serves 1 cheaply
        space = FiniteSpace(m)
        cm = CostModel(retrieval_cost=1.0)
        rates = np.array([0.4, 0.4, 0.2, 0.0])
        # 3 is infinitely far from everything; 2 approximates nobody
        got = delta_cost(space, cm, rates, {0, 2}, insert=3, evict=2)
        assert got == pytest.approx(
            expected_cost(space, cm, rates, {0, 3})
            - expected_cost(space, cm, rates, {0, 2}),
            abs=1e-15,
        )

    def test_precondition_violations(self, toy_space, toy_cm, toy_rates):
        with pytest.raises(ValueError):
            delta_cost(toy_space, toy_cm, toy_rates, {0, 2}, insert=0, evict=2)
        with pytest.raises(ValueError):
            delta_cost(toy_space, toy_cm, toy_rates, {0, 2}, insert=1, evict=3)

    def test_incremental_equals_full_1000_triples(self):
        rng = np.random.default_rng(17)
        checked = 0
        while checked < 1000:
            space, rates = random_instance(rng, 14)
            cm = CostModel(retrieval_cost=float(rng.uniform(0.5, 2.0)))
            for _ in range(25):
                state = rng.choice(14, size=4, replace=False).tolist()
                outside = [z for z in range(14) if z not in state]
                x = int(rng.choice(outside))
                y = int(rng.choice(state))
                inc = delta_cost(space, cm, rates, state, insert=x, evict=y)
                new_state = [z for z in state if z != y] + [x]
                full = expected_cost(space, cm, rates, new_state) - expected_cost(
                    space, cm, rates, state
                )
                if full == 0.0:
                    assert abs(inc) < 1e-12
                else:
                    assert inc == pytest.approx(full, rel=1e-12)
                checked += 1

    def test_tessellation_swaps_never_improve(self):
        grid = TorusGrid(13, gamma=1.0)
        cm = CostModel(retrieval_cost=1000.0)
        rates = np.full(grid.n, 1.0 / grid.n)
        centers = sorted({((2 * t) % 13) * 13 + ((3 * t) % 13) for t in range(13)})
        tracker = ExpectedCostTracker(grid, cm, rates, centers)
        for x in range(grid.n):
            if x in centers:
                continue
            deltas = tracker.delta_all(x)
            assert deltas.min() >= -1e-12


class TestExpectedCostTracker:
    def test_swap_sequence_matches_fresh_build(self):
        rng = np.random.default_rng(23)
        for trial in range(20):
            space, rates = random_instance(rng, 20, inf_frac=0.3)
            cm = CostModel(retrieval_cost=float(rng.uniform(0.5, 2.0)))
            state = rng.choice(20, size=5, replace=False).tolist()
            tracker = ExpectedCostTracker(space, cm, rates, state)
            for _ in range(15):
                outside = [z for z in range(20) if z not in tracker.contents()]
                x = int(rng.choice(outside))
                y = int(rng.choice(tracker.contents()))
                tracker.apply_swap(x, y)
                fresh = ExpectedCostTracker(space, cm, rates, tracker.contents())
                np.testing.assert_allclose(tracker.best1, fresh.best1, rtol=1e-12)
                np.testing.assert_allclose(tracker.best2, fresh.best2, rtol=1e-12)
                assert tracker.expected_cost() == pytest.approx(
                    fresh.expected_cost(), rel=1e-12
                )

    def test_delta_all_matches_individual_deltas(self, toy_space, toy_cm, toy_rates):
        tracker = ExpectedCostTracker(toy_space, toy_cm, toy_rates, [0, 2])
        deltas = tracker.delta_all(1)
        for slot, y in enumerate(tracker.contents()):
            assert deltas[slot] == pytest.approx(
                delta_cost(toy_space, toy_cm, toy_rates, [0, 2], insert=1, evict=y),
                abs=1e-15,
            )

    def test_delta_all_on_grid_matches_full_eval(self):
        grid = TorusGrid(9, gamma=1.0)
        cm = CostModel(retrieval_cost=20.0)
        rng = np.random.default_rng(31)
        rates = rng.dirichlet(np.ones(grid.n))
        state = rng.choice(grid.n, size=6, replace=False).tolist()
        tracker = ExpectedCostTracker(grid, cm, rates, state)
        x = int(rng.choice([z for z in range(grid.n) if z not in state]))
        deltas = tracker.delta_all(x)
        base = expected_cost(grid, cm, rates, state)
        for slot, y in enumerate(state):
            new_state = [z for z in state if z != y] + [x]
            want = expected_cost(grid, cm, rates, new_state) - base
            assert deltas[slot] == pytest.approx(want, rel=1e-10, abs=1e-14)

    def test_windowed_grid_path_matches_full_path(self):
        # the local-window swap pricing must agree with the full catalog
        # pass wherever both apply
        grid = TorusGrid(41, gamma=1.0)
        cm = CostModel(retrieval_cost=1000.0)
        rng = np.random.default_rng(3)
        rates = rng.dirichlet(np.ones(grid.n))
        state = rng.choice(grid.n, size=41, replace=False)
        full = ExpectedCostTracker(grid, cm, rates, state)
        local = ExpectedCostTracker(grid, cm, rates, state)
        local._local = True
        local._refresh_local_summary()
        for trial in range(30):
            x = int(rng.integers(grid.n))
            if x in full:
                continue
            np.testing.assert_allclose(
                local.delta_all(x), full.delta_all(x), rtol=1e-9, atol=1e-13
            )
            y = int(rng.choice(full.cache))
            assert local.delta(x, y) == pytest.approx(full.delta(x, y), rel=1e-9, abs=1e-13)
            if trial % 7 == 0:
                full.apply_swap(x, y)
                local.apply_swap(x, y)

    def test_member_delta_is_nonnegative_and_own_slot_zero(self, toy_space, toy_cm, toy_rates):
        tracker = ExpectedCostTracker(toy_space, toy_cm, toy_rates, [1, 3])
        deltas = tracker.delta_all(1)  # 1 already cached
        assert deltas[tracker._pos[1]] == 0.0
        assert (deltas >= -1e-15).all()
