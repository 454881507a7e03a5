import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recloop.choice import (
    GPOP, IPOP, UNKNOWN, CandidateSet, PopulationStats, build_candidate_set,
    choice_distribution, estimate_tau, estimate_taus, inverse_cdf, quotas,
    sample_autonomous, utility,
)
from recloop.dataset import from_events, generate_synthetic
from recloop.metrics import gini


def ols_slope(x, y):
    return np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0]


class TestUtility:
    def test_all_terms_vanish(self):
        assert np.all(utility(0.0, 0.0, [0, 5, 100], 0.0) == 0.0)

    def test_hand_value(self):
        assert utility(2.0, 0.5, 9, 1.0) == pytest.approx(2 + 0.5 * math.log(10) + 0.1, abs=1e-12)
        assert round(float(utility(2.0, 0.5, 9, 1.0)), 4) == 3.2513

    def test_noise_added(self):
        assert utility(1.0, 0.0, 0, 0.0, noise=0.25) == 1.25

    @given(st.floats(0, 1), st.lists(st.integers(0, 10_000), min_size=2, max_size=20))
    def test_monotone_in_strength(self, g, s):
        s = sorted(s)
        v = utility(0.7, g, s, 0.0)
        assert np.all(np.diff(v) >= 0)


class TestChoiceDistribution:
    def test_two_items(self):
        p = choice_distribution([1.0, 0.0], 1.0)
        assert p == pytest.approx([math.e / (1 + math.e), 1 / (1 + math.e)], abs=1e-15)
        assert np.round(p, 4).tolist() == [0.7311, 0.2689]

    @pytest.mark.parametrize("tau", [0.05, 1.0, 5.0])
    def test_equal_utilities(self, tau):
        assert choice_distribution(np.full(7, 3.3), tau) == pytest.approx(np.full(7, 1 / 7), abs=1e-15)

    def test_floor_temperature(self):
        assert choice_distribution([10.0, 0.0], 0.05)[0] > 1 - 1e-12

    def test_no_overflow(self):
        p = choice_distribution([1000.0, -1000.0, 999.0], 0.05)
        assert np.isfinite(p).all()

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40),
        st.floats(0.05, 5.0),
        st.floats(-100, 100),
    )
    def test_probability_vector_and_shift(self, v, tau, c):
        p = choice_distribution(v, tau)
        assert (p >= 0).all()
        assert abs(p.sum() - 1) <= 1e-12
        assert np.max(np.abs(choice_distribution(np.asarray(v) + c, tau) - p)) <= 1e-12

    def test_rows(self):
        m = np.array([[0.0, 1.0], [2.0, 2.0]])
        p = choice_distribution(m, 1.0)
        assert p[1].tolist() == [0.5, 0.5]
        assert p[0] == pytest.approx(choice_distribution([0.0, 1.0], 1.0))


class TestInverseCdf:
    def test_edges(self):
        p = np.array([0.25, 0.5, 0.25])
        assert inverse_cdf(p, [0.0, 0.2499, 0.25, 0.74, 0.75, 0.999999]).tolist() == [0, 0, 1, 1, 2, 2]

    def test_zero_mass_never_picked(self):
        p = np.array([0.0, 1.0, 0.0])
        assert set(inverse_cdf(p, np.random.default_rng(0).random(1000)).tolist()) == {1}

    def test_matrix_matches_rows(self):
        rng = np.random.default_rng(3)
        p = rng.dirichlet(np.ones(6), size=50)
        u = rng.random(50)
        rowwise = [int(inverse_cdf(p[k], [u[k]])[0]) for k in range(50)]
        assert inverse_cdf(p, u).tolist() == rowwise


def stats_for(log):
    return PopulationStats.from_log(log)


class TestSampleAutonomous:
    def setup_method(self):
        self.log = from_events(["a", "a", "b", "b", "b"], ["x", "y", "x", "x", "z"], [0, 1, 0, 1, 2])
        self.stats = stats_for(self.log)

    def test_single_candidate(self):
        cs = CandidateSet(np.array([2]), (GPOP,))
        rng = np.random.default_rng(0)
        assert {sample_autonomous(0, cs, self.stats, 1.0, 1.0, rng) for _ in range(20)} == {2}

    def test_frequencies_without_noise(self):
        cs = CandidateSet(np.array([0, 1, 2]), (GPOP, IPOP, UNKNOWN))
        u, lam, tau = 1, 1.0, 0.7
        c_u = self.stats.events[u] / self.stats.active_days[u]
        expected = choice_distribution(
            [c_u + self.stats.gini[u] * math.log1p(s) + lam / (1 + s) for s in self.stats.strength], tau
        )
        n = 100_000
        draws = sample_autonomous(u, cs, self.stats, lam, tau, np.random.default_rng(9), size=n, noise=False)
        freq = np.bincount(draws, minlength=3) / n
        sigma = np.sqrt(expected * (1 - expected) / n)
        assert (np.abs(freq - expected) <= 3 * sigma).all()

    def test_deterministic(self):
        cs = CandidateSet(np.array([0, 1, 2]), (GPOP, IPOP, UNKNOWN))
        a = sample_autonomous(0, cs, self.stats, 1.0, 0.5, np.random.default_rng(4), size=50)
        b = sample_autonomous(0, cs, self.stats, 1.0, 0.5, np.random.default_rng(4), size=50)
        assert a.tolist() == b.tolist()

    def test_scalar_and_empty(self):
        cs = CandidateSet(np.array([0, 1]), (GPOP, IPOP))
        assert isinstance(sample_autonomous(0, cs, self.stats, 1.0, 1.0, np.random.default_rng(0)), int)
        assert len(sample_autonomous(0, cs, self.stats, 1.0, 1.0, np.random.default_rng(0), size=0)) == 0


class TestTau:
    def test_linear(self):
        assert estimate_tau(range(10), range(10)) == pytest.approx(1.0)

    def test_repeat_floor(self):
        assert estimate_tau(range(10), [7] * 10) == 0.05

    def test_example(self):
        days = [0, 0, 1, 2, 2, 2, 2]
        items = [1, 2, 1, 3, 4, 5, 6]
        assert estimate_tau(days, items) == pytest.approx(ols_slope([0, 1, 2], [2, 2, 6]))
        assert estimate_tau(days, items) == pytest.approx(2.0)

    def test_cold(self):
        assert estimate_tau([4, 4], [1, 2]) == 1.0
        assert estimate_tau([], []) == 1.0

    def test_ceiling(self):
        assert estimate_tau([0, 1], [0, 1]) == 1.0
        assert estimate_tau([0] + [1] * 20, range(21)) == 5.0

    def test_only_active_days(self):
        # points at days 0, 10, 20 with cumulative 1, 2, 3
        assert estimate_tau([0, 10, 20], [1, 2, 3]) == pytest.approx(0.1)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 9)), min_size=1, max_size=40), st.randoms())
    def test_same_day_order_invariant(self, events, rnd):
        shuffled = list(events)
        rnd.shuffle(shuffled)
        shuffled.sort(key=lambda e: e[0])  # days stay ordered, same-day order changes
        a = estimate_tau([d for d, _ in events], [i for _, i in events])
        b = estimate_tau([d for d, _ in shuffled], [i for _, i in shuffled])
        assert a == pytest.approx(b, abs=1e-12)

    def test_brute_force(self):
        rng = np.random.default_rng(2)
        days = np.sort(rng.integers(0, 40, 60))
        items = rng.integers(0, 15, 60)
        seen, x, y = set(), [], []
        for d in np.unique(days):
            seen |= set(items[days == d].tolist())
            x.append(d)
            y.append(len(seen))
        expected = min(max(ols_slope(x, y), 0.05), 5.0)
        assert estimate_tau(days, items) == pytest.approx(expected, abs=1e-12)

    def test_per_user_window(self):
        log = from_events(["a"] * 3 + ["b"], ["x", "y", "z", "x"], [0, 1, 50, 0])
        taus = estimate_taus(log, (0, 10))
        assert taus[log.user_index("a")] == pytest.approx(1.0)
        assert taus[log.user_index("b")] == 1.0


class TestPopulationStats:
    def test_from_log(self):
        log = from_events(["a", "a", "a", "b"], ["x", "x", "y", "x"], [0, 0, 3, 1])
        st_ = stats_for(log)
        a, x = log.user_index("a"), log.item_ids.index("x")
        assert st_.events[a] == 3 and st_.active_days[a] == 2
        assert st_.c(a) == 1.5 and st_.mean_daily_events[a] == 1.5
        assert st_.strength[x] == 3 and st_.popularity[x] == 2
        assert st_.gini[a] == pytest.approx(gini([2, 1]))
        assert st_.distinct_count(a) == 2

    def test_empty_update(self):
        st_ = stats_for(from_events(["a"], ["x"], [0]))
        before = st_.copy()
        st_.update(1, [], [])
        assert st_.same_as(before)

    def test_unit_increment(self):
        log = from_events(["a", "b"], ["x", "y"], [0, 0])
        st_ = stats_for(log)
        a, y = log.user_index("a"), log.item_ids.index("y")
        st_.update(1, [a], [y])
        assert st_.distinct_count(a) == 2 and st_.popularity[y] == 2 and st_.strength[y] == 2
        assert st_.active_days[a] == 2

    def test_same_day_twice_counts_one_active_day(self):
        st_ = stats_for(from_events(["a"], ["x"], [0]))
        st_.update(2, [0], [0])
        st_.update(2, [0], [0])
        assert st_.active_days[0] == 2

    def test_out_of_order(self):
        st_ = stats_for(from_events(["a"], ["x"], [5]))
        with pytest.raises(ValueError):
            st_.update(4, [0], [0])

    @pytest.mark.parametrize("seed", range(100))
    def test_replay_equals_scratch(self, seed):
        log = generate_synthetic(12, 15, 25, 1.0, 2, 0.6, seed=seed)
        if not len(log):
            return
        first = int(log.days[0])
        stats = PopulationStats.from_log(log, (0, first + 1))
        for d in range(first + 1, log.horizon + 1):
            part = log.window(d, d + 1)
            stats.update(d, part.users, part.items)
        assert stats.same_as(PopulationStats.from_log(log))
        assert np.array_equal(stats.last_day, PopulationStats.from_log(log).last_day)


def candidate_stats(n_users=6, n_items=40, seed=0):
    log = generate_synthetic(n_users, n_items, 30, 1.0, 2, 0.6, seed=seed)
    return log, PopulationStats.from_log(log)


class TestCandidateSet:
    def test_quotas(self):
        assert quotas(10) == (4, 4, 2)
        assert quotas(50) == (20, 20, 10)
        assert quotas(7) == (3, 3, 1)

    def test_size_ten(self):
        n_items = 60
        stats = PopulationStats(1, n_items)
        stats.counts[0, 30:40] = np.arange(1, 11)
        gpop = np.zeros(n_items, dtype=np.int64)
        gpop[:8] = np.arange(8, 0, -1)
        cs = build_candidate_set(0, stats, 10, gpop, np.random.default_rng(0))
        assert cs.composition() == {GPOP: 4, IPOP: 4, UNKNOWN: 2}
        assert cs.items[:4].tolist() == [0, 1, 2, 3]
        assert cs.items[4:8].tolist() == [39, 38, 37, 36]
        assert not cs.degenerate

    def test_new_user_backfill(self):
        stats = PopulationStats(1, 30)
        gpop = np.arange(30, 0, -1)
        cs = build_candidate_set(0, stats, 10, gpop, np.random.default_rng(0))
        assert cs.composition() == {GPOP: 8, IPOP: 0, UNKNOWN: 2}
        assert sorted(i for i, t in zip(cs.items.tolist(), cs.tags) if t == GPOP) == list(range(8))

    def test_full_catalog_backfill(self):
        stats = PopulationStats(1, 12)
        stats.counts[0] = 1
        gpop = np.arange(12, 0, -1)
        cs = build_candidate_set(0, stats, 10, gpop, np.random.default_rng(0))
        assert cs.composition()[UNKNOWN] == 0
        assert len(cs) == 10 and len(set(cs.items.tolist())) == 10

    def test_overlap_skips(self):
        stats = PopulationStats(1, 30)
        stats.counts[0, :5] = [9, 8, 7, 6, 5]
        gpop = np.arange(30, 0, -1)
        cs = build_candidate_set(0, stats, 10, gpop, np.random.default_rng(0))
        # IPop ranks 0..4 but the first four are taken by GPop; the remaining
        # IPop item is 4, then IPop is exhausted and GPop fills the gap
        assert cs.composition() == {GPOP: 7, IPOP: 1, UNKNOWN: 2}
        assert len(set(cs.items.tolist())) == 10

    def test_degenerate_catalog(self):
        stats = PopulationStats(1, 6)
        cs = build_candidate_set(0, stats, 10, np.ones(6), np.random.default_rng(0))
        assert cs.degenerate and sorted(cs.items.tolist()) == list(range(6))

    def test_size_floor(self):
        with pytest.raises(ValueError):
            build_candidate_set(0, PopulationStats(1, 10), 4, np.ones(10), np.random.default_rng(0))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(5, 60))
    def test_invariants(self, seed, size):
        log, stats = candidate_stats(seed=seed % 50)
        gpop = np.bincount(log.items, minlength=log.n_items)
        rng = np.random.default_rng(seed)
        for u in range(log.n_users):
            cs = build_candidate_set(u, stats, size, gpop, rng)
            items = cs.items.tolist()
            assert len(items) == len(set(items)) == min(size, log.n_items)
            for i, tag in zip(items, cs.tags):
                if tag == UNKNOWN:
                    assert stats.counts[u, i] == 0
