import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efa import datasets as ds
from efa.datasets import DataError, RatingsEvent


def rule_table(order):
    """Rating mean of every movie (1-based) for a viewing order, one rule at a time."""
    pos = {movie: p for p, movie in enumerate(order)}
    means = {movie: 3.0 for movie in order}
    means[2] = 1.0 if pos[1] < pos[2] else 5.0
    if pos[4] == pos[3] + 1:
        means[4] = 1.0
    if pos[3] == pos[4] + 1:
        means[3] = 1.0
    if pos[5] == 4:
        means[5] = 5.0
    return means


def _canonical(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class TestSyntheticGenerator:
    def test_identity_order(self):
        means = dict(zip([1, 2, 3, 4, 5], ds.synthetic_means(np.array([0, 1, 2, 3, 4]))[0]))
        assert (means[2], means[4], means[5]) == (1.0, 1.0, 5.0)

    def test_swapped_order(self):
        order = [2, 1, 3, 5, 4]
        means = dict(zip(order, ds.synthetic_means(np.array(order) - 1)[0]))
        assert (means[2], means[4], means[5]) == (5.0, 3.0, 3.0)

    def test_all_permutations_match_rule_table(self):
        perms = list(itertools.permutations([1, 2, 3, 4, 5]))
        got = ds.synthetic_means(np.array(perms) - 1)
        for p, row in zip(perms, got):
            table = rule_table(p)
            assert list(row) == [table[m] for m in p]

    def test_empirical_means(self):
        data = ds.generate_synthetic_ratings(100_000, seed=0)
        expected = np.array([[rule_table(tuple(o + 1))[m + 1] for m in o] for o in data.x])
        cases = {}
        for o, y, e in zip(map(tuple, data.x), data.y, expected):
            cases.setdefault(o, []).append(y - e)
        assert len(cases) == 120
        worst = max(abs(np.mean(r, axis=0)).max() for r in cases.values())
        # per-permutation cells hold about 830 users, so the bound is a 4.5 standard-error band
        assert worst < 0.16
        by_rule = {}
        for m in range(5):
            for mean in (1.0, 3.0, 5.0):
                sel = (data.x == m) & (expected == mean)
                if sel.any():
                    by_rule[(m + 1, mean)] = data.y[sel].mean()
        assert all(abs(v - k[1]) <= 0.02 for k, v in by_rule.items()), by_rule

    def test_orders_are_permutations(self):
        data = ds.generate_synthetic_ratings(50, seed=1)
        assert all(sorted(row) == [0, 1, 2, 3, 4] for row in data.x)

    def test_seeded(self):
        a, b = ds.generate_synthetic_ratings(10, seed=3), ds.generate_synthetic_ratings(10, seed=3)
        assert a.y.tobytes() == b.y.tobytes()

    def test_rejects_zero_users(self):
        with pytest.raises(ValueError):
            ds.generate_synthetic_ratings(0)

    def test_splits(self):
        sp = ds.synthetic_splits(50, 10, 10, seed=0)
        assert [len(sp[k]) for k in ("train", "val", "test")] == [50, 10, 10]


class TestRatings:
    def test_exp1_fixture_snapshot(self):
        events = ds.load_ratings_csv(ds.fixture_path("ratings.csv"))
        data = ds.preprocess_ratings_exp1(events, top_n=3, seed=0)
        # users 2 and 3 have at least twice as many reviews as timestamps; user 6 only rated item 40;
        # user 7 rated items 10 and 30 at the same time and the seeded draw keeps 30.
        expected = {
            "items": [10, 20, 30],
            "sequences": [
                {"user": 1, "items": [10, 20, 30], "ratings": [5, 4, 3]},
                {"user": 4, "items": [10, 20, 30], "ratings": [3, 1, 5]},
                {"user": 5, "items": [30], "ratings": [4]},
                {"user": 7, "items": [20, 30], "ratings": [3, 4]},
            ],
            "splits": {"train": [1, 5], "val": [4], "test": [7]},
            "stats": {"n_users": 4, "n_items": 3, "n_ratings": 9, "sparsity": 0.25, "max_len": 3},
        }
        assert data.snapshot() == _canonical(expected)

    def test_exp2_fixture_snapshot(self):
        events = ds.load_ratings_csv(ds.fixture_path("ratings.csv"))
        data = ds.preprocess_ratings_exp2(events, top_n=3, seed=0)
        expected = {
            "items": [10, 20, 30],
            "sequences": [
                {"user": 1, "items": [10, 20, 30], "ratings": [3, 2, 1]},
                {"user": 2, "items": [20], "ratings": [3]},
                {"user": 4, "items": [10, 30], "ratings": [1, 3]},
                {"user": 5, "items": [30], "ratings": [2]},
                {"user": 7, "items": [20, 30], "ratings": [1, 2]},
            ],
            "splits": {"train": [4, 5, 7], "val": [1], "test": [2]},
            "stats": {"n_users": 5, "n_items": 3, "n_ratings": 9, "sparsity": 0.4, "max_len": 3},
        }
        assert data.snapshot() == _canonical(expected)

    def test_exp2_rating_map(self):
        events = [RatingsEvent(1, 7, 5, 1), RatingsEvent(1, 8, 2, 2), RatingsEvent(1, 9, 3, 3)]
        data = ds.preprocess_ratings_exp2(events, top_n=5)
        doc = json.loads(data.snapshot())
        assert doc["sequences"] == [{"user": 1, "items": [7, 9], "ratings": [3, 1]}]

    def test_ten_reviews_four_timestamps_dropped(self):
        heavy = [RatingsEvent("heavy", i, 3, i % 4) for i in range(10)]
        light = [RatingsEvent("light", i, 4, i) for i in range(3)]
        data = ds.preprocess_ratings_exp1(heavy + light, top_n=10)
        assert data.users == ["light"]

    def test_time_order_and_one_per_timestamp(self):
        events = [RatingsEvent(1, "b", 2, 20), RatingsEvent(1, "a", 3, 10), RatingsEvent(1, "c", 4, 10),
                  RatingsEvent(1, "d", 5, 30)]
        data = ds.preprocess_ratings_exp1(events, top_n=10)
        seq = json.loads(data.snapshot())["sequences"][0]["items"]
        assert len(seq) == 3 and seq[0] in ("a", "c") and seq[1:] == ["b", "d"]

    def test_deterministic_and_idempotent(self):
        events = ds.load_ratings_csv(ds.fixture_path("ratings.csv"))
        a = ds.preprocess_ratings_exp1(events, top_n=3, seed=5)
        assert a.snapshot() == ds.preprocess_ratings_exp1(events, top_n=3, seed=5).snapshot()
        clean = []
        for f, u in enumerate(a.users):
            m = a.batch.valid[f]
            for t, (tok, r) in enumerate(zip(a.batch.x[f, m], a.batch.y[f, m])):
                clean.append(RatingsEvent(u, a.items[tok], int(r), t))
        b = ds.preprocess_ratings_exp1(clean, top_n=3, seed=5)
        assert json.loads(b.snapshot())["sequences"] == json.loads(a.snapshot())["sequences"]

    def test_empty_inputs(self):
        with pytest.raises(DataError):
            ds.preprocess_ratings_exp1([])
        with pytest.raises(DataError):
            ds.preprocess_ratings_exp1([RatingsEvent(1, 1, 3, 1), RatingsEvent(1, 2, 3, 1)])
        with pytest.raises(DataError):
            ds.preprocess_ratings_exp2([RatingsEvent(1, 1, 2, 1)])

    def test_loader_validation(self, tmp_path):
        bad = tmp_path / "r.csv"
        bad.write_text("user,item,rating,timestamp\n1,2,9,3\n")
        with pytest.raises(DataError):
            ds.load_ratings_csv(bad)
        bad.write_text("user,item\n1,2\n")
        with pytest.raises(DataError):
            ds.load_ratings_csv(bad)
        with pytest.raises(DataError):
            ds.load_ratings_csv(tmp_path / "missing.csv")


class TestSplits:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 1000))
    def test_partition(self, n, seed):
        sp = ds.split_indices(n, seed=seed)
        allidx = np.concatenate([sp["train"], sp["val"], sp["test"]])
        assert sorted(allidx.tolist()) == list(range(n))

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ds.split_indices(10, (0.5, 0.2, 0.2))


class TestBaskets:
    def test_fixture_thresholds(self):
        ids, baskets = ds.load_baskets_csv(ds.fixture_path("baskets.csv"))
        assert baskets == [[1, 2, 3], [2, 3], [1, 4], [5], [3, 1, 2, 5]]
        data = ds.preprocess_baskets(baskets, 2, 2, basket_ids=ids)
        expected = {"basket_ids": [1, 2, 5], "items": [1, 2, 3, 5], "baskets": [[1, 2, 3], [2, 3], [3, 1, 2, 5]],
                    "stats": {"n_baskets": 3, "n_items": 4, "max_len": 4}}
        assert data.snapshot() == _canonical(expected)

    def test_threshold_one_keeps_everything(self):
        ids, baskets = ds.load_baskets_csv(ds.fixture_path("baskets.csv"))
        data = ds.preprocess_baskets(baskets, 1, 1, basket_ids=ids)
        assert json.loads(data.snapshot())["baskets"] == baskets

    def test_idempotent_on_clean_data(self):
        # every item is in at least two baskets and every basket has at least two items
        clean = [[1, 2], [2, 1, 3], [3, 1]]
        once = ds.preprocess_baskets(clean, 2, 2)
        assert json.loads(once.snapshot())["baskets"] == clean
        again = ds.preprocess_baskets(json.loads(once.snapshot())["baskets"], 2, 2)
        assert again.snapshot() == once.snapshot()

    def test_fixed_vocabulary(self):
        data = ds.preprocess_baskets([[1, 9, 2], [9]], vocab=[2, 1])
        assert json.loads(data.snapshot())["baskets"] == [[1, 2]]

    def test_empty_result(self):
        with pytest.raises(DataError):
            ds.preprocess_baskets([[1], [2]], 2, 1)
        with pytest.raises(DataError):
            ds.preprocess_baskets([])


class TestTemperatures:
    def _load(self):
        return ds.load_temperatures(ds.fixture_path("temperatures.csv"), {"train": (2010, 2010)})

    def test_fixture_snapshot(self):
        data = self._load()
        expected = {
            "sites": [["A", "Alpha", 40.0, -100.0], ["B", "Gamma", 35.0, -90.0], ["C", "Delta", 45.0, -120.0]],
            "dates": {"train": [f"2010-10-0{d}" for d in range(1, 6)]},
            "rejected": [
                {"region": "D", "city": "Epsilon", "reason": "missing data", "n_missing": 1,
                 "first_missing": "2010-10-03"},
                {"region": "A", "city": "Beta", "reason": "region already covered", "n_missing": 0,
                 "first_missing": None},
            ],
            "values": {"train": [[50.0 + d, 40.0 + d, 70.0 - d] for d in range(1, 6)]},
        }
        assert data.snapshot() == _canonical(expected)

    def test_cross_section_shape(self):
        b = self._load().splits["train"]
        assert b.shape == (5, 3) and b.tau.shape == (3, 2)

    def test_october_only(self):
        assert "2010-09-30" not in self._load().dates["train"]

    def test_rejection_report(self):
        report = json.loads(self._load().rejection_report())
        assert report["accepted"] == ["A/Alpha", "B/Gamma", "C/Delta"]
        assert [r["city"] for r in report["rejected"]] == ["Epsilon", "Beta"]

    def test_lags(self):
        data = self._load()
        b, dates = ds.augment_lags(data.splits["train"], data.dates["train"])
        assert dates == ["2010-10-02", "2010-10-03", "2010-10-04", "2010-10-05"]
        np.testing.assert_array_equal(b.y[0], [52.0, 42.0, 68.0, 51.0, 41.0, 69.0])
        np.testing.assert_array_equal(b.day[0], [0, 0, 0, 1, 1, 1])
        np.testing.assert_array_equal(b.target[0], [True, True, True, False, False, False])

    def test_no_dates_in_range(self):
        with pytest.raises(DataError):
            ds.load_temperatures(ds.fixture_path("temperatures.csv"), {"train": (2011, 2012)})

    def test_bad_coordinates(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("region,city,lat,lon,date,temp\nA,X,95.0,0.0,2010-10-01,50\n")
        with pytest.raises(DataError):
            ds.load_temperatures(p, {"train": (2010, 2010)})


def _chord_distance(p, q, radius=6371.0):
    """Great-circle distance from the straight chord between unit vectors."""
    def unit(lat, lon):
        la, lo = math.radians(lat), math.radians(lon)
        return np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])

    chord = np.linalg.norm(unit(*p) - unit(*q))
    return 2 * radius * math.asin(min(1.0, chord / 2))


class TestHaversine:
    def test_antipodal(self):
        assert ds.haversine(0.0, 0.0, 0.0, 180.0) == pytest.approx(math.pi * 6371.0)
        assert ds.haversine(0.0, 0.0, 0.0, 180.0) == pytest.approx(20015.0, abs=1.0)

    def test_same_point(self):
        assert ds.haversine(12.3, 45.6, 12.3, 45.6) == 0.0

    def test_random_cities_against_oracle(self):
        rng = np.random.default_rng(0)
        cities = np.column_stack([rng.uniform(-80, 80, 5), rng.uniform(-180, 180, 5)])
        for i in range(5):
            for j in range(5):
                assert ds.haversine(*cities[i], *cities[j]) == pytest.approx(
                    _chord_distance(cities[i], cities[j]), abs=1e-6)
        knn = ds.haversine_knn(cities, 2)
        for i in range(5):
            others = sorted((_chord_distance(cities[i], cities[j]), j) for j in range(5) if j != i)
            assert list(knn[i]) == [j for _, j in others[:2]]

    def test_ties_broken_by_index(self):
        coords = [(0.0, 0.0), (0.0, 1.0), (0.0, -1.0), (0.0, 1.0)]
        assert list(ds.haversine_knn(coords, 3)[0]) == [1, 2, 3]

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            ds.haversine_knn([(0, 0), (1, 1)], 2)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-90, 90), st.floats(-180, 180), st.floats(-90, 90), st.floats(-180, 180))
    def test_metric_properties(self, a, b, c, d):
        d1, d2 = ds.haversine(a, b, c, d), ds.haversine(c, d, a, b)
        assert d1 == pytest.approx(d2, abs=1e-9)
        assert d1 >= 0.0
        assert ds.haversine(a, b, a, b) == 0.0


def test_pad_sequences():
    x, y, valid = ds.pad_sequences([[1, 2], [3]], [[0.5, 1.5], [2.5]])
    np.testing.assert_array_equal(x, [[1, 2], [3, 0]])
    np.testing.assert_array_equal(valid, [[True, True], [True, False]])
    assert y[0, 1] == 1.5
    with pytest.raises(DataError):
        ds.pad_sequences([])
