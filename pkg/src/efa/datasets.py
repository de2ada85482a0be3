"""Synthetic data, CSV loaders and preprocessing for ratings, baskets and temperatures.

Input formats (CSV with a header row):

* ratings:      ``user,item,rating,timestamp``
* baskets:      ``basket_id,position,item``
* temperatures: ``region,city,lat,lon,date,temp`` (``date`` is ``YYYY-MM-DD``;
  an empty ``temp`` or ``-99`` marks a missing reading)

Tokens handed to models are 0-based indices into a sorted vocabulary of the
original ids; padding positions carry token 0 and value 0 and are excluded
through ``valid``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import SequenceBatch

__all__ = [
    "DataError",
    "RatingsEvent",
    "generate_synthetic_ratings",
    "synthetic_means",
    "synthetic_splits",
    "load_ratings_csv",
    "RatingsData",
    "preprocess_ratings_exp1",
    "preprocess_ratings_exp2",
    "load_baskets_csv",
    "BasketData",
    "preprocess_baskets",
    "TemperatureData",
    "load_temperatures",
    "augment_lags",
    "haversine",
    "haversine_knn",
    "pad_sequences",
    "split_indices",
    "fixture_path",
    "EARTH_RADIUS_KM",
]

EARTH_RADIUS_KM = 6371.0
MISSING_TEMP = -99.0


class DataError(ValueError):
    """Input data is missing, malformed, or empty after filtering."""


def fixture_path(name: str) -> Path:
    """Path of a CSV fixture shipped with the package."""
    return Path(__file__).parent / "fixtures" / name


# ---------------------------------------------------------------------------
# synthetic ratings


def synthetic_means(order: np.ndarray) -> np.ndarray:
    """Rating means for each position of each order (``(n, 5)`` of 0-based movies).

    Movie 2 gets mean 1 after movie 1 and 5 otherwise; movie 4 right after
    movie 3 (or 3 right after 4) gets 1; movie 5 rated last gets 5; anything
    else keeps 3.
    """
    order = np.atleast_2d(np.asarray(order))
    n = order.shape[0]
    pos = np.argsort(order, axis=1)  # pos[u, m] = position of movie m
    by_movie = np.full((n, 5), 3.0)
    by_movie[:, 1] = np.where(pos[:, 0] < pos[:, 1], 1.0, 5.0)
    by_movie[:, 3] = np.where(pos[:, 3] == pos[:, 2] + 1, 1.0, by_movie[:, 3])
    by_movie[:, 2] = np.where(pos[:, 2] == pos[:, 3] + 1, 1.0, by_movie[:, 2])
    by_movie[:, 4] = np.where(pos[:, 4] == 4, 5.0, by_movie[:, 4])
    return np.take_along_axis(by_movie, order, axis=1)


def generate_synthetic_ratings(n_users: int, seed: int = 0) -> SequenceBatch:
    """Each user rates movies 1..5 (tokens 0..4) in a uniformly random order with unit-variance noise."""
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    rng = np.random.default_rng(seed)
    order = np.argsort(rng.random((n_users, 5)), axis=1)
    y = synthetic_means(order) + rng.standard_normal((n_users, 5))
    return SequenceBatch(x=order, y=y)


def synthetic_splits(n_train: int = 5000, n_val: int = 1000, n_test: int = 1000, seed: int = 0) -> dict:
    data = generate_synthetic_ratings(n_train + n_val + n_test, seed)
    idx = np.arange(len(data))
    return {
        "train": data.subset(idx[:n_train]),
        "val": data.subset(idx[n_train:n_train + n_val]),
        "test": data.subset(idx[n_train + n_val:]),
    }


# ---------------------------------------------------------------------------
# shared helpers


def pad_sequences(seqs: list, values: list | None = None):
    """Right-pad token (and value) lists into ``(F, I)`` arrays plus a validity mask."""
    if not seqs:
        raise DataError("no sequences to pad")
    I = max(len(s) for s in seqs)
    F = len(seqs)
    x = np.zeros((F, I), dtype=np.int64)
    y = np.zeros((F, I)) if values is not None else None
    valid = np.zeros((F, I), dtype=bool)
    for f, s in enumerate(seqs):
        x[f, :len(s)] = s
        valid[f, :len(s)] = True
        if values is not None:
            y[f, :len(s)] = values[f]
    return x, y, valid


def split_indices(n: int, fractions=(0.5625, 0.1875, 0.25), seed: int = 0) -> dict:
    """Seeded shuffle of ``range(n)`` cut into train/val/test by ``fractions``."""
    if not math.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def _read_csv(path, required: tuple) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns {','.join(required)}")
        return list(reader)


def _intlike(s: str) -> int | str:
    try:
        return int(s)
    except ValueError:
        return s


# ---------------------------------------------------------------------------
# ratings


@dataclass(frozen=True)
class RatingsEvent:
    user: int | str
    item: int | str
    rating: int
    timestamp: int


def load_ratings_csv(path, rating_range=(1, 5)) -> list[RatingsEvent]:
    rows = _read_csv(path, ("user", "item", "rating", "timestamp"))
    lo, hi = rating_range
    out = []
    for n, r in enumerate(rows, start=2):
        try:
            ev = RatingsEvent(_intlike(r["user"]), _intlike(r["item"]), int(float(r["rating"])), int(r["timestamp"]))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{n}: malformed ratings row") from exc
        if not lo <= ev.rating <= hi:
            raise DataError(f"{path}:{n}: rating {ev.rating} outside [{lo}, {hi}]")
        out.append(ev)
    return out


@dataclass
class RatingsData:
    """Preprocessed rating sequences.

    ``users[f]`` owns row ``f`` of ``batch``; ``items[t]`` is the original id
    of token ``t``. ``splits`` maps split names to row indices.
    """

    batch: SequenceBatch
    users: list
    items: list
    splits: dict
    stats: dict

    def split(self, name: str) -> SequenceBatch:
        return self.batch.subset(self.splits[name])

    def snapshot(self) -> str:
        """Canonical JSON text; byte-stable for a fixed input and seed."""
        seqs = []
        for f, u in enumerate(self.users):
            m = self.batch.valid[f]
            seqs.append({"user": u, "items": [self.items[t] for t in self.batch.x[f, m]],
                         "ratings": [int(v) for v in self.batch.y[f, m]]})
        doc = {"items": self.items, "sequences": seqs,
               "splits": {k: [self.users[i] for i in v] for k, v in self.splits.items()},
               "stats": self.stats}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _sort_key(v):
    return (isinstance(v, str), v)


def preprocess_ratings_exp1(events: list[RatingsEvent], top_n: int = 50, seed: int = 0,
                            fractions=(0.5625, 0.1875, 0.25)) -> RatingsData:
    """Movie sequences ordered by time.

    1. keep the ``top_n`` movies with the most distinct users (ties: smaller id);
    2. drop users whose surviving review count is at least twice their number
       of distinct timestamps;
    3. per user and timestamp keep one review chosen with the seeded RNG;
    4. order each user's reviews by timestamp and split users by a seeded shuffle.
    """
    if not events:
        raise DataError("no rating events")
    users_per_item: dict = defaultdict(set)
    for ev in events:
        users_per_item[ev.item].add(ev.user)
    ranked = sorted(users_per_item, key=lambda i: (-len(users_per_item[i]), _sort_key(i)))
    keep = set(ranked[:top_n])
    by_user: dict = defaultdict(list)
    for ev in events:
        if ev.item in keep:
            by_user[ev.user].append(ev)
    rng = np.random.default_rng(seed)
    users, seqs, vals = [], [], []
    for u in sorted(by_user, key=_sort_key):
        evs = by_user[u]
        stamps = sorted({e.timestamp for e in evs})
        if len(evs) >= 2 * len(stamps):
            continue
        chosen = []
        for t in stamps:
            group = sorted((e for e in evs if e.timestamp == t), key=lambda e: (_sort_key(e.item), e.rating))
            chosen.append(group[int(rng.integers(len(group)))] if len(group) > 1 else group[0])
        users.append(u)
        seqs.append([e.item for e in chosen])
        vals.append([e.rating for e in chosen])
    if not users:
        raise DataError("no users left after filtering")
    items = sorted({i for s in seqs for i in s}, key=_sort_key)
    index = {item: t for t, item in enumerate(items)}
    x, y, valid = pad_sequences([[index[i] for i in s] for s in seqs], vals)
    batch = SequenceBatch(x=x, y=y, valid=valid)
    n_entries = int(valid.sum())
    stats = {"n_users": len(users), "n_items": len(items), "n_ratings": n_entries,
             "sparsity": round(1.0 - n_entries / (len(users) * len(items)), 6), "max_len": int(x.shape[1])}
    return RatingsData(batch, users, items, split_indices(len(users), fractions, seed), stats)


def preprocess_ratings_exp2(events: list[RatingsEvent], top_n: int = 50, seed: int = 0,
                            fractions=(0.5625, 0.1875, 0.25)) -> RatingsData:
    """Keep ratings 3, 4 and 5, map them to 1, 2 and 3, then run the sequence pipeline."""
    kept = [RatingsEvent(e.user, e.item, e.rating - 2, e.timestamp) for e in events if e.rating in (3, 4, 5)]
    if not kept:
        raise DataError("no ratings of 3, 4 or 5")
    return preprocess_ratings_exp1(kept, top_n=top_n, seed=seed, fractions=fractions)


# ---------------------------------------------------------------------------
# baskets


def load_baskets_csv(path) -> tuple[list, list]:
    """Return ``(basket_ids, baskets)`` with items ordered by ``position``."""
    rows = _read_csv(path, ("basket_id", "position", "item"))
    grouped: dict = defaultdict(list)
    for n, r in enumerate(rows, start=2):
        try:
            grouped[_intlike(r["basket_id"])].append((int(r["position"]), _intlike(r["item"])))
        except ValueError as exc:
            raise DataError(f"{path}:{n}: malformed basket row") from exc
    ids = sorted(grouped, key=_sort_key)
    return ids, [[item for _, item in sorted(grouped[b], key=lambda p: p[0])] for b in ids]


@dataclass
class BasketData:
    batch: SequenceBatch
    basket_ids: list
    items: list
    stats: dict

    def snapshot(self) -> str:
        seqs = [[self.items[t] for t in self.batch.x[f, self.batch.valid[f]]] for f in range(len(self.batch))]
        doc = {"basket_ids": self.basket_ids, "items": self.items, "baskets": seqs, "stats": self.stats}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def preprocess_baskets(baskets: list, min_basket_count: int = 1, min_items_per_basket: int = 1,
                       basket_ids: list | None = None, vocab: list | None = None) -> BasketData:
    """Keep items found in at least ``min_basket_count`` baskets, then baskets with
    at least ``min_items_per_basket`` of those items; order inside a basket is kept.

    Passing ``vocab`` (e.g. from the training split) fixes the item set instead.
    """
    if not baskets:
        raise DataError("no baskets")
    basket_ids = list(range(len(baskets))) if basket_ids is None else list(basket_ids)
    if vocab is None:
        counts = Counter(i for b in baskets for i in set(b))
        items = sorted((i for i, c in counts.items() if c >= min_basket_count), key=_sort_key)
    else:
        items = list(vocab)
    index = {item: t for t, item in enumerate(items)}
    kept_ids, seqs = [], []
    for bid, b in zip(basket_ids, baskets):
        s = [index[i] for i in b if i in index]
        if len(s) >= max(1, min_items_per_basket):
            kept_ids.append(bid)
            seqs.append(s)
    if not seqs:
        raise DataError("no baskets left after filtering")
    x, _, valid = pad_sequences(seqs)
    stats = {"n_baskets": len(seqs), "n_items": len(items), "max_len": int(x.shape[1])}
    return BasketData(SequenceBatch(x=x, valid=valid), kept_ids, items, stats)


# ---------------------------------------------------------------------------
# temperatures


def haversine(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM):
    """Great-circle distance in km between points given in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_knn(coords, k: int) -> np.ndarray:
    """``(n, k)`` indices of the ``k`` nearest other sites (ties by index)."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < {n}")
    lat, lon = coords[:, 0], coords[:, 1]
    dist = haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        order = np.lexsort((others, dist[i, others]))
        out[i] = others[order[:k]]
    return out


@dataclass
class TemperatureData:
    """October cross-sections: ``splits[name]`` has one row per date, one column per site."""

    sites: list  # (region, city, lat, lon)
    tau: np.ndarray  # (n_sites, 2)
    splits: dict
    dates: dict
    rejected: list = field(default_factory=list)

    def rejection_report(self) -> str:
        return json.dumps({"accepted": [f"{r}/{c}" for r, c, _, _ in self.sites], "rejected": self.rejected},
                          indent=2, sort_keys=True)

    def snapshot(self) -> str:
        doc = {"sites": [list(s) for s in self.sites], "dates": self.dates, "rejected": self.rejected,
               "values": {k: np.round(b.y, 6).tolist() for k, b in self.splits.items()}}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def load_temperatures(files, year_ranges: dict) -> TemperatureData:
    """Load October daily temperatures and cut them into per-date cross-sections.

    ``year_ranges`` maps split names to inclusive ``(first_year, last_year)``.
    A site is rejected when any October date in the requested years that
    occurs anywhere in the data is missing or flagged for it. Among accepted
    sites, one per region is kept (the first city name in sorted order).
    """
    files = [files] if isinstance(files, (str, Path)) else list(files)
    if not year_ranges:
        raise ValueError("year_ranges must name at least one split")
    years = {y for a, b in year_ranges.values() for y in range(int(a), int(b) + 1)}
    readings: dict = defaultdict(dict)
    coords: dict = {}
    all_dates: set = set()
    for path in files:
        for n, r in enumerate(_read_csv(path, ("region", "city", "lat", "lon", "date", "temp")), start=2):
            try:
                date = _dt.date.fromisoformat(r["date"])
                lat, lon = float(r["lat"]), float(r["lon"])
            except ValueError as exc:
                raise DataError(f"{path}:{n}: malformed temperature row") from exc
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise DataError(f"{path}:{n}: coordinates out of range")
            if date.month != 10 or date.year not in years:
                continue
            site = (r["region"], r["city"])
            coords[site] = (lat, lon)
            temp = r["temp"].strip()
            value = float(temp) if temp else math.nan
            readings[site][date] = math.nan if value == MISSING_TEMP else value
            all_dates.add(date)
    if not readings:
        raise DataError("no October readings in the requested years")
    dates = sorted(all_dates)
    rejected, complete = [], []
    for site in sorted(readings):
        vals = readings[site]
        missing = [d.isoformat() for d in dates if not math.isfinite(vals.get(d, math.nan))]
        if missing:
            rejected.append({"region": site[0], "city": site[1], "reason": "missing data",
                             "n_missing": len(missing), "first_missing": missing[0]})
        else:
            complete.append(site)
    chosen, seen_regions = [], set()
    for site in complete:  # sorted by (region, city)
        if site[0] in seen_regions:
            rejected.append({"region": site[0], "city": site[1], "reason": "region already covered",
                             "n_missing": 0, "first_missing": None})
            continue
        seen_regions.add(site[0])
        chosen.append(site)
    if not chosen:
        raise DataError("every site was rejected")
    sites = [(r, c, coords[(r, c)][0], coords[(r, c)][1]) for r, c in chosen]
    tau = np.array([[s[2], s[3]] for s in sites])
    splits, split_dates = {}, {}
    for name, (a, b) in year_ranges.items():
        ds = [d for d in dates if int(a) <= d.year <= int(b)]
        if not ds:
            raise DataError(f"split {name!r} has no dates")
        y = np.array([[readings[(r, c)][d] for r, c, _, _ in sites] for d in ds])
        splits[name] = SequenceBatch(y=y, tau=tau)
        split_dates[name] = [d.isoformat() for d in ds]
    return TemperatureData(sites, tau, splits, split_dates, rejected)


def augment_lags(batch: SequenceBatch, dates: list) -> tuple[SequenceBatch, list]:
    """Append the previous day's readings as context-only columns.

    Column ``j < n`` is site ``j`` today (day slot 0, a target); column
    ``n + j`` is site ``j`` yesterday (day slot 1, context only). Dates whose
    previous day is not in ``dates`` are dropped.
    """
    parsed = [_dt.date.fromisoformat(d) for d in dates]
    row_of = {d: k for k, d in enumerate(parsed)}
    keep = [k for k, d in enumerate(parsed) if d - _dt.timedelta(days=1) in row_of]
    if not keep:
        raise DataError("no date has its previous day available")
    prev = [row_of[parsed[k] - _dt.timedelta(days=1)] for k in keep]
    n = batch.shape[1]
    y = np.concatenate([batch.y[keep], batch.y[prev]], axis=1)
    tau = np.concatenate([batch.tau, batch.tau], axis=0)
    target = np.zeros(y.shape, dtype=bool)
    target[:, :n] = True
    day = np.zeros(y.shape, dtype=np.int64)
    day[:, n:] = 1
    return SequenceBatch(y=y, tau=tau, target=target, day=day), [dates[k] for k in keep]
