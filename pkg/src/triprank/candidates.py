"""Counting models and the quota cascade that fills each trip's candidate pool."""
from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .dataset import Trip, from_epoch_day, id_key
from .errors import EmptyInput, TripTooShort

TRIP_CITY = "TripCity"
TRANSITION_CHAIN = "TransitionChain"
BOOKER_TRIP_COUNTRY_TOP = "BookerTripCountryTop"
LAST_CITY_COUNTRY_TOP = "LastCityCountryTop"
BOOKER_COUNTRY_TOP = "BookerCountryTop"
GLOBAL_TOP = "GlobalTop"
SOURCES = (
    TRIP_CITY,
    TRANSITION_CHAIN,
    BOOKER_TRIP_COUNTRY_TOP,
    LAST_CITY_COUNTRY_TOP,
    BOOKER_COUNTRY_TOP,
    GLOBAL_TOP,
)
DEFAULT_QUOTAS = (150, 350)  # TransitionChain and BookerTripCountryTop fill up to these sizes


def rank_scores(scores: Mapping[str, float]) -> list[str]:
    """Cities by descending score; ties by ascending city id."""
    return sorted(scores, key=lambda c: (-scores[c], id_key(c)))


class TransitionMatrix:
    """Sparse counts of (earlier trip city -> final trip city)."""

    def __init__(self, rows: Mapping[str, Mapping[str, int]] | None = None):
        self._rows: dict[str, Counter] = {c: Counter(r) for c, r in (rows or {}).items()}

    def __getitem__(self, key: tuple[str, str]) -> int:
        src, dst = key
        row = self._rows.get(src)
        return row.get(dst, 0) if row else 0

    def row(self, city: str) -> Mapping[str, int]:
        return self._rows.get(city, {})

    def items(self):
        for src, row in self._rows.items():
            for dst, n in row.items():
                yield (src, dst), n

    def __len__(self) -> int:
        return sum(len(r) for r in self._rows.values())


def fit_transition_matrix(trips: Iterable[Trip]) -> TransitionMatrix:
    rows: dict[str, Counter] = defaultdict(Counter)
    for trip in trips:
        cities = trip.cities
        last_city = cities[-1]
        for city in cities[:-1]:
            rows[city][last_city] += 1
    return TransitionMatrix(rows)


def transition_chain_scores(cities: Sequence[str], T: TransitionMatrix) -> Counter:
    """Sum of the matrix rows of every city, with multiplicity."""
    scores: Counter = Counter()
    for city in cities:
        scores.update(T.row(city))
    return scores


@dataclass
class PopularityStats:
    global_counts: Counter = field(default_factory=Counter)
    booker_country_counts: dict[str, Counter] = field(default_factory=dict)
    last_city_country_counts: dict[str, Counter] = field(default_factory=dict)
    booker_trip_country_counts: dict[tuple[str, str], Counter] = field(default_factory=dict)
    month_year_counts: Counter = field(default_factory=Counter)
    cooccurrence: dict[str, Counter] = field(default_factory=dict)
    trip_ids: frozenset = frozenset()

    def __post_init__(self):
        self.global_top = rank_scores(self.global_counts)
        self.booker_country_top = {k: rank_scores(v) for k, v in self.booker_country_counts.items()}
        self.last_city_country_top = {k: rank_scores(v) for k, v in self.last_city_country_counts.items()}
        self.booker_trip_country_top = {k: rank_scores(v) for k, v in self.booker_trip_country_counts.items()}
        self._build_cosine_index()

    def _build_cosine_index(self):
        cities = sorted(self.cooccurrence, key=id_key)
        self._cooc_row = {c: i for i, c in enumerate(cities)}
        col: dict[str, int] = {}
        rows, cols, vals = [], [], []
        for c, vec in self.cooccurrence.items():
            for d, n in vec.items():
                rows.append(self._cooc_row[c])
                cols.append(col.setdefault(d, len(col)))
                vals.append(float(n))
        m = sparse.csr_matrix((vals, (rows, cols)), shape=(len(cities), len(col)), dtype=np.float64)
        norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        self._cooc_unit = sparse.diags(inv) @ m

    @property
    def is_empty(self) -> bool:
        return not self.global_counts

    def cosine_block(self, cities: Sequence[str], others: Sequence[str]) -> np.ndarray:
        """Cosine similarities of co-occurrence vectors, shape (len(cities), len(others))."""
        out = np.zeros((len(cities), len(others)))
        if not cities or not others or not self._cooc_row:
            return out
        ri = np.array([self._cooc_row.get(c, -1) for c in cities])
        rj = np.array([self._cooc_row.get(c, -1) for c in others])
        ki, kj = np.flatnonzero(ri >= 0), np.flatnonzero(rj >= 0)
        if len(ki) and len(kj):
            block = (self._cooc_unit[ri[ki]] @ self._cooc_unit[rj[kj]].T).toarray()
            out[np.ix_(ki, kj)] = np.clip(block, 0.0, 1.0)
        return out


def fit_popularity_stats(trips: Iterable[Trip]) -> PopularityStats:
    global_counts: Counter = Counter()
    booker = defaultdict(Counter)
    last_country = defaultdict(Counter)
    booker_trip = defaultdict(Counter)
    month_year: Counter = Counter()
    cooc = defaultdict(Counter)
    ids = []
    for trip in trips:
        ids.append(trip.utrip_id)
        for c in trip.checkins:
            global_counts[c.city_id] += 1
            booker[c.booker_country][c.city_id] += 1
            day = from_epoch_day(c.checkin)
            month_year[(c.city_id, day.month, day.year)] += 1
        if len(trip) >= 2:
            country = trip.checkins[-2].hotel_country
            last_city = trip.checkins[-1].city_id
            last_country[country][last_city] += 1
            booker_trip[(trip.booker_country, country)][last_city] += 1
        for a, b in combinations(sorted(set(trip.cities), key=id_key), 2):
            cooc[a][b] += 1
            cooc[b][a] += 1
    return PopularityStats(
        global_counts=global_counts,
        booker_country_counts=dict(booker),
        last_city_country_counts=dict(last_country),
        booker_trip_country_counts=dict(booker_trip),
        month_year_counts=month_year,
        cooccurrence=dict(cooc),
        trip_ids=frozenset(ids),
    )


@dataclass
class CandidateSet:
    cities: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cities)

    def __iter__(self):
        return iter(self.cities)

    def __contains__(self, city: str) -> bool:
        return city in self.cities

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["city_id", "source_tag", "rank"])
        for rank, (c, s) in enumerate(zip(self.cities, self.sources), start=1):
            w.writerow([c, s, rank])
        return buf.getvalue()


def assemble_candidates(
    prefix: Trip,
    T: TransitionMatrix,
    stats: PopularityStats,
    limit: int = 500,
    quotas: tuple[int, int] = DEFAULT_QUOTAS,
) -> CandidateSet:
    """Fill a candidate pool through the model cascade.

    Trip cities first, then TransitionChain up to ``quotas[0]``, then
    BookerTripCountryTop up to ``quotas[1]``, then LastCityCountryTop,
    BookerCountryTop and GlobalTop up to ``limit``. Never padded beyond what
    the sources provide.
    """
    out = CandidateSet()
    seen: set[str] = set()

    def extend(cities: Iterable[str], tag: str, cap: int):
        cap = min(cap, limit)
        for c in cities:
            if len(out.cities) >= cap:
                return
            if c not in seen:
                seen.add(c)
                out.cities.append(c)
                out.sources.append(tag)

    last = prefix.last
    booker = prefix.booker_country
    extend(prefix.cities, TRIP_CITY, limit)
    extend(rank_scores(transition_chain_scores(prefix.cities, T)), TRANSITION_CHAIN, quotas[0])
    extend(stats.booker_trip_country_top.get((booker, last.hotel_country), ()), BOOKER_TRIP_COUNTRY_TOP, quotas[1])
    extend(stats.last_city_country_top.get(last.hotel_country, ()), LAST_CITY_COUNTRY_TOP, limit)
    extend(stats.booker_country_top.get(booker, ()), BOOKER_COUNTRY_TOP, limit)
    extend(stats.global_top, GLOBAL_TOP, limit)
    return out


def candidate_recall(trips: Sequence[Trip], builder: Callable[[Trip], Iterable[str]]) -> float:
    """Share of trips whose final city is in the pool built from the rest of the trip."""
    if not trips:
        raise EmptyInput("candidate_recall needs at least one trip")
    hits = 0
    for trip in trips:
        if len(trip) < 2:
            raise TripTooShort(f"trip {trip.utrip_id} has no prefix")
        pool = builder(trip.prefix(len(trip) - 1))
        hits += trip.last.city_id in set(pool)
    return hits / len(trips)
