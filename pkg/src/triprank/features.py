"""Engineered numeric features for candidates, trip cities and the target context."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .candidates import PopularityStats, TransitionMatrix, transition_chain_scores
from .dataset import Checkin, Trip, from_epoch_day

N_RECENT = 5
NIGHTS_CAP = 30

CANDIDATE_FEATURES = (
    "global_popularity",
    "booker_country_popularity",
    "month_year_popularity",
    "transition_chain_score",
    "is_first_trip_city",
    *(f"equals_last_{k}" for k in range(1, N_RECENT + 1)),
    *(f"cosine_last_{k}" for k in range(1, N_RECENT + 1)),
)
TRIP_CITY_FEATURES = (
    "n_nights",
    "weekend",
    "same_country_as_previous",
    "checkin_dow",
    "checkout_dow",
    "checkin_doy",
    "checkout_doy",
    "booker_is_hotel_country",
    "year_0",
    "year_1",
    "year_2",
    *(f"month_{m}" for m in range(1, 13)),
)
N_CANDIDATE_FEATURES = len(CANDIDATE_FEATURES)
N_TRIP_FEATURES = len(TRIP_CITY_FEATURES)


def _max_normalized_log(counts: np.ndarray) -> np.ndarray:
    x = np.log1p(np.asarray(counts, dtype=np.float64))
    top = x.max(initial=0.0)
    return x / top if top > 0 else np.zeros_like(x)


def recent_distinct(cities: Sequence[str], n: int = N_RECENT) -> list[str]:
    """Most recent distinct cities, newest first."""
    out: list[str] = []
    for c in reversed(cities):
        if c not in out:
            out.append(c)
            if len(out) == n:
                break
    return out


def candidate_features(
    candidates: Sequence[str],
    prefix: Trip,
    T: TransitionMatrix,
    stats: PopularityStats,
    month: int,
    year: int,
) -> np.ndarray:
    """Feature matrix of shape (len(candidates), 15) for one ranking instance.

    Count features are log1p-scaled and divided by their maximum over this
    candidate pool, so they depend on the whole pool rather than one city.
    """
    n = len(candidates)
    out = np.zeros((n, N_CANDIDATE_FEATURES))
    if n == 0:
        return out
    booker_counts = stats.booker_country_counts.get(prefix.booker_country, {})
    trans = transition_chain_scores(prefix.cities, T)
    out[:, 0] = _max_normalized_log([stats.global_counts.get(c, 0) for c in candidates])
    out[:, 1] = _max_normalized_log([booker_counts.get(c, 0) for c in candidates])
    out[:, 2] = _max_normalized_log([stats.month_year_counts.get((c, month, year), 0) for c in candidates])
    out[:, 3] = _max_normalized_log([trans.get(c, 0) for c in candidates])
    first = prefix.cities[0]
    out[:, 4] = [c == first for c in candidates]
    recent = recent_distinct(prefix.cities)
    for k, r in enumerate(recent):
        out[:, 5 + k] = [c == r for c in candidates]
    out[:, 10 : 10 + len(recent)] = stats.cosine_block(list(candidates), recent)
    return out


def cosine_cooccurrence(a: str, b: str, stats: PopularityStats) -> float:
    va = stats.cooccurrence.get(a, {})
    vb = stats.cooccurrence.get(b, {})
    if len(va) > len(vb):
        va, vb = vb, va
    dot = sum(n * vb.get(k, 0) for k, n in va.items())
    na = math.sqrt(sum(n * n for n in va.values()))
    nb = math.sqrt(sum(n * n for n in vb.values()))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def weekday(day: int) -> int:
    """Monday = 0; 1970-01-01 was a Thursday."""
    return (day + 3) % 7


def covers_weekend(checkin: int, checkout: int) -> bool:
    if checkout - checkin >= 7:
        return True
    return any(weekday(d) >= 5 for d in range(checkin, checkout))


def _date_block(checkin: Checkin, years: Sequence[int]) -> np.ndarray:
    out = np.zeros(N_TRIP_FEATURES)
    cin, cout = from_epoch_day(checkin.checkin), from_epoch_day(checkin.checkout)
    out[0] = min(checkin.nights, NIGHTS_CAP) / NIGHTS_CAP
    out[1] = covers_weekend(checkin.checkin, checkin.checkout)
    out[3] = cin.weekday() / 7
    out[4] = cout.weekday() / 7
    out[5] = cin.timetuple().tm_yday / 366
    out[6] = cout.timetuple().tm_yday / 366
    if cin.year in years:
        out[8 + list(years).index(cin.year)] = 1.0
    out[10 + cin.month] = 1.0
    return out


def trip_city_features(checkin: Checkin, previous: Checkin | None, years: Sequence[int]) -> np.ndarray:
    out = _date_block(checkin, years)
    out[2] = previous is not None and previous.hotel_country == checkin.hotel_country
    out[7] = checkin.booker_country == checkin.hotel_country
    return out


def trip_features(trip: Trip, years: Sequence[int]) -> np.ndarray:
    rows = [
        trip_city_features(c, trip.checkins[i - 1] if i else None, years)
        for i, c in enumerate(trip.checkins)
    ]
    return np.array(rows).reshape(len(rows), N_TRIP_FEATURES)


def target_context_features(last_checkin: Checkin, years: Sequence[int]) -> np.ndarray:
    # hotel country of the target is unknown, so its flags stay 0
    return _date_block(last_checkin, years)


def feature_schema(years: Sequence[int] = ()) -> str:
    lines = ["block\tindex\tname\trange"]
    for i, name in enumerate(CANDIDATE_FEATURES):
        lines.append(f"candidate\t{i}\t{name}\t{'{0,1}' if name.startswith(('is_', 'equals_')) else '[0,1]'}")
    for i, name in enumerate(TRIP_CITY_FEATURES):
        flag = name in ("weekend", "same_country_as_previous", "booker_is_hotel_country")
        flag = flag or name.startswith(("year_", "month_"))
        lines.append(f"trip_city\t{i}\t{name}\t{'{0,1}' if flag else '[0,1]'}")
    if years:
        lines.append("years\t" + ",".join(str(y) for y in years))
    return "\n".join(lines) + "\n"
