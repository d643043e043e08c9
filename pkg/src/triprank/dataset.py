"""Checkin ingestion, trip assembly, vocabularies, splits and synthetic data."""
from __future__ import annotations

import csv
import datetime as dt
import io
import os
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import BadDate, MalformedRow, MissingColumn, TooFewTrips

MAX_TRIP_LEN = 50
EPOCH = dt.date(1970, 1, 1)

FIELDS = (
    "user_id",
    "checkin",
    "checkout",
    "city_id",
    "device_class",
    "affiliate_id",
    "booker_country",
    "hotel_country",
    "utrip_id",
)
DEFAULT_COLUMNS = {f: f for f in FIELDS}

# header variants seen in the wild; used only when the default name is absent
_ALIASES = {
    "user_id": ("userId", "user"),
    "checkin": ("checkinDate", "checkin_date"),
    "checkout": ("checkoutDate", "checkout_date"),
    "city_id": ("cityId", "city"),
    "device_class": ("deviceClass",),
    "affiliate_id": ("affiliateId",),
    "booker_country": ("bookerCountry",),
    "hotel_country": ("hotelCountry",),
    "utrip_id": ("utripId", "utrip"),
}


def to_epoch_day(day: dt.date) -> int:
    return (day - EPOCH).days


def from_epoch_day(n: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(n))


def id_key(value: str):
    """Sort key for opaque ids: numeric strings by value, then everything else."""
    if value.isdigit():
        return (0, int(value), value)
    return (1, 0, value)


@dataclass(frozen=True, slots=True)
class Checkin:
    user_id: str
    checkin: int  # days since 1970-01-01
    checkout: int
    city_id: str
    device_class: str
    affiliate_id: str
    booker_country: str
    hotel_country: str
    utrip_id: str

    @property
    def checkin_date(self) -> dt.date:
        return from_epoch_day(self.checkin)

    @property
    def checkout_date(self) -> dt.date:
        return from_epoch_day(self.checkout)

    @property
    def nights(self) -> int:
        return self.checkout - self.checkin


@dataclass(frozen=True)
class Trip:
    utrip_id: str
    checkins: tuple[Checkin, ...]

    def __len__(self) -> int:
        return len(self.checkins)

    @property
    def cities(self) -> tuple[str, ...]:
        return tuple(c.city_id for c in self.checkins)

    @property
    def last(self) -> Checkin:
        return self.checkins[-1]

    @property
    def booker_country(self) -> str:
        return self.checkins[-1].booker_country

    def prefix(self, n: int) -> "Trip":
        return Trip(self.utrip_id, self.checkins[:n])


@dataclass(frozen=True)
class DatasetSplit:
    train: list[Trip]
    validation: list[Trip]
    holdout: list[Trip]

    def ids(self) -> dict[str, list[str]]:
        return {
            "train": [t.utrip_id for t in self.train],
            "validation": [t.utrip_id for t in self.validation],
            "holdout": [t.utrip_id for t in self.holdout],
        }


class Vocab:
    """Dense 1-based index over distinct values; 0 is reserved for unknowns."""

    def __init__(self, values: Iterable[str]):
        self.values: tuple[str, ...] = tuple(sorted(set(values), key=id_key))
        self._index = {v: i + 1 for i, v in enumerate(self.values)}

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.values == other.values

    def __contains__(self, value: str) -> bool:
        return value in self._index

    def index(self, value: str) -> int:
        return self._index.get(value, 0)

    def indices(self, values: Iterable[str]) -> np.ndarray:
        get = self._index.get
        return np.fromiter((get(v, 0) for v in values), dtype=np.int64)

    def value(self, idx: int) -> str:
        if idx <= 0:
            raise KeyError("index 0 is reserved for unknown values")
        return self.values[idx - 1]

    def to_text(self) -> str:
        return "".join(v + "\n" for v in self.values)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(line for line in text.splitlines() if line)


def _resolve_columns(header: Sequence[str], column_map: Mapping[str, str] | None) -> dict[str, int]:
    names = {**DEFAULT_COLUMNS, **(column_map or {})}
    position = {name.strip(): i for i, name in enumerate(header)}
    resolved = {}
    for field in FIELDS:
        name = names[field]
        if name in position:
            resolved[field] = position[name]
            continue
        if column_map is None or field not in column_map:
            alias = next((a for a in _ALIASES[field] if a in position), None)
            if alias is not None:
                resolved[field] = position[alias]
                continue
        raise MissingColumn(name)
    return resolved


def _parse_date(text: str, line: int) -> int:
    try:
        return to_epoch_day(dt.date.fromisoformat(text.strip()))
    except ValueError:
        raise BadDate(line, text) from None


def parse_checkins(source: TextIO | Iterable[str], column_map: Mapping[str, str] | None = None) -> list[Checkin]:
    """Parse comma-separated checkin rows with a header line.

    ``column_map`` maps field names (see ``FIELDS``) to header names and
    overrides the defaults. Line numbers in errors are 1-based and count the
    header.
    """
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        return []
    cols = _resolve_columns(header, column_map)
    width = len(header)
    out = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise MalformedRow(line, f"expected {width} columns, got {len(row)}")
        values = {f: row[i].strip() for f, i in cols.items()}
        for f, v in values.items():
            if not v:
                raise MalformedRow(line, f"empty field {f!r}")
        checkin = _parse_date(values["checkin"], line)
        checkout = _parse_date(values["checkout"], line)
        if checkout < checkin:
            raise MalformedRow(line, "checkout before checkin")
        values["checkin"] = checkin
        values["checkout"] = checkout
        out.append(Checkin(**values))
    return out


def read_checkins(path: str | os.PathLike, column_map: Mapping[str, str] | None = None) -> list[Checkin]:
    with open(path, newline="", encoding="utf-8") as f:
        return parse_checkins(f, column_map)


def write_checkins(checkins: Iterable[Checkin], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(FIELDS)
    for c in checkins:
        writer.writerow(
            [
                c.user_id,
                c.checkin_date.isoformat(),
                c.checkout_date.isoformat(),
                c.city_id,
                c.device_class,
                c.affiliate_id,
                c.booker_country,
                c.hotel_country,
                c.utrip_id,
            ]
        )


def checkins_to_csv(checkins: Iterable[Checkin]) -> str:
    buf = io.StringIO()
    write_checkins(checkins, buf)
    return buf.getvalue()


def assemble_trips(checkins: Iterable[Checkin], max_len: int = MAX_TRIP_LEN) -> list[Trip]:
    """Group checkins by trip id and order them by date.

    Ties on the checkin date fall back to checkout date, then city id. Trips
    longer than ``max_len`` keep their most recent checkins.
    """
    groups: dict[str, list[Checkin]] = defaultdict(list)
    for c in checkins:
        groups[c.utrip_id].append(c)
    trips = []
    for utrip_id in sorted(groups, key=id_key):
        rows = sorted(groups[utrip_id], key=lambda c: (c.checkin, c.checkout, id_key(c.city_id)))
        trips.append(Trip(utrip_id, tuple(rows[-max_len:])))
    return trips


def split_dataset(trips: Sequence[Trip], n_val: int = 4000, n_holdout: int = 4000, seed: int = 0) -> DatasetSplit:
    if len(trips) <= n_val + n_holdout:
        raise TooFewTrips(f"{len(trips)} trips cannot fill validation={n_val} and holdout={n_holdout}")
    perm = np.random.default_rng(seed).permutation(len(trips))
    val = np.sort(perm[:n_val])
    hold = np.sort(perm[n_val : n_val + n_holdout])
    train = np.sort(perm[n_val + n_holdout :])
    return DatasetSplit(
        train=[trips[i] for i in train],
        validation=[trips[i] for i in val],
        holdout=[trips[i] for i in hold],
    )


def split_from_ids(trips: Sequence[Trip], ids: Mapping[str, Sequence[str]]) -> DatasetSplit:
    by_id = {t.utrip_id: t for t in trips}
    try:
        return DatasetSplit(
            train=[by_id[i] for i in ids["train"]],
            validation=[by_id[i] for i in ids["validation"]],
            holdout=[by_id[i] for i in ids["holdout"]],
        )
    except KeyError as exc:
        raise TooFewTrips(f"trip {exc.args[0]!r} from the split manifest is missing in the data") from None


def city_country(city: int, n_cities: int, n_countries: int) -> int:
    return city * n_countries // n_cities


def generate_synthetic(
    n_trips: int,
    n_cities: int = 64,
    n_countries: int = 8,
    transition_sharpness: float = 0.9,
    seed: int = 0,
    n_affiliates: int = 10,
) -> list[Checkin]:
    """Sample trips from a Markov chain over cities.

    With probability ``transition_sharpness`` the next city is ``city + 1``
    (mod ``n_cities``), otherwise it is drawn uniformly from all cities.
    Cities are assigned to countries in contiguous blocks; stays are 1-5
    nights starting between 2016 and 2018.
    """
    if n_cities < 8:
        raise ValueError("n_cities must be >= 8")
    if n_trips < 1:
        raise ValueError("n_trips must be >= 1")
    rng = np.random.default_rng(seed)
    devices = ("desktop", "mobile", "tablet")
    start = to_epoch_day(dt.date(2016, 1, 1))
    span = 3 * 365 - 60
    out = []
    for t in range(n_trips):
        length = int(rng.integers(2, 9))
        city = int(rng.integers(n_cities))
        booker = f"K{int(rng.integers(n_countries))}"
        affiliate = str(int(rng.integers(n_affiliates)))
        device = devices[int(rng.integers(len(devices)))]
        day = start + int(rng.integers(span))
        for k in range(length):
            if k > 0:
                if rng.random() < transition_sharpness:
                    city = (city + 1) % n_cities
                else:
                    city = int(rng.integers(n_cities))
            nights = int(rng.integers(1, 6))
            out.append(
                Checkin(
                    user_id=str(t),
                    checkin=day,
                    checkout=day + nights,
                    city_id=str(city),
                    device_class=device,
                    affiliate_id=affiliate,
                    booker_country=booker,
                    hotel_country=f"K{city_country(city, n_cities, n_countries)}",
                    utrip_id=f"{t}_1",
                )
            )
            day += nights
    return out


def build_vocabs(trips: Iterable[Trip]) -> dict[str, Vocab]:
    """City, country and affiliate vocabularies.

    Booker and hotel countries share one vocabulary because their embeddings
    share a table.
    """
    cities, countries, affiliates = set(), set(), set()
    for trip in trips:
        for c in trip.checkins:
            cities.add(c.city_id)
            countries.add(c.booker_country)
            countries.add(c.hotel_country)
            affiliates.add(c.affiliate_id)
    return {"city_id": Vocab(cities), "country": Vocab(countries), "affiliate_id": Vocab(affiliates)}


def strip_target(checkin: Checkin) -> Checkin:
    """Copy of a checkin with the fields unknown at prediction time blanked."""
    return replace(checkin, city_id="", hotel_country="")
