import datetime as dt
import io
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triprank.dataset import (
    Checkin,
    Vocab,
    assemble_trips,
    build_vocabs,
    checkins_to_csv,
    generate_synthetic,
    parse_checkins,
    split_dataset,
    to_epoch_day,
)
from triprank.errors import BadDate, MalformedRow, MissingColumn, TooFewTrips

HEADER = "user_id,checkin,checkout,city_id,device_class,affiliate_id,booker_country,hotel_country,utrip_id\n"


def day(s):
    return to_epoch_day(dt.date.fromisoformat(s))


def mk(utrip, city, cin, cout=None, hotel="H", booker="B"):
    cout = cout or cin
    return Checkin("u", day(cin), day(cout), city, "desktop", "7", booker, hotel, utrip)


def test_parse_one_row():
    rows = parse_checkins(io.StringIO(HEADER + "1000027,2016-08-13,2016-08-14,8183,desktop,7168,Elbonia,Gondal,1000027_1\n"))
    assert rows == [
        Checkin("1000027", day("2016-08-13"), day("2016-08-14"), "8183", "desktop", "7168", "Elbonia", "Gondal", "1000027_1")
    ]


def test_parse_header_only():
    assert parse_checkins(io.StringIO(HEADER)) == []


def test_parse_bad_date():
    with pytest.raises(BadDate) as err:
        parse_checkins(io.StringIO(HEADER + "1,2016-13-40,2016-08-14,8183,desktop,7168,E,G,1_1\n"))
    assert err.value.line == 2


def test_parse_wrong_column_count():
    with pytest.raises(MalformedRow) as err:
        parse_checkins(io.StringIO(HEADER + "1,2016-01-01,2016-01-02,8183\n"))
    assert err.value.line == 2


def test_parse_missing_column_named():
    with pytest.raises(MissingColumn, match="hotel_country"):
        parse_checkins(io.StringIO(HEADER.replace("hotel_country", "other")))


def test_parse_header_aliases_and_mapping():
    text = "userId,checkinDate,checkoutDate,cityId,deviceClass,affiliateId,bookerCountry,hotelCountry,utripId\n"
    text += "1,2016-01-01,2016-01-02,5,mobile,3,X,Y,1_1\n"
    (row,) = parse_checkins(io.StringIO(text))
    assert row.city_id == "5" and row.hotel_country == "Y"
    custom = HEADER.replace("city_id", "town") + "1,2016-01-01,2016-01-02,5,m,3,X,Y,1_1\n"
    assert parse_checkins(io.StringIO(custom), {"city_id": "town"})[0].city_id == "5"


def test_round_trip():
    rows = generate_synthetic(30, 16, 4, 0.5, seed=3)
    again = parse_checkins(io.StringIO(checkins_to_csv(rows)))
    assert again == rows


def test_assemble_groups():
    trips = assemble_trips([mk("t1", "1", "2016-01-01"), mk("t1", "2", "2016-01-03"), mk("t2", "3", "2016-01-01")])
    assert [len(t) for t in trips] == [2, 1]


def test_assemble_sorts_by_date():
    (trip,) = assemble_trips([mk("t", "a", "2016-01-05"), mk("t", "b", "2016-01-02")])
    assert trip.cities == ("b", "a")


def test_assemble_tie_break_city_id():
    (trip,) = assemble_trips([mk("t", "9", "2016-01-05", "2016-01-06"), mk("t", "4", "2016-01-05", "2016-01-06")])
    assert trip.cities == ("4", "9")


def test_assemble_keeps_most_recent_50():
    rows = [mk("t", str(i), (dt.date(2016, 1, 1) + dt.timedelta(days=i)).isoformat()) for i in range(60)]
    (trip,) = assemble_trips(rows)
    assert len(trip) == 50 and trip.cities[0] == "10"


@settings(max_examples=50, deadline=None)
@given(st.randoms(use_true_random=False))
def test_assemble_independent_of_row_order(rnd):
    rows = generate_synthetic(20, 16, 4, 0.3, seed=1)
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    trips = assemble_trips(shuffled)
    assert trips == assemble_trips(rows)
    for t in trips:
        keys = [(c.checkin, c.checkout) for c in t.checkins]
        assert keys == sorted(keys)


def test_split_deterministic():
    trips = assemble_trips(generate_synthetic(10, 16, 4, 0.5, seed=0))
    a = split_dataset(trips, 2, 2, seed=7)
    b = split_dataset(trips, 2, 2, seed=7)
    assert a.ids() == b.ids()


def test_split_too_few():
    trips = assemble_trips(generate_synthetic(10, 16, 4, 0.5, seed=0))
    with pytest.raises(TooFewTrips):
        split_dataset(trips, 5, 6, seed=0)


def test_split_sizes_and_partition():
    trips = assemble_trips(generate_synthetic(10000, 16, 4, 0.5, seed=0))
    s = split_dataset(trips, 4000, 4000, seed=1)
    assert (len(s.train), len(s.validation), len(s.holdout)) == (2000, 4000, 4000)
    ids = s.ids()
    sets = [set(v) for v in ids.values()]
    assert sum(len(x) for x in sets) == len(trips)
    assert set().union(*sets) == {t.utrip_id for t in trips}


def test_synthetic_sharp_chain():
    trips = assemble_trips(generate_synthetic(200, 16, 4, 1.0, seed=5))
    for t in trips:
        assert 2 <= len(t) <= 8
        for a, b in zip(t.cities, t.cities[1:]):
            assert int(b) == (int(a) + 1) % 16
        for c in t.checkins:
            assert c.checkout >= c.checkin


def test_synthetic_deterministic():
    assert generate_synthetic(50, 16, 4, 0.7, seed=9) == generate_synthetic(50, 16, 4, 0.7, seed=9)


def test_synthetic_uniform_when_unsharp():
    # collect 10000 transitions; frequency of a fixed successor must be ~1/16
    trips = assemble_trips(generate_synthetic(2500, 16, 4, 0.0, seed=11))
    pairs = [(int(a), int(b)) for t in trips for a, b in zip(t.cities, t.cities[1:])][:10000]
    assert len(pairs) == 10000
    n = len(pairs)
    p = 1 / 16
    sigma = np.sqrt(n * p * (1 - p))
    successor = sum(b == (a + 1) % 16 for a, b in pairs)
    assert abs(successor - n * p) < 3 * sigma
    # per-source successor frequency for one fixed pair
    from_zero = [b for a, b in pairs if a == 0]
    k = sum(b == 1 for b in from_zero)
    m = len(from_zero)
    assert abs(k - m * p) < 3 * np.sqrt(m * p * (1 - p))


def test_vocabs():
    trips = assemble_trips([mk("t", "A", "2016-01-01", booker="X", hotel="Y"), mk("t", "B", "2016-01-02", booker="X", hotel="Y")])
    v = build_vocabs(trips)
    assert len(v["city_id"]) == 2
    assert {v["city_id"].index("A"), v["city_id"].index("B")} == {1, 2}
    assert len(v["country"]) == 2
    assert v["city_id"].index("unseen") == 0


def test_vocab_text_round_trip():
    v = Vocab(["10", "9", "x"])
    assert v.values == ("9", "10", "x")
    assert Vocab.from_text(v.to_text()) == v
    with pytest.raises(KeyError):
        v.value(0)
