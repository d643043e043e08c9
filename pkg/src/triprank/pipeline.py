"""Turn trips into padded model inputs and rank candidate pools."""
from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .candidates import (
    DEFAULT_QUOTAS,
    CandidateSet,
    PopularityStats,
    TransitionMatrix,
    assemble_candidates,
    rank_scores,
    transition_chain_scores,
)
from .dataset import Checkin, Trip, Vocab, build_vocabs, from_epoch_day, id_key
from .features import (
    N_CANDIDATE_FEATURES,
    N_TRIP_FEATURES,
    candidate_features,
    feature_schema,
    target_context_features,
    trip_features,
)
from .ltr import ranking_order
from .nn.model import RerankModel

Ranker = Callable[[Sequence[Trip], Sequence[Checkin]], list[list[str]]]


@dataclass
class EncodingContext:
    """Everything fixed per corpus that the model inputs depend on."""

    vocabs: dict[str, Vocab]
    city_country: dict[str, str]
    years: tuple[int, int, int]

    @classmethod
    def fit(cls, trips: Sequence[Trip]) -> "EncodingContext":
        votes: dict[str, Counter] = defaultdict(Counter)
        first_year = None
        for trip in trips:
            for c in trip.checkins:
                votes[c.city_id][c.hotel_country] += 1
                year = from_epoch_day(c.checkin).year
                first_year = year if first_year is None else min(first_year, year)
        city_country = {
            city: min(v, key=lambda k: (-v[k], id_key(k))) for city, v in votes.items()
        }
        first_year = first_year or 2016
        return cls(build_vocabs(trips), city_country, (first_year, first_year + 1, first_year + 2))

    def schema_hash(self) -> str:
        h = hashlib.sha256(feature_schema(self.years).encode())
        for name in sorted(self.vocabs):
            h.update(f"\n#{name}\n".encode())
            h.update(self.vocabs[name].to_text().encode())
        h.update(b"\n#city_country\n")
        for city in sorted(self.city_country, key=id_key):
            h.update(f"{city}\t{self.city_country[city]}\n".encode())
        return h.hexdigest()


@dataclass
class Instance:
    prefix: Trip
    context: Checkin
    candidates: CandidateSet
    trip_city: np.ndarray
    trip_booker: np.ndarray
    trip_hotel: np.ndarray
    trip_affiliate: np.ndarray
    trip_features: np.ndarray
    cand_city: np.ndarray
    cand_country: np.ndarray
    cand_features: np.ndarray
    target: np.ndarray
    labels: np.ndarray | None = None


def build_instance(
    prefix: Trip,
    context: Checkin,
    T: TransitionMatrix,
    stats: PopularityStats,
    ctx: EncodingContext,
    limit: int = 500,
    quotas: tuple[int, int] = DEFAULT_QUOTAS,
) -> Instance:
    """Candidates and features for predicting the checkin ``context`` after ``prefix``.

    Only the date, device, affiliate and booker fields of ``context`` are read.
    """
    cities = ctx.vocabs["city_id"]
    countries = ctx.vocabs["country"]
    cands = assemble_candidates(prefix, T, stats, limit=limit, quotas=quotas)
    day = from_epoch_day(context.checkin)
    return Instance(
        prefix=prefix,
        context=context,
        candidates=cands,
        trip_city=cities.indices(prefix.cities),
        trip_booker=countries.indices(c.booker_country for c in prefix.checkins),
        trip_hotel=countries.indices(c.hotel_country for c in prefix.checkins),
        trip_affiliate=ctx.vocabs["affiliate_id"].indices(c.affiliate_id for c in prefix.checkins),
        trip_features=trip_features(prefix, ctx.years),
        cand_city=cities.indices(cands.cities),
        cand_country=countries.indices(ctx.city_country.get(c, "") for c in cands.cities),
        cand_features=candidate_features(cands.cities, prefix, T, stats, day.month, day.year),
        target=target_context_features(context, ctx.years),
    )


def collate(instances: Sequence[Instance], trip_len: int, n_candidates: int | None = None, dtype=np.float64) -> dict:
    """Pad a list of instances into one batch.

    Trips keep their most recent ``trip_len`` checkins and are padded to
    exactly that length. Candidates pad to ``n_candidates`` (default: the
    largest pool in the batch); padding never changes real outputs.
    """
    b = len(instances)
    n_cand = n_candidates or max(1, max(len(i.candidates) for i in instances))
    batch = {
        "trip_city": np.zeros((b, trip_len), dtype=np.int64),
        "trip_booker": np.zeros((b, trip_len), dtype=np.int64),
        "trip_hotel": np.zeros((b, trip_len), dtype=np.int64),
        "trip_affiliate": np.zeros((b, trip_len), dtype=np.int64),
        "trip_features": np.zeros((b, trip_len, N_TRIP_FEATURES), dtype=dtype),
        "trip_mask": np.zeros((b, trip_len), dtype=dtype),
        "cand_city": np.zeros((b, n_cand), dtype=np.int64),
        "cand_country": np.zeros((b, n_cand), dtype=np.int64),
        "cand_features": np.zeros((b, n_cand, N_CANDIDATE_FEATURES), dtype=dtype),
        "cand_mask": np.zeros((b, n_cand), dtype=dtype),
        "target": np.zeros((b, N_TRIP_FEATURES), dtype=dtype),
    }
    for k, inst in enumerate(instances):
        L = min(len(inst.trip_city), trip_len)
        for key in ("trip_city", "trip_booker", "trip_hotel", "trip_affiliate", "trip_features"):
            batch[key][k, :L] = getattr(inst, key)[-L:]
        batch["trip_mask"][k, :L] = 1
        n = len(inst.candidates)
        batch["cand_city"][k, :n] = inst.cand_city
        batch["cand_country"][k, :n] = inst.cand_country
        batch["cand_features"][k, :n] = inst.cand_features
        batch["cand_mask"][k, :n] = 1
        batch["target"][k] = inst.target
    return batch


def score_instances(model: RerankModel, instances: Sequence[Instance], batch_size: int = 256) -> list[np.ndarray]:
    out = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start : start + batch_size]
        scores = model.forward(collate(chunk, model.cfg.trip_len, dtype=model.store.dtype)).data
        out.extend(scores[k, : len(inst.candidates)].copy() for k, inst in enumerate(chunk))
    return out


def rank_instances(model: RerankModel, instances: Sequence[Instance], batch_size: int = 256) -> list[list[str]]:
    ranked = []
    for inst, s in zip(instances, score_instances(model, instances, batch_size)):
        ranked.append([inst.candidates.cities[i] for i in ranking_order(s)])
    return ranked


class ModelRanker:
    def __init__(self, model: RerankModel, ctx: EncodingContext, T: TransitionMatrix, stats: PopularityStats,
                 limit: int = 500, quotas: tuple[int, int] = DEFAULT_QUOTAS, batch_size: int = 256):
        self.model = model
        self.ctx = ctx
        self.T = T
        self.stats = stats
        self.limit = limit
        self.quotas = quotas
        self.batch_size = batch_size

    def instances(self, prefixes: Sequence[Trip], contexts: Sequence[Checkin]) -> list[Instance]:
        return [
            build_instance(p, c, self.T, self.stats, self.ctx, self.limit, self.quotas)
            for p, c in zip(prefixes, contexts)
        ]

    def scored(self, prefixes: Sequence[Trip], contexts: Sequence[Checkin]) -> list[list[tuple[str, float]]]:
        insts = self.instances(prefixes, contexts)
        out = []
        for inst, s in zip(insts, score_instances(self.model, insts, self.batch_size)):
            out.append([(inst.candidates.cities[i], float(s[i])) for i in ranking_order(s)])
        return out

    def __call__(self, prefixes: Sequence[Trip], contexts: Sequence[Checkin]) -> list[list[str]]:
        return rank_instances(self.model, self.instances(prefixes, contexts), self.batch_size)


class GlobalTopRanker:
    def __init__(self, stats: PopularityStats):
        self.stats = stats

    def __call__(self, prefixes, contexts):
        return [self.stats.global_top for _ in prefixes]


class LastCityCountryTopRanker:
    def __init__(self, stats: PopularityStats):
        self.stats = stats

    def __call__(self, prefixes, contexts):
        return [self.stats.last_city_country_top.get(p.last.hotel_country, []) for p in prefixes]


class TransitionChainRanker:
    def __init__(self, T: TransitionMatrix):
        self.T = T

    def __call__(self, prefixes, contexts):
        return [rank_scores(transition_chain_scores(p.cities, self.T)) for p in prefixes]


BASELINES = {
    "GlobalTop": lambda T, stats: GlobalTopRanker(stats),
    "LastCityCountryTop": lambda T, stats: LastCityCountryTopRanker(stats),
    "TransitionChain": lambda T, stats: TransitionChainRanker(T),
}
