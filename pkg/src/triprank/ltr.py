"""Label generation, ranking metrics, LambdaRANK gradients and significance testing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import Trip
from .errors import LengthMismatch, TripTooShort


@dataclass(frozen=True)
class LambdaConfig:
    sigma: float = 1.0
    k: int = 40

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class LabeledInstance:
    prefix: Trip
    targets: tuple[tuple[str, float], ...]

    def labels_for(self, candidates: Sequence[str]) -> np.ndarray:
        # a city repeated among the targets keeps its nearest (largest) label
        best: dict[str, float] = {}
        for city, label in self.targets:
            best.setdefault(city, label)
        return np.array([best.get(c, 0.0) for c in candidates])


def make_labels(trip: Trip, rng: np.random.Generator, min_frac: float = 0.1, max_frac: float = 0.5) -> LabeledInstance:
    """Hold out a random tail of the trip as graded targets.

    The target nearest the prefix gets label 1, the next 1/2, then 1/4, ...
    """
    n = len(trip)
    if n < 2:
        raise TripTooShort(f"trip {trip.utrip_id} has length {n}")
    frac = rng.uniform(min_frac, max_frac)
    n_targets = min(max(1, math.floor(frac * n + 0.5)), n - 1)
    split = n - n_targets
    targets = tuple((c.city_id, 2.0**-i) for i, c in enumerate(trip.checkins[split:]))
    return LabeledInstance(trip.prefix(split), targets)


def _check_lengths(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise LengthMismatch(f"scores {s.shape} vs labels {y.shape}")
    return s, y


def _discounts(n: int, k: int) -> np.ndarray:
    d = 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))
    d[k:] = 0.0
    return d


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def ndcg_at_k(scores, labels, k: int) -> float:
    s, y = _check_lengths(scores, labels)
    if not np.any(y):
        return 1.0
    disc = _discounts(len(y), k)
    dcg = float(np.dot(y[ranking_order(s)], disc))
    idcg = float(np.dot(np.sort(y)[::-1], disc))
    return dcg / idcg


def accuracy_at_k(ranked: Sequence[str], true_city: str, k: int = 4) -> int:
    return int(true_city in ranked[:k])


def lambdarank_gradients(scores, labels, cfg: LambdaConfig = LambdaConfig()) -> np.ndarray:
    """Per-item lambdas: the ascent direction on NDCG@k w.r.t. the scores.

    Pair contributions are accumulated on a dyadic grid fine enough to be
    negligible but coarse enough that every partial sum is exact, so the
    lambdas cancel to exactly zero.
    """
    s, y = _check_lengths(scores, labels)
    n = len(s)
    if n < 2:
        raise LengthMismatch("need at least two items")
    lam = np.zeros(n)
    if not np.any(y) or np.all(y == y[0]):
        return lam
    order = ranking_order(s)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    disc = _discounts(n, cfg.k)[rank]
    idcg = float(np.dot(np.sort(y)[::-1], _discounts(n, cfg.k)))
    delta = np.abs(np.subtract.outer(y, y) * np.subtract.outer(disc, disc)) / idcg
    pairs = np.subtract.outer(y, y) > 0
    rho = expit(-cfg.sigma * np.subtract.outer(s, s))
    contrib = np.where(pairs, cfg.sigma * rho * delta, 0.0)
    total = contrib.sum()
    if total == 0:
        return lam
    # every partial sum below is bounded by 2 * total; keep it within 51 bits
    exp = 50 - math.ceil(math.log2(total))
    contrib = np.ldexp(np.rint(np.ldexp(contrib, exp)), -exp)
    return contrib.sum(axis=1) - contrib.sum(axis=0)


def two_proportion_z_test(successes_a: int, successes_b: int, n: int) -> float:
    """Two-tailed p-value of the pooled two-proportion z test (equal sample sizes)."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not (0 <= successes_a <= n and 0 <= successes_b <= n):
        raise ValueError("successes must lie in [0, n]")
    pooled = (successes_a + successes_b) / (2 * n)
    se = math.sqrt(pooled * (1 - pooled) * 2 / n)
    if se == 0:
        return 1.0
    z = (successes_a - successes_b) / n / se
    return math.erfc(abs(z) / math.sqrt(2))
