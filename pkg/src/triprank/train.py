"""Epoch loop: resampling, stats refits, LambdaRANK updates, validation, early stopping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .candidates import PopularityStats, TransitionMatrix, fit_popularity_stats, fit_transition_matrix
from .dataset import DatasetSplit, Trip
from .errors import EmptyInput, SchemaError
from .ltr import LambdaConfig, accuracy_at_k, lambdarank_gradients, make_labels, ndcg_at_k
from .nn.autodiff import backward
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.model import ModelConfig, RerankModel
from .nn.params import adam_step
from .pipeline import EncodingContext, Instance, Ranker, build_instance, collate, rank_instances

log = logging.getLogger(__name__)

EPOCH_CSV_HEADER = ("epoch", "train_ndcg40", "val_ndcg40", "val_acc4", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    trips_per_epoch: int = 10000
    patience: int = 50
    max_epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    min_frac: float = 0.1
    max_frac: float = 0.5
    candidate_limit: int = 500
    quota_transition: int = 150
    quota_booker_trip: int = 350
    ndcg_k: int = 40
    acc_k: int = 4
    sigma: float = 1.0
    freeze_stats: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.trips_per_epoch < self.batch_size:
            raise ValueError("trips_per_epoch must be >= batch_size")

    @property
    def quotas(self) -> tuple[int, int]:
        return (self.quota_transition, self.quota_booker_trip)


@dataclass
class EpochReport:
    epoch: int
    train_ndcg: float
    val_ndcg: float
    val_acc: float
    seconds: float
    skipped: int = 0

    def csv_row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_ndcg), repr(self.val_ndcg), repr(self.val_acc), f"{self.seconds:.3f}"]


@dataclass
class FitResult:
    best_epoch: int
    best_arrays: dict[str, np.ndarray]
    reports: list[EpochReport] = field(default_factory=list)


class EarlyStopping:
    """Stop after ``patience`` epochs without a strict improvement of a maximized metric."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record a metric; return True when training should stop."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def ranking_metrics(ranked: Sequence[Sequence[str]], true_cities: Sequence[str], acc_k: int = 4, ndcg_k: int = 40) -> tuple[float, float]:
    """Mean Accuracy@k and NDCG@k with a single relevant city per list."""
    if not true_cities:
        raise EmptyInput("no trips to evaluate")
    acc = ndcg = 0.0
    for r, truth in zip(ranked, true_cities):
        acc += accuracy_at_k(r, truth, acc_k)
        if truth in r:
            labels = np.zeros(len(r))
            labels[list(r).index(truth)] = 1.0
            ndcg += ndcg_at_k(-np.arange(len(r), dtype=np.float64), labels, ndcg_k)
    n = len(true_cities)
    return acc / n, ndcg / n


def holdout_last(trips: Sequence[Trip]) -> tuple[list[Trip], list, list[str]]:
    usable = [t for t in trips if len(t) >= 2]
    prefixes = [t.prefix(len(t) - 1) for t in usable]
    return prefixes, [t.last for t in usable], [t.last.city_id for t in usable]


def evaluate(trips: Sequence[Trip], ranker: Ranker, acc_k: int = 4, ndcg_k: int = 40) -> tuple[float, float]:
    """Predict each trip's final city from the rest; returns (Accuracy@k, NDCG@k).

    Trips of length 1 have no prefix and are left out.
    """
    prefixes, contexts, truth = holdout_last(trips)
    if not prefixes:
        raise EmptyInput("evaluate needs trips of length >= 2")
    return ranking_metrics(ranker(prefixes, contexts), truth, acc_k, ndcg_k)


class Trainer:
    """Owns the model and the per-epoch state of one training run."""

    def __init__(self, split: DatasetSplit, model: RerankModel, ctx: EncodingContext, cfg: TrainConfig):
        self.split = split
        self.model = model
        self.ctx = ctx
        self.cfg = cfg
        self.lambda_cfg = LambdaConfig(sigma=cfg.sigma, k=cfg.ndcg_k)
        self.epoch = 0
        self.audit: list[tuple[frozenset, frozenset]] = []
        self._stats: tuple[TransitionMatrix, PopularityStats] | None = None
        # validation uses stats fit on the whole training split, prepared once
        self.eval_T = fit_transition_matrix(split.train)
        self.eval_stats = fit_popularity_stats(split.train)
        prefixes, contexts, self.val_truth = holdout_last(split.validation)
        self.val_instances = [
            build_instance(p, c, self.eval_T, self.eval_stats, ctx, cfg.candidate_limit, cfg.quotas)
            for p, c in zip(prefixes, contexts)
        ]

    def _epoch_stats(self, rest: list[Trip]) -> tuple[TransitionMatrix, PopularityStats]:
        if self.cfg.freeze_stats and self._stats is not None:
            return self._stats
        if not rest:
            if self._stats is None:
                log.warning("epoch %d: no trips left to fit stats; using empty models", self.epoch)
                self._stats = (TransitionMatrix(), fit_popularity_stats([]))
            else:
                log.warning("epoch %d: no trips left to fit stats; reusing previous epoch", self.epoch)
            return self._stats
        self._stats = (fit_transition_matrix(rest), fit_popularity_stats(rest))
        return self._stats

    def prepare_epoch(self, rng: np.random.Generator) -> tuple[list[Instance], int]:
        train = self.split.train
        n = min(self.cfg.trips_per_epoch, len(train))
        picked = rng.permutation(len(train))
        sampled = [train[i] for i in picked[:n]]
        rest = [train[i] for i in np.sort(picked[n:])]
        T, stats = self._epoch_stats(rest)
        self.audit.append((frozenset(t.utrip_id for t in sampled), stats.trip_ids))
        instances, skipped = [], 0
        for trip in sampled:
            if len(trip) < 2:
                skipped += 1
                continue
            lab = make_labels(trip, rng, self.cfg.min_frac, self.cfg.max_frac)
            context = trip.checkins[len(lab.prefix)]
            inst = build_instance(lab.prefix, context, T, stats, self.ctx, self.cfg.candidate_limit, self.cfg.quotas)
            inst.labels = lab.labels_for(inst.candidates.cities)
            if len(inst.candidates) < 2 or not inst.labels.any():
                skipped += 1
                continue
            instances.append(inst)
        return instances, skipped

    def train_step(self, batch_instances: Sequence[Instance]) -> list[float]:
        """One optimizer step on a batch; returns per-instance NDCG before the update."""
        model = self.model
        batch = collate(batch_instances, model.cfg.trip_len, dtype=model.store.dtype)
        scores = model.forward(batch)
        grad = np.zeros_like(scores.data)
        ndcgs = []
        for k, inst in enumerate(batch_instances):
            n = len(inst.candidates)
            s = scores.data[k, :n]
            ndcgs.append(ndcg_at_k(s, inst.labels, self.cfg.ndcg_k))
            grad[k, :n] = -lambdarank_gradients(s, inst.labels, self.lambda_cfg)
        backward(scores, grad / len(batch_instances))
        adam_step(model.store, self.cfg.lr)
        return ndcgs

    def validate(self) -> tuple[float, float]:
        ranked = rank_instances(self.model, self.val_instances, self.cfg.eval_batch_size)
        return ranking_metrics(ranked, self.val_truth, self.cfg.acc_k, self.cfg.ndcg_k)

    def run_epoch(self) -> EpochReport:
        start = time.perf_counter()
        self.epoch += 1
        rng = np.random.default_rng([self.cfg.seed, self.epoch])
        instances, skipped = self.prepare_epoch(rng)
        if skipped:
            log.warning("epoch %d: skipped %d degenerate training instances", self.epoch, skipped)
        ndcgs: list[float] = []
        bs = self.cfg.batch_size
        for i in range(0, len(instances), bs):
            ndcgs.extend(self.train_step(instances[i : i + bs]))
        val_acc, val_ndcg = self.validate()
        return EpochReport(
            epoch=self.epoch,
            train_ndcg=float(np.mean(ndcgs)) if ndcgs else 0.0,
            val_ndcg=val_ndcg,
            val_acc=val_acc,
            seconds=time.perf_counter() - start,
            skipped=skipped,
        )


def checkpoint_config(model: RerankModel, epoch: int) -> dict[str, str]:
    kv = model.cfg.to_kv()
    kv.update({f"sizes.{k}": str(v) for k, v in model.sizes.items()})
    kv["epoch"] = str(epoch)
    return kv


def model_from_checkpoint(path: str | Path, expected_hash: str | None = None) -> tuple[RerankModel, dict[str, str]]:
    """Rebuild a model from ``best.ckpt``; returns it with the stored config."""
    _, kv, arrays = load_checkpoint(path, expected_hash)
    try:
        cfg = ModelConfig.from_kv(kv)
        sizes = {k[len("sizes."):]: int(v) for k, v in kv.items() if k.startswith("sizes.")}
        model = RerankModel.create(cfg, sizes["city_id"], sizes["country"], sizes["affiliate_id"])
        model.store.load_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{path}: checkpoint does not match its stored config ({exc})") from None
    return model, kv


def fit(
    split: DatasetSplit,
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    ctx: EncodingContext | None = None,
    run_dir: str | Path | None = None,
) -> FitResult:
    """Train until validation Accuracy@k stops improving; return the best epoch's parameters.

    With ``run_dir`` the epoch table goes to ``epochs.csv``, long-form
    metrics to ``metrics.csv`` and every improvement to ``best.ckpt``.
    """
    ctx = ctx or EncodingContext.fit(split.train)
    v = ctx.vocabs
    model = RerankModel.create(model_cfg, len(v["city_id"]), len(v["country"]), len(v["affiliate_id"]), seed=cfg.seed)
    trainer = Trainer(split, model, ctx, cfg)
    stopper = EarlyStopping(cfg.patience)
    result = FitResult(best_epoch=0, best_arrays=model.store.arrays())
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "epochs.csv", "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(EPOCH_CSV_HEADER)
        with open(run_dir / "metrics.csv", "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(("epoch", "split", "metric", "value"))
    for _ in range(cfg.max_epochs):
        report = trainer.run_epoch()
        result.reports.append(report)
        log.info(
            "epoch %d train_ndcg=%.4f val_ndcg=%.4f val_acc=%.4f (%.1fs)",
            report.epoch, report.train_ndcg, report.val_ndcg, report.val_acc, report.seconds,
        )
        stop = stopper.update(report.epoch, report.val_acc)
        if stopper.best_epoch == report.epoch:
            result.best_epoch = report.epoch
            result.best_arrays = model.store.arrays()
            if run_dir is not None:
                save_checkpoint(run_dir / "best.ckpt", result.best_arrays, checkpoint_config(model, report.epoch), ctx.schema_hash())
        if run_dir is not None:
            with open(run_dir / "epochs.csv", "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(report.csv_row())
            with open(run_dir / "metrics.csv", "a", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow((report.epoch, "train", f"ndcg@{cfg.ndcg_k}", repr(report.train_ndcg)))
                w.writerow((report.epoch, "validation", f"ndcg@{cfg.ndcg_k}", repr(report.val_ndcg)))
                w.writerow((report.epoch, "validation", f"accuracy@{cfg.acc_k}", repr(report.val_acc)))
        if stop:
            break
    return result
