"""Command line entry points: synth, prepare, train, evaluate, compare, predict.

Exit codes: 0 success, 2 input error, 3 schema or config error, 1 anything else.
Every command writes a JSON run manifest describing its inputs and settings.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .candidates import fit_popularity_stats, fit_transition_matrix
from .config import RunConfig, load_config, parse_config
from .dataset import (
    FIELDS,
    Checkin,
    Trip,
    Vocab,
    assemble_trips,
    generate_synthetic,
    read_checkins,
    split_dataset,
    split_from_ids,
    to_epoch_day,
    write_checkins,
)
from .errors import InputError, SchemaError, SchemaMismatch
from .ltr import two_proportion_z_test
from .pipeline import BASELINES, EncodingContext, ModelRanker
from .train import fit, holdout_last, model_from_checkpoint, ranking_metrics

log = logging.getLogger("triprank")

SPLITS = ("train", "validation", "holdout")
MODEL_NAME = "RerankingAttention"


# ----------------------------------------------------------------------
# manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str]
    output_dir: str
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**data)
        except FileNotFoundError:
            raise InputError(f"{path}: no run manifest found") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise SchemaError(f"{path}: unreadable run manifest ({exc})") from None


def digests(paths: Sequence[str | Path]) -> dict[str, str]:
    return {str(Path(p).resolve()): sha256_file(p) for p in paths}


# ----------------------------------------------------------------------
# prepared data


@dataclass
class PreparedData:
    data_dir: Path
    manifest: RunManifest
    split: "object"
    ctx: EncodingContext

    @property
    def csv_path(self) -> Path:
        return Path(self.manifest.extra["input"])


def load_prepared(data_dir: str | Path) -> PreparedData:
    """Reload the corpus named by a prepared data directory and check it is unchanged."""
    data_dir = Path(data_dir)
    manifest = RunManifest.read(data_dir / "manifest.json")
    csv_path = Path(manifest.extra["input"])
    recorded = manifest.inputs.get(str(csv_path))
    if not csv_path.exists():
        raise InputError(f"{csv_path}: input named in {data_dir / 'manifest.json'} is missing")
    if recorded != sha256_file(csv_path):
        raise SchemaMismatch(f"{csv_path} changed since prepare (sha256 differs)")
    columns = manifest.config.get("columns") or None
    trips = assemble_trips(read_checkins(csv_path, columns))
    ids = {s: (data_dir / f"split_{s}.txt").read_text(encoding="utf-8").split() for s in SPLITS}
    split = split_from_ids(trips, ids)
    ctx = EncodingContext.fit(split.train)
    for name, vocab in ctx.vocabs.items():
        saved = Vocab.from_text((data_dir / f"vocab_{name}.txt").read_text(encoding="utf-8"))
        if saved != vocab:
            raise SchemaMismatch(f"vocab_{name}.txt does not match the training split")
    return PreparedData(data_dir, manifest, split, ctx)


# ----------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    checkins = generate_synthetic(
        args.trips,
        n_cities=args.cities,
        n_countries=args.countries,
        transition_sharpness=args.sharpness,
        seed=args.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        write_checkins(checkins, f)
    RunManifest(
        command="synth",
        config={"trips": args.trips, "cities": args.cities, "countries": args.countries, "sharpness": args.sharpness},
        seed=args.seed,
        inputs={},
        output_dir=str(out.parent.resolve()),
        extra={"output": str(out.resolve())},
    ).write(out.with_name(out.name + ".manifest.json"))
    print(f"wrote {len(checkins)} checkins to {out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = load_config(args.config)
    trips = assemble_trips(read_checkins(args.input, cfg.columns or None))
    split = split_dataset(trips, n_val=args.val, n_holdout=args.holdout, seed=args.seed)
    ctx = EncodingContext.fit(split.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in split.ids().items():
        (out / f"split_{name}.txt").write_text("".join(i + "\n" for i in ids), encoding="utf-8")
    for name, vocab in ctx.vocabs.items():
        (out / f"vocab_{name}.txt").write_text(vocab.to_text(), encoding="utf-8")
    inputs = digests([args.input])
    RunManifest(
        command="prepare",
        config={"val": args.val, "holdout": args.holdout, "columns": cfg.columns},
        seed=args.seed,
        inputs=inputs,
        output_dir=str(out.resolve()),
        extra={"input": next(iter(inputs)), "schema_hash": ctx.schema_hash()},
    ).write(out / "manifest.json")
    sizes = {k: len(v) for k, v in split.ids().items()}
    print(f"{len(trips)} trips: " + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return 0


def cmd_train(args) -> int:
    if args.from_manifest:
        previous = RunManifest.read(args.from_manifest)
        if previous.command != "train":
            raise SchemaError(f"{args.from_manifest} is a {previous.command!r} manifest, not a train manifest")
        data_dir = previous.extra["data_dir"]
        cfg = parse_config("".join(f"{k} = {v}\n" for k, v in previous.config.items()))
    else:
        if not args.data:
            raise InputError("train needs --data or --from-manifest")
        data_dir = args.data
        cfg = load_config(args.config)
    data = load_prepared(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    inputs = digests([data.csv_path] + ([args.config] if args.config and not args.from_manifest else []))
    manifest = RunManifest(
        command="train",
        config=cfg.to_kv(),
        seed=cfg.train.seed,
        inputs=inputs,
        output_dir=str(out.resolve()),
        extra={"data_dir": str(Path(data_dir).resolve()), "schema_hash": data.ctx.schema_hash()},
    )
    manifest.write(out / "manifest.json")
    result = fit(data.split, cfg.train, cfg.model, ctx=data.ctx, run_dir=out)
    best = result.reports[result.best_epoch - 1]
    manifest.extra.update(best_epoch=result.best_epoch, epochs=len(result.reports), best_val_acc4=best.val_acc)
    manifest.write(out / "manifest.json")
    print(f"best epoch {result.best_epoch}: val accuracy@4 {best.val_acc:.4f}, val ndcg@40 {best.val_ndcg:.4f}")
    return 0


def _rankers(names: Sequence[str], data: PreparedData, cfg: RunConfig):
    """Resolve baseline names and checkpoint paths into (label, ranker, path)."""
    T = fit_transition_matrix(data.split.train)
    stats = fit_popularity_stats(data.split.train)
    expected = data.ctx.schema_hash()
    checkpoints = [n for n in names if n not in BASELINES]
    out = []
    for name in names:
        if name in BASELINES:
            out.append((name, BASELINES[name](T, stats), None))
            continue
        model, _ = model_from_checkpoint(name, expected)
        label = MODEL_NAME if len(checkpoints) == 1 else f"{MODEL_NAME}:{name}"
        ranker = ModelRanker(model, data.ctx, T, stats, cfg.train.candidate_limit, cfg.train.quotas, cfg.train.eval_batch_size)
        out.append((label, ranker, name))
    return out


def _run_config_for(data: PreparedData, checkpoint: str | None) -> RunConfig:
    """Settings of the run that produced ``checkpoint`` when its manifest is alongside."""
    if checkpoint:
        path = Path(checkpoint).parent / "manifest.json"
        if path.exists():
            m = RunManifest.read(path)
            return parse_config("".join(f"{k} = {v}\n" for k, v in m.config.items()))
    return RunConfig()


def _compare(args, names: Sequence[str], command: str) -> int:
    data = load_prepared(args.data)
    first_ckpt = next((n for n in names if n not in BASELINES), None)
    cfg = _run_config_for(data, first_ckpt)
    trips = getattr(data.split, args.split)
    rankers = _rankers(names, data, cfg)
    prefixes, contexts, truth = holdout_last(trips)
    n = len(truth)
    rows = []
    for label, ranker, _ in rankers:
        acc, ndcg = ranking_metrics(ranker(prefixes, contexts), truth, cfg.train.acc_k, cfg.train.ndcg_k)
        rows.append({"model": label, "hits": int(round(acc * n)), "accuracy@4": acc, "ndcg@40": ndcg})
    best = max(rows, key=lambda r: r["accuracy@4"])
    for r in rows:
        r["p_value"] = two_proportion_z_test(best["hits"], r["hits"], n)

    out = Path(args.out) if args.out else Path(args.data) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    report = out / f"{command}_{args.split}.csv"
    with open(report, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "n", "accuracy@4", "ndcg@40", "p_value_vs_best"])
        for r in rows:
            w.writerow([r["model"], n, repr(r["accuracy@4"]), repr(r["ndcg@40"]), repr(r["p_value"])])
    RunManifest(
        command=command,
        config={**cfg.to_kv(), "split": args.split, "models": list(names)},
        seed=cfg.train.seed,
        inputs=digests([data.csv_path] + [p for _, _, p in rankers if p]),
        output_dir=str(out.resolve()),
        extra={"data_dir": str(Path(args.data).resolve()), "best": best["model"]},
    ).write(out / f"{command}_{args.split}_manifest.json")

    width = max(len(r["model"]) for r in rows)
    print(f"{'model':<{width}}  accuracy@4  ndcg@40  p_vs_best   ({args.split}, n={n})")
    for r in rows:
        print(f"{r['model']:<{width}}  {r['accuracy@4']:10.4f}  {r['ndcg@40']:7.4f}  {r['p_value']:9.3g}")
    return 0


def cmd_evaluate(args) -> int:
    return _compare(args, [args.model], "evaluate")


def cmd_compare(args) -> int:
    names = [n for item in args.models for n in item.split(",") if n]
    return _compare(args, names, "compare")


def _date(value, what: str) -> int:
    try:
        return to_epoch_day(dt.date.fromisoformat(str(value)))
    except ValueError:
        raise InputError(f"{what}: unparseable date {value!r}") from None


def read_trip_json(path: str | Path) -> tuple[list[Checkin], Checkin]:
    """A JSON array of checkin objects; the last object describes the checkin to predict.

    The target object needs the date fields and may omit city_id and hotel_country.
    """
    try:
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(rows, list) or len(rows) < 2 or not all(isinstance(r, dict) for r in rows):
        raise InputError(f"{path}: expected an array of at least one checkin plus the target context")
    out = []
    for i, row in enumerate(rows):
        target = i == len(rows) - 1
        values = {}
        for f in FIELDS:
            v = row.get(f, "")
            if f in ("checkin", "checkout"):
                if v in ("", None):
                    raise InputError(f"{path}: object {i} is missing {f!r}")
                values[f] = _date(v, f"{path}: object {i} {f}")
            else:
                values[f] = "" if v is None else str(v)
        if not target and not values["city_id"]:
            raise InputError(f"{path}: object {i} is missing 'city_id'")
        values["utrip_id"] = values["utrip_id"] or "query"
        out.append(Checkin(**values))
    return out[:-1], out[-1]


def cmd_predict(args) -> int:
    model_path = Path(args.model)
    data_dir = args.data
    cfg = RunConfig()
    run_manifest = model_path.parent / "manifest.json"
    if run_manifest.exists():
        m = RunManifest.read(run_manifest)
        cfg = parse_config("".join(f"{k} = {v}\n" for k, v in m.config.items()))
        data_dir = data_dir or m.extra.get("data_dir")
    if not data_dir:
        raise InputError("predict needs --data when the checkpoint has no run manifest alongside")
    data = load_prepared(data_dir)
    model, _ = model_from_checkpoint(model_path, data.ctx.schema_hash())
    T = fit_transition_matrix(data.split.train)
    stats = fit_popularity_stats(data.split.train)
    checkins, context = read_trip_json(args.trip)
    prefix = Trip(checkins[-1].utrip_id, tuple(checkins))
    ranker = ModelRanker(model, data.ctx, T, stats, cfg.train.candidate_limit, cfg.train.quotas)
    ranked = ranker.scored([prefix], [context])[0][: args.top]
    for rank, (city, score) in enumerate(ranked, start=1):
        print(f"{rank}\t{city}\t{score!r}")

    out = Path(args.out) if args.out else model_path.parent
    RunManifest(
        command="predict",
        config={**cfg.to_kv(), "top": args.top},
        seed=cfg.train.seed,
        inputs=digests([model_path, args.trip, data.csv_path]),
        output_dir=str(out.resolve()),
        extra={"data_dir": str(Path(data_dir).resolve()), "ranked": [c for c, _ in ranked]},
    ).write(out / "predict_manifest.json")
    return 0


# ----------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triprank", description="Next-city recommendation: candidates plus attention reranker.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic checkin CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--trips", type=int, default=5000)
    s.add_argument("--cities", type=int, default=64)
    s.add_argument("--countries", type=int, default=8)
    s.add_argument("--sharpness", type=float, default=0.9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="split trips and build vocabularies")
    s.add_argument("--input", required=True, help="checkin CSV")
    s.add_argument("--out", required=True, help="data directory to create")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val", type=int, default=4000)
    s.add_argument("--holdout", type=int, default=4000)
    s.add_argument("--config", help="optional config file (data.column.* keys)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train the reranker")
    s.add_argument("--data", help="prepared data directory")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--from-manifest", help="repeat the run described by a train manifest")
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score one checkpoint on a split")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, help="checkpoint path")
    s.add_argument("--split", choices=SPLITS, default="holdout")
    s.add_argument("--out", help="report directory (default DATA/reports)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="compare baselines and checkpoints")
    s.add_argument("--data", required=True)
    s.add_argument(
        "--models", nargs="+", default=[",".join(BASELINES)],
        help=f"baseline names ({', '.join(BASELINES)}) and/or checkpoint paths, space or comma separated",
    )
    s.add_argument("--split", choices=SPLITS, default="holdout")
    s.add_argument("--out", help="report directory (default DATA/reports)")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("predict", help="rank next cities for one trip")
    s.add_argument("--model", required=True)
    s.add_argument("--trip", required=True, help="JSON array of checkins, last object is the target context")
    s.add_argument("--top", type=int, default=4)
    s.add_argument("--data", help="prepared data directory (default: from the run manifest)")
    s.add_argument("--out", help="manifest directory (default: the checkpoint's directory)")
    s.set_defaults(func=cmd_predict)
    return p


def thread_cap() -> int:
    """Worker cap from TRIPRANK_THREADS; 1 by default so runs are reproducible."""
    raw = os.environ.get("TRIPRANK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SchemaError(f"TRIPRANK_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise SchemaError("TRIPRANK_THREADS must be >= 1")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=thread_cap()):
            return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
