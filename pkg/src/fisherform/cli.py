"""Command line: ``fisherform {train,score,roc,perturb,experiment}``.

Every command prints a JSON status object on stdout and writes its
artifacts as plain CSV (or FGN model files for ``train``).  Diagnostics go
to stderr; a failing command exits with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import calib
from .metrics import DEFAULT_PASSES, FisherSettings, MetricKind, score_batch
from .netcore import DropoutConfig, NetworkSpec, forward, load_model, save_model
from .scenarios import (
    Dataset,
    SplitSpec,
    invert_dataset,
    load_csv,
    load_idx,
    noise_dataset,
    synth_blobs,
    threshold_split,
    write_csv,
)
from .train import (
    OPTIMIZERS,
    EnsembleConfig,
    TrainConfig,
    evaluate_accuracy,
    train_classifier,
    train_ensemble,
)

SCORE_HEADER = ["id", "metric", "raw", "normalized", "pred", "label"]
SCENARIOS = ("noise_sweep", "channel_invert", "threshold_split", "auc_evolution")


class CommandError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


# --------------------------------------------------------------------------
# model file naming


def member_path(model: Path, k: int) -> Path:
    return model.with_name(f"{model.stem}.member{k}{model.suffix}")


def snapshot_path(model: Path, epoch: int) -> Path:
    return model.with_name(f"{model.stem}.epoch{epoch:03d}{model.suffix}")


def load_models(model: Path, ensemble: int = 0, epoch: int | None = None):
    """Primary model plus ensemble members (``ensemble`` of them, possibly none)."""
    def pick(p: Path) -> Path:
        return snapshot_path(p, epoch) if epoch is not None else p

    members = []
    for k in range(ensemble):
        path = pick(member_path(model, k))
        if not path.exists():
            raise CommandError(f"missing ensemble member {path}")
        members.append(load_model(path))
    primary_path = pick(model)
    if primary_path.exists():
        primary = load_model(primary_path)
    elif members:
        primary = members[0]
    else:
        raise CommandError(f"model file {primary_path} not found")
    return primary, members


# --------------------------------------------------------------------------
# data


def parse_layout(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.lower().split("x")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("layout must look like HxWxC, e.g. 28x28x1")
    return parts[0], parts[1], parts[2]


def load_dataset(
    data: str,
    fmt: str = "csv",
    labels: str | None = None,
    label_column: str = "label",
    classes: int | None = None,
    image: bool = False,
    blob_dim: int = 2,
    per_class: int = 200,
    spread: float = 1.0,
    seed: int = 0,
) -> Dataset:
    if data == "blobs":
        if classes is None:
            raise CommandError("blobs need a class count")
        return synth_blobs(classes, per_class, blob_dim, seed, spread)
    if fmt == "idx":
        if not labels:
            raise CommandError("--format idx needs --labels")
        return load_idx(data, labels, classes or 10)
    ds = load_csv(data, label_column, classes)
    if image:
        ds = Dataset(ds.inputs, ds.labels, ds.class_count, ds.feature_names, True)
    return ds


def dataset_from_args(args, spec: NetworkSpec | None = None) -> Dataset:
    classes = args.classes
    if classes is None and spec is not None:
        classes = spec.class_count
    ds = load_dataset(
        args.data,
        args.format,
        args.labels,
        args.label_column,
        classes,
        args.image,
        spec.input_width if spec is not None else 2,
        args.per_class,
        args.spread,
        args.seed,
    )
    if getattr(args, "limit", None):
        ds = ds.subset(slice(0, args.limit))
    return ds


def dataset_from_config(cfg: dict, spec: NetworkSpec) -> Dataset:
    fmt = cfg.get("format", "csv")
    if fmt == "blobs":
        ds = synth_blobs(
            spec.class_count,
            int(cfg.get("per_class", 200)),
            spec.input_width,
            int(cfg.get("seed", 0)),
            float(cfg.get("spread", 1.0)),
        )
    elif fmt == "idx":
        ds = load_idx(cfg["images"], cfg["labels"], spec.class_count)
    else:
        ds = load_dataset(cfg["path"], "csv", None, cfg.get("label_column", "label"), spec.class_count, cfg.get("image", False))
    if cfg.get("limit"):
        ds = ds.subset(slice(0, int(cfg["limit"])))
    return ds


# --------------------------------------------------------------------------
# score tables


@dataclass(frozen=True)
class ScoreRow:
    id: int
    metric: MetricKind
    raw: float
    normalized: float | None
    pred: int
    label: int | None


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_score_csv(path, rows: Sequence[ScoreRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in rows:
            w.writerow([r.id, r.metric.value, _fmt(r.raw), _fmt(r.normalized), r.pred, "" if r.label is None else r.label])


def read_score_csv(path) -> list[ScoreRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != SCORE_HEADER:
            raise CommandError(f"{path}: not a score table (header {reader.fieldnames})")
        for r in reader:
            rows.append(ScoreRow(
                int(r["id"]),
                MetricKind(r["metric"]),
                float(r["raw"]),
                float(r["normalized"]) if r["normalized"] else None,
                int(r["pred"]),
                int(r["label"]) if r["label"] else None,
            ))
    return rows


def renormalize(rows: Sequence[ScoreRow], refs: dict[MetricKind, calib.ReferenceSet]) -> list[ScoreRow]:
    out = []
    for r in rows:
        if r.metric not in refs:
            raise CommandError(f"reference set has no scores for metric {r.metric.value}")
        out.append(ScoreRow(r.id, r.metric, r.raw, calib.rank_normalize(r.raw, refs[r.metric]), r.pred, r.label))
    return out


@dataclass
class Scorer:
    """Everything needed to turn inputs into per-metric raw scores."""

    spec: NetworkSpec
    params: np.ndarray
    members: list
    metrics: list[MetricKind]
    settings: FisherSettings
    dropout: DropoutConfig
    passes: int

    def __post_init__(self):
        if MetricKind.ENSEMBLE_ENTROPY in self.metrics and len(self.members) < 2:
            raise CommandError("ensemble_entropy needs --ensemble N with N >= 2 member models")

    def raw_scores(self, X: np.ndarray) -> dict[MetricKind, np.ndarray]:
        return {
            m: score_batch(
                m, self.spec, self.params, X,
                settings=self.settings, dropout=self.dropout, passes=self.passes, members=self.members,
            )
            for m in self.metrics
        }

    def table(self, data: Dataset, refs=None, raw=None) -> list[ScoreRow]:
        raw = self.raw_scores(data.inputs) if raw is None else raw
        pred = np.argmax(forward(self.spec, self.params, data.inputs), axis=1)
        rows = []
        for m in self.metrics:
            if refs is not None and m not in refs:
                raise CommandError(f"reference set has no scores for metric {m.value}")
            norm = calib.rank_normalize(raw[m], refs[m]) if refs is not None else [None] * len(data)
            for i in range(len(data)):
                rows.append(ScoreRow(i, m, float(raw[m][i]), None if norm[i] is None else float(norm[i]),
                                     int(pred[i]), int(data.labels[i])))
        return rows


def scorer_from(model: Path, ensemble: int, metrics, settings, dropout, passes, epoch=None) -> Scorer:
    (spec, params), members = load_models(model, ensemble, epoch)
    return Scorer(spec, params, members, list(metrics), settings, dropout, passes)


# --------------------------------------------------------------------------
# commands


def _emit(status: dict) -> None:
    print(json.dumps(status, sort_keys=True))


def cmd_train(args) -> dict:
    spec = NetworkSpec.from_arch(args.arch)
    data = dataset_from_args(args, spec)
    dropout = DropoutConfig.parse(args.dropout, args.seed) if args.dropout else None
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        seed=args.seed,
        dropout=dropout,
        balance_classes=args.balance,
        snapshot_every_epoch=args.snapshots,
    )
    out = Path(args.out)
    written = []
    if args.ensemble:
        results = train_ensemble(spec, data, cfg, EnsembleConfig(args.ensemble, args.seed))
        targets = [member_path(out, k) for k in range(args.ensemble)]
    else:
        results = [train_classifier(spec, data, cfg)]
        targets = [out]
    accuracies = []
    for result, target in zip(results, targets):
        save_model(spec, result.params, target)
        written.append(str(target))
        for epoch, snap in enumerate(result.snapshots, start=1):
            save_model(spec, snap, snapshot_path(target, epoch))
            written.append(str(snapshot_path(target, epoch)))
        accuracies.append(evaluate_accuracy(spec, result.params, data))
    return {
        "command": "train",
        "models": written,
        "accuracy": accuracies[0] if len(accuracies) == 1 else accuracies,
        "final_loss": [r.epoch_losses[-1] if r.epoch_losses else None for r in results],
    }


def _settings(args) -> FisherSettings:
    return FisherSettings(args.direction, args.fd_step)


def cmd_score(args) -> dict:
    metrics = MetricKind.parse_list(args.metric)
    scorer = scorer_from(
        Path(args.model), args.ensemble, metrics, _settings(args),
        DropoutConfig.parse(args.dropout, args.seed), args.passes,
    )
    data = dataset_from_args(args, scorer.spec)
    refs = calib.load_reference_csv(args.reference) if args.reference else None
    rows = scorer.table(data, refs)
    write_score_csv(args.out, rows)
    return {"command": "score", "out": args.out, "rows": len(rows), "metrics": [m.value for m in metrics]}


def _column(rows: Sequence[ScoreRow], metric: MetricKind, column: str) -> np.ndarray:
    vals = [getattr(r, column) for r in rows if r.metric is metric]
    if any(v is None for v in vals):
        raise CommandError(f"column {column} is empty for metric {metric.value}")
    return np.asarray(vals, dtype=np.float64)


def cmd_roc(args) -> dict:
    metric = MetricKind(args.metric)
    pos = _column(read_score_csv(args.pos), metric, args.column)
    neg = _column(read_score_csv(args.neg), metric, args.column)
    if pos.size == 0 or neg.size == 0:
        raise CommandError(f"no {metric.value} scores on the {'positive' if pos.size == 0 else 'negative'} side")
    curve = calib.roc(pos, neg)
    calib.write_roc_csv(args.out, curve)
    return {"command": "roc", "out": args.out, "auc": curve.auc, "metric": metric.value}


def cmd_perturb(args) -> dict:
    data = dataset_from_args(args)
    if args.mode == "noise":
        out = noise_dataset(data, args.lam, args.seed, clip=False if args.no_clip else None)
    else:
        if args.layout is None:
            raise CommandError("--mode invert needs --layout HxWxC")
        out = invert_dataset(data, args.layout, args.channel)
    write_csv(args.out, out, args.label_column)
    return {"command": "perturb", "out": args.out, "rows": len(out), "mode": args.mode}


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    scenario: str
    model: str
    data: dict
    metrics: list[MetricKind]
    ensemble: int = 0
    passes: int = DEFAULT_PASSES
    dropout: str = "bernoulli:0.5"
    seed: int = 0
    direction: str = "unit_norm"
    fd_step: float = 1e-3
    reference: str | None = None
    lambdas: list[float] | None = None
    layout: tuple[int, int, int] | None = None
    channel: int | None = None
    split: SplitSpec | None = None
    epochs: list[int] | None = None

    @classmethod
    def from_dict(cls, raw: dict, base: Path | None = None) -> "ExperimentConfig":
        raw = dict(raw)
        scenario = raw.get("scenario")
        if scenario not in SCENARIOS:
            raise CommandError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
        for key in ("model", "data", "metrics"):
            if key not in raw:
                raise CommandError(f"experiment config lacks {key!r}")
        metrics = [MetricKind(m) for m in raw.pop("metrics")]
        split = raw.pop("split", None)
        layout = raw.pop("layout", None)
        cfg = cls(
            metrics=metrics,
            split=SplitSpec(int(split["feature_index"]), float(split["threshold"]), split.get("train_side", "below"))
            if split else None,
            layout=tuple(int(v) for v in layout) if layout else None,
            **raw,
        )
        if base is not None:
            cfg.resolve_paths(base)
        cfg.check()
        return cfg

    def resolve_paths(self, base: Path) -> None:
        def fix(p):
            return p if p is None or Path(p).is_absolute() else str(base / p)

        self.model = fix(self.model)
        if self.reference not in (None, "clean"):
            self.reference = fix(self.reference)
        for key in ("path", "images", "labels"):
            if key in self.data:
                self.data[key] = fix(self.data[key])

    def check(self) -> None:
        need = {
            "noise_sweep": ("lambdas", "reference"),
            "channel_invert": ("layout", "channel"),
            "threshold_split": ("split",),
            "auc_evolution": ("split", "epochs"),
        }[self.scenario]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise CommandError(f"{self.scenario} config lacks {', '.join(missing)}")

    def scorer(self, epoch: int | None = None) -> Scorer:
        return scorer_from(
            Path(self.model), self.ensemble, self.metrics, FisherSettings(self.direction, self.fd_step),
            DropoutConfig.parse(self.dropout, self.seed), self.passes, epoch,
        )


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _auc_rows(scorer: Scorer, pos: Dataset, neg: Dataset) -> list[tuple[str, float]]:
    pos_raw = scorer.raw_scores(pos.inputs)
    neg_raw = scorer.raw_scores(neg.inputs)
    return [(m.value, calib.roc(pos_raw[m], neg_raw[m]).auc) for m in scorer.metrics]


def run_noise_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    scorer = cfg.scorer()
    data = dataset_from_config(cfg.data, scorer.spec)
    if cfg.reference == "clean":
        clean = scorer.raw_scores(data.inputs)
        refs = {m: calib.ReferenceSet(m, clean[m], "clean") for m in cfg.metrics}
    else:
        refs = calib.load_reference_csv(cfg.reference)
    detail, summary = [], []
    for lam in cfg.lambdas:
        noisy = noise_dataset(data, float(lam), cfg.seed)
        rows = scorer.table(noisy, refs)
        correct = {r.id: int(r.pred == r.label) for r in rows}
        for r in rows:
            detail.append((float(lam), r.id, r.metric.value, r.raw, r.normalized, r.pred, r.label, correct[r.id]))
        acc = float(np.mean(list(correct.values())))
        for m in cfg.metrics:
            sel = [r for r in rows if r.metric is m]
            summary.append((float(lam), m.value, float(np.mean([r.raw for r in sel])),
                            float(np.mean([r.normalized for r in sel])), acc))
    _write_rows(out / "noise_sweep_points.csv",
                ["lambda", "id", "metric", "raw", "normalized", "pred", "label", "correct"], detail)
    _write_rows(out / "noise_sweep.csv", ["lambda", "metric", "mean_raw", "mean_normalized", "accuracy"], summary)
    return {"files": ["noise_sweep.csv", "noise_sweep_points.csv"]}


def run_channel_invert(cfg: ExperimentConfig, out: Path) -> dict:
    scorer = cfg.scorer()
    data = dataset_from_config(cfg.data, scorer.spec)
    inverted = invert_dataset(data, cfg.layout, cfg.channel)
    rows = _auc_rows(scorer, inverted, data)
    _write_rows(out / "auc.csv", ["metric", "auc"], rows)
    return {
        "files": ["auc.csv"],
        "accuracy_clean": evaluate_accuracy(scorer.spec, scorer.params, data),
        "accuracy_modified": evaluate_accuracy(scorer.spec, scorer.params, inverted),
        "auc": dict(rows),
    }


def _split_sides(cfg: ExperimentConfig, data: Dataset) -> tuple[Dataset, Dataset]:
    train_side, held_out = threshold_split(data, cfg.split)
    if len(train_side) == 0 or len(held_out) == 0:
        raise CommandError("threshold split left one side empty; no AUC can be computed")
    return train_side, held_out


def run_threshold_split(cfg: ExperimentConfig, out: Path) -> dict:
    scorer = cfg.scorer()
    train_side, held_out = _split_sides(cfg, dataset_from_config(cfg.data, scorer.spec))
    rows = _auc_rows(scorer, held_out, train_side)
    _write_rows(out / "auc.csv", ["metric", "auc"], rows)
    return {
        "files": ["auc.csv"],
        "accuracy_train_side": evaluate_accuracy(scorer.spec, scorer.params, train_side),
        "accuracy_held_out": evaluate_accuracy(scorer.spec, scorer.params, held_out),
        "auc": dict(rows),
    }


def run_auc_evolution(cfg: ExperimentConfig, out: Path) -> dict:
    model = Path(cfg.model)
    probe = member_path(model, 0) if cfg.ensemble else model
    missing = [e for e in cfg.epochs if not snapshot_path(probe, e).exists() and not snapshot_path(model, e).exists()]
    if missing:
        raise CommandError(f"missing snapshots for epochs {missing} (expected e.g. {snapshot_path(probe, missing[0])})")
    rows = []
    data = None
    for epoch in cfg.epochs:
        scorer = cfg.scorer(epoch)
        if data is None:
            data = dataset_from_config(cfg.data, scorer.spec)
            train_side, held_out = _split_sides(cfg, data)
        acc = evaluate_accuracy(scorer.spec, scorer.params, held_out)
        for metric, auc in _auc_rows(scorer, held_out, train_side):
            rows.append((epoch, metric, auc, acc))
    _write_rows(out / "auc_evolution.csv", ["epoch", "metric", "auc", "accuracy"], rows)
    return {"files": ["auc_evolution.csv"], "rows": len(rows)}


def run_experiment(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    runner = {
        "noise_sweep": run_noise_sweep,
        "channel_invert": run_channel_invert,
        "threshold_split": run_threshold_split,
        "auc_evolution": run_auc_evolution,
    }[cfg.scenario]
    status = runner(cfg, out)
    status.update(command="experiment", scenario=cfg.scenario, out=str(out))
    return status


def cmd_experiment(args) -> dict:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON: {exc}") from exc
    cfg = ExperimentConfig.from_dict(raw, base=path.parent)
    return run_experiment(cfg, Path(args.out))


# --------------------------------------------------------------------------
# argument parsing


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="data file (IDX images or CSV) or 'blobs'")
    p.add_argument("--format", choices=("idx", "csv"), default="csv")
    p.add_argument("--labels", help="IDX label file (with --format idx)")
    p.add_argument("--label-column", default="label")
    p.add_argument("--classes", type=int, help="class count (default: from the model or the labels)")
    p.add_argument("--image", action="store_true", help="treat CSV features as [0,1] pixel values")
    p.add_argument("--per-class", type=int, default=200, help="blobs: points per class")
    p.add_argument("--spread", type=float, default=1.0, help="blobs: cluster standard deviation")
    p.add_argument("--limit", type=int, help="use only the first N rows")


def _add_score_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--passes", type=int, default=DEFAULT_PASSES)
    p.add_argument("--dropout", default="bernoulli:0.5", help="bernoulli:RATE or gaussian:RATE")
    p.add_argument("--direction", choices=("unit_norm", "raw"), default="unit_norm")
    p.add_argument("--fd-step", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fisherform", description="Per-datapoint uncertainty scores, ROC analysis and experiment scenarios."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier or an ensemble")
    p.add_argument("--arch", required=True, help="layer widths, e.g. 784-128-10")
    _add_data_flags(p)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="adam")
    p.add_argument("--dropout", help="train with dropout, e.g. bernoulli:0.5")
    p.add_argument("--balance", action="store_true", help="resample classes to equal frequency")
    p.add_argument("--snapshots", action="store_true", help="also save a model after every epoch")
    p.add_argument("--ensemble", type=int, default=0, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="per-datapoint uncertainty scores")
    p.add_argument("--model", required=True)
    p.add_argument("--ensemble", type=int, default=0, metavar="N")
    _add_data_flags(p)
    p.add_argument("--metric", default="fisher,entropy")
    _add_score_flags(p)
    p.add_argument("--reference", help="reference scores (metric,score CSV or a score table)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("roc", help="ROC curve and AUC from two score tables")
    p.add_argument("--pos", required=True, help="scores of unusual inputs")
    p.add_argument("--neg", required=True, help="scores of normal inputs")
    p.add_argument("--metric", required=True)
    p.add_argument("--column", choices=("raw", "normalized"), default="raw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("perturb", help="write a noisy or channel-inverted copy of a dataset")
    _add_data_flags(p)
    p.add_argument("--mode", choices=("noise", "invert"), required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--layout", type=parse_layout)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("experiment", help="run a scenario from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (CommandError, ValueError, KeyError, OSError, ArithmeticError) as exc:
        print(f"fisherform {args.command}: {exc}", file=sys.stderr)
        return 1
    _emit(status)
    return 0


if __name__ == "__main__":
    sys.exit(main())
