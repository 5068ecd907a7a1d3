"""Command-line entry points: preprocess, train, evaluate, efficiency and oracle-check.

Exit codes: 0 success, 1 assertion or training failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import typing
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from dicerec import diffcore as dc
from dicerec import oracle
from dicerec.datasets import (
    Corpus,
    DataError,
    SplitSet,
    filter_corpus,
    group_sessions,
    parse_retailrocket,
    parse_yoochoose,
    read_normalized,
    sessions_to_events,
    split_sessions,
    synth_generate,
    write_normalized,
)
from dicerec.evaluation import (
    EfficiencyResult,
    efficiency_epochs,
    evaluate_split,
    format_table,
    train_bc_baseline,
    train_sl_baseline,
    validation_callback,
)
from dicerec.models import ModelConfig, PolicyModel
from dicerec.objective import TrainingDiverged, train

log = logging.getLogger("dicerec")

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2
FORMATS = ("retailrocket", "yoochoose", "normalized", "synthetic")
MODELS = ("ours", "bc", "sl")
EVENTS_FILE, VOCAB_FILE, SPLITS_FILE = "events.tsv", "vocab.tsv", "splits.json"
METRICS_FILE, CHECKPOINT_FILE, RESOLVED_FILE = "metrics.jsonl", "checkpoint.npz", "config.resolved"


class InputError(Exception):
    """Bad user input: maps to exit code 2."""


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig(ModelConfig):
    """Every model hyperparameter plus data, output and experiment settings."""

    data_dir: str = "data"
    format: str = "normalized"
    seed: int = 0
    out_dir: str = ""
    model: str = "ours"
    no_kl: bool = False
    efficiency_seeds: int = 10
    sl_run: str = ""
    threshold_key: str = "click_H@10"
    patience: int = 5
    sample_sessions: int = 0
    synth_sessions: int = 2000
    synth_items: int = 200
    synth_beta: float = 0.8

    def validate(self) -> None:
        super().validate()
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.efficiency_seeds < 1 or self.patience < 1:
            raise ValueError("efficiency_seeds and patience must be positive")

    def model_config(self) -> ModelConfig:
        d = ModelConfig.from_dict(self.to_dict())
        if self.no_kl:
            d.delta = 0.0
        return d

    def run_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path("runs") / f"{self.model}-{self.backbone}-seed{self.seed}"

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.to_dict().items())


_FIELD_TYPES = typing.get_type_hints(RunConfig)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    return tuple(int(x) for x in text.split(",") if x.strip())


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise InputError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise InputError(f"{source}:{lineno}: {exc}") from exc
    return out


def parse_overrides(tokens: list[str]) -> dict:
    """Turn leftover ``--key value`` tokens into config overrides."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise InputError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if eq:
            i += 1
        elif key in _FIELD_TYPES and _FIELD_TYPES[key] is bool and (i + 1 == len(tokens)
                                                                    or tokens[i + 1].startswith("--")):
            value = "true"
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise InputError(f"missing value for {tok}")
            value = tokens[i + 1]
            i += 2
        if key not in _FIELD_TYPES:
            raise InputError(f"unknown option --{key.replace('_', '-')}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    return out


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        values = parse_config_text(text, str(path))
    values.update(overrides)
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# data directory


def load_splits(data_dir: str | Path) -> SplitSet:
    """Rebuild the train/validation/test split recorded by ``preprocess``."""
    data_dir = Path(data_dir)
    for name in (EVENTS_FILE, VOCAB_FILE, SPLITS_FILE):
        if not (data_dir / name).is_file():
            raise InputError(f"{data_dir}: missing {name}; run preprocess first")
    try:
        corpus = read_normalized(data_dir / EVENTS_FILE, data_dir / VOCAB_FILE)
        manifest = json.loads((data_dir / SPLITS_FILE).read_text(encoding="utf-8"))
    except (DataError, json.JSONDecodeError) as exc:
        raise InputError(str(exc)) from exc
    by_id = {s.session_id: s for s in corpus.sessions}
    parts = {}
    for name in ("train", "validation", "test"):
        try:
            parts[name] = [by_id[sid] for sid in manifest[name]]
        except KeyError as exc:
            raise InputError(f"{data_dir / SPLITS_FILE}: unknown session or split {exc}") from exc
    return SplitSet(parts["train"], parts["validation"], parts["test"], corpus.vocab, int(manifest["seed"]))


def split_manifest(splits: SplitSet, stats: dict) -> dict:
    return {
        "seed": splits.seed,
        "num_items": splits.num_items,
        "counts": {n: len(splits.split(n)) for n in ("train", "validation", "test")},
        "stats": stats,
        "train": [s.session_id for s in splits.train],
        "validation": [s.session_id for s in splits.validation],
        "test": [s.session_id for s in splits.test],
    }


def _read_events(args, stats: Counter):
    fmt = args.format
    if fmt == "synthetic":
        sessions = synth_generate(args.synth_sessions, args.synth_items, args.synth_beta, args.seed)
        return sessions_to_events(sessions)
    if args.input is None:
        raise InputError(f"--input is required for format {fmt}")
    if fmt == "retailrocket":
        return parse_retailrocket(args.input, stats)
    if fmt == "yoochoose":
        if args.buys is None:
            raise InputError("yoochoose needs --buys PATH next to --input CLICKS")
        return parse_yoochoose(args.input, args.buys, stats)
    src = Path(args.input)
    corpus = read_normalized(src / EVENTS_FILE, src / VOCAB_FILE)
    return sessions_to_events(corpus.sessions, corpus.vocab)


def cmd_preprocess(args) -> int:
    stats: Counter = Counter()
    events = _read_events(args, stats)
    groups = group_sessions(events)
    if args.sample_sessions:
        if args.sample_sessions >= len(groups):
            log.warning("--sample-sessions %d >= %d available sessions; keeping all",
                        args.sample_sessions, len(groups))
        else:
            keep = np.sort(np.random.default_rng(args.seed).choice(len(groups), args.sample_sessions, replace=False))
            groups = [groups[i] for i in keep]
    corpus: Corpus = filter_corpus(ev for g in groups for ev in g)
    splits = split_sessions(corpus.sessions, args.seed, corpus.vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_normalized(corpus, out / EVENTS_FILE, out / VOCAB_FILE)
    counts = Counter(fb.label for s in corpus.sessions for fb in s.feedback)
    summary = {"clicks": counts["click"], "purchases": counts["purchase"], "sessions": len(corpus.sessions),
               "items": corpus.num_items, "raw": dict(sorted(stats.items()))}
    (out / SPLITS_FILE).write_text(json.dumps(split_manifest(splits, summary), indent=1) + "\n", encoding="utf-8")
    log.info("clicks=%d purchases=%d sessions=%d items=%d", summary["clicks"], summary["purchases"],
             summary["sessions"], summary["items"])
    print(f"wrote {out / EVENTS_FILE} ({summary['sessions']} sessions, {summary['items']} items, "
          f"{summary['clicks']} clicks, {summary['purchases']} purchases)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training and evaluation


def _append_record(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_training(cfg: RunConfig, splits: SplitSet, run_dir: Path, seed: int | None = None):
    """Train ``cfg.model`` into ``run_dir``: resolved config, records file and best checkpoint."""
    seed = cfg.seed if seed is None else seed
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / RESOLVED_FILE).write_text(cfg.dumps(), encoding="utf-8")
    metrics = run_dir / METRICS_FILE
    metrics.write_text("", encoding="utf-8")
    mc = cfg.model_config()
    evaluate = validation_callback(splits, cfg.model)
    on_record = lambda r: _append_record(metrics, {"seed": seed, **r})  # noqa: E731
    if cfg.model == "ours":
        result = train(mc, splits, seed, evaluate, on_record)
    elif cfg.model == "sl":
        result = train_sl_baseline(splits, mc, seed, evaluate, on_record)
    else:
        result = train_bc_baseline(splits, mc, seed, evaluate, on_record)
    if result.best_params is not None:
        result.model.params.load(result.best_params)
    manifest = {"model": cfg.model, "model_config": mc.to_dict(), "num_items": splits.num_items,
                "data_dir": str(Path(cfg.data_dir).resolve()), "seed": seed, "best_epoch": result.best_epoch}
    dc.save_checkpoint(run_dir / CHECKPOINT_FILE, result.model.params, manifest)
    return result


def cmd_train(args, overrides: dict) -> int:
    cfg = load_run_config(args.config, overrides)
    splits = load_splits(cfg.data_dir)
    run_dir = cfg.run_dir()
    try:
        result = run_training(cfg, splits, run_dir)
    except (TrainingDiverged, dc.GradientError) as exc:
        log.error("training aborted: %s", exc)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"run directory {run_dir} (best epoch {result.best_epoch}, "
          f"{cfg.threshold_key} {result.best_score:.4f})")
    return EXIT_OK


def load_model(checkpoint: str | Path) -> tuple[PolicyModel, dict]:
    path = Path(checkpoint)
    if not path.is_file():
        raise InputError(f"checkpoint {path} does not exist")
    try:
        params, manifest = dc.load_checkpoint(path)
        model = PolicyModel(ModelConfig.from_dict(manifest["model_config"]), int(manifest["num_items"]))
        model.params.load(params)
    except (ValueError, KeyError, dc.ShapeError, OSError) as exc:
        raise InputError(f"{path}: checkpoint does not match its manifest ({exc})") from exc
    return model, manifest


def cmd_evaluate(args) -> int:
    model, manifest = load_model(args.checkpoint)
    splits = load_splits(args.data_dir or manifest["data_dir"])
    if splits.num_items != model.num_items:
        raise InputError(f"checkpoint has {model.num_items} items but data has {splits.num_items}")
    report = evaluate_split(model, splits, args.split, manifest.get("model", "model"))
    print(format_table([report]))
    out = Path(args.checkpoint).parent / f"evaluate-{args.split}.jsonl"
    out.write_text(json.dumps({"model": report.model, "split": args.split, **report.flat()}, sort_keys=True) + "\n",
                   encoding="utf-8")
    print(f"records {out}")
    return EXIT_OK


def read_records(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def sl_threshold(source: str | Path, key: str = "click_H@10") -> float:
    """Best validation value of ``key`` in an SL run directory or records file."""
    source = Path(source)
    path = source / METRICS_FILE if source.is_dir() else source
    if not path.is_file():
        raise InputError(f"no SL records at {path}")
    try:
        values = [r[key] for r in read_records(path) if key in r and r.get("split", "validation") == "validation"]
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: unreadable records ({exc})") from exc
    if not values:
        raise InputError(f"{path}: no validation {key} values to use as threshold")
    return float(max(values))


def run_efficiency(cfg: RunConfig, splits: SplitSet, threshold: float, seeds: list[int], out_dir: Path) -> EfficiencyResult:
    result = EfficiencyResult(threshold, patience=cfg.patience)
    for seed in seeds:
        res = run_training(cfg, splits, out_dir / f"seed{seed}", seed)
        history = [r[cfg.threshold_key] for r in res.history]
        result.per_seed.append(efficiency_epochs(history, threshold, cfg.patience))
    return result


def cmd_efficiency(args, overrides: dict) -> int:
    cfg = load_run_config(args.config, {**overrides, "model": overrides.get("model", "ours")})
    threshold = sl_threshold(args.sl_run, cfg.threshold_key)
    splits = load_splits(cfg.data_dir)
    n = args.seeds if args.seeds is not None else cfg.efficiency_seeds
    out_dir = Path(cfg.out_dir) if cfg.out_dir else Path("runs") / "efficiency"
    seeds = [cfg.seed + k for k in range(n)]
    try:
        result = run_efficiency(cfg, splits, threshold, seeds, out_dir)
    except (TrainingDiverged, dc.GradientError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"threshold {cfg.threshold_key} = {threshold:.4f} (patience {cfg.patience})")
    for seed, e in zip(seeds, result.per_seed):
        print(f"  seed {seed}: {'never' if e is None else e}")
    print(f"{cfg.model}: {result.summary()}")
    summary = {"threshold": threshold, "key": cfg.threshold_key, "patience": cfg.patience, "seeds": seeds,
               "epochs": result.per_seed, "mean": None if math.isnan(result.mean) else result.mean,
               "std": None if math.isnan(result.std) else result.std}
    (out_dir / "efficiency.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    if args.suite is not None:
        try:
            suite = oracle.load_suite(Path(args.suite).read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError) as exc:
            raise InputError(f"cannot read suite {args.suite}: {exc}") from exc
        except (oracle.SuiteFormatError, ValueError) as exc:
            raise InputError(f"corrupted suite {args.suite}: {exc}") from exc
    else:
        suite = oracle.default_suite(args.seed)
    report = oracle.end_to_end_oracle_check(suite, args.seed)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write(path)
    print(report.summary())
    print(f"report {path}")
    if not report.passed:
        print(f"{len(report.failures())} oracle checks failed", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dicerec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="parse, filter and split a raw log")
    p.add_argument("--input")
    p.add_argument("--buys", help="yoochoose buys file")
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-sessions", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synth-sessions", type=int, default=2000)
    p.add_argument("--synth-items", type=int, default=200)
    p.add_argument("--synth-beta", type=float, default=0.8)

    p = sub.add_parser("train", help="train the proposed model or a baseline")
    p.add_argument("--config")
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--backbone", choices=("gru", "cnn"))
    p.add_argument("--no-kl", action="store_true", default=None)
    p.add_argument("--delta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("validation", "test"), default="validation")
    p.add_argument("--data-dir")

    p = sub.add_parser("efficiency", help="epochs until a model stays above the SL threshold")
    p.add_argument("--config")
    p.add_argument("--sl-run", required=True)
    p.add_argument("--seeds", type=int)

    p = sub.add_parser("oracle-check", help="run the tabular oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", help="serialized MDP suite; defaults to the built-in seeded suite")
    p.add_argument("--report", default="oracle-report.jsonl")
    return parser


_NAMED_OVERRIDES = ("model", "backbone", "no_kl", "delta", "epochs", "seed")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("train", "efficiency"):
            overrides = parse_overrides(extra)
            for key in _NAMED_OVERRIDES:
                if getattr(args, key, None) is not None:
                    overrides[key] = getattr(args, key)
            if args.command == "train":
                return cmd_train(args, overrides)
            return cmd_efficiency(args, overrides)
        if extra:
            raise InputError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "preprocess":
            return cmd_preprocess(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        return cmd_oracle_check(args)
    except (InputError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
