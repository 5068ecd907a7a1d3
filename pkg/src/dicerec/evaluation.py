"""Offline top-k evaluation, the sustained-exceed efficiency counter and the supervised baselines."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from dicerec import diffcore as dc
from dicerec.datasets import Feedback, SplitSet, TuplePool
from dicerec.models import ModelConfig, PolicyModel
from dicerec.objective import EvalFn, LossBreakdown, TrainResult, log_prob, run_epochs
from dicerec.rng import Streams

KS = (5, 10)


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1-based rank of item ``target`` (ids ``1..N``); ties go to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    return int(ranks_of_targets(scores[None, :], np.array([target]))[0])


def ranks_of_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise :func:`rank_of_target` for a (B, N) score matrix."""
    targets = np.asarray(targets, dtype=np.int64)
    n = scores.shape[1]
    if targets.size and (targets.min() < 1 or targets.max() > n):
        raise IndexError(f"targets must lie in [1, {n}]")
    t = scores[np.arange(scores.shape[0]), targets - 1][:, None]
    ids = np.arange(1, n + 1)[None, :]
    return 1 + np.sum(scores > t, axis=1) + np.sum((scores == t) & (ids < targets[:, None]), axis=1)


def hit_ratio(ranks: Sequence[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if ranks.size else 0.0


def ndcg(ranks: Sequence[int], k: int) -> float:
    """Single-relevant-item NDCG: ``1 / log2(rank + 1)`` inside the top ``k``, else 0."""
    if k < 1:
        raise ValueError("k must be at least 1")
    ranks = np.asarray(ranks, dtype=np.float64)
    if not ranks.size:
        return 0.0
    return float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)))


@dataclass
class MetricsReport:
    model: str
    split: str
    metrics: dict[str, dict[str, float]]
    counts: dict[str, int]

    def flat(self) -> dict[str, float]:
        out = {}
        for fb, values in self.metrics.items():
            for name, v in values.items():
                out[f"{fb}_{name}"] = v
            out[f"{fb}_count"] = self.counts[fb]
        return out

    def table_row(self) -> str:
        cells = [f"{self.metrics[fb][m]:.4f}" for fb in ("click", "purchase") for m in ("H@5", "N@5", "H@10", "N@10")]
        return f"{self.model:<10}" + "".join(f"{c:>9}" for c in cells)


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table: one row per model, H@5 N@5 H@10 N@10 for click then purchase."""
    head = f"{'':<10}" + "".join(f"{'click':>9}" if i == 0 else f"{'':>9}" for i in range(4)) \
        + "".join(f"{'purchase':>9}" if i == 0 else f"{'':>9}" for i in range(4))
    cols = f"{'model':<10}" + "".join(f"{m:>9}" for _ in range(2) for m in ("H@5", "N@5", "H@10", "N@10"))
    return "\n".join([head, cols] + [r.table_row() for r in reports])


def evaluate_pool(model: PolicyModel, pool: TuplePool, name: str = "model", split: str = "validation",
                  ks: Sequence[int] = KS) -> MetricsReport:
    """Rank the logged action of every tuple under plain logits, grouped by feedback type."""
    ranks = ranks_of_targets(model.scores(pool.s), pool.action)
    metrics, counts = {}, {}
    for fb in Feedback:
        sel = ranks[pool.feedback == int(fb)]
        counts[fb.label] = int(sel.size)
        metrics[fb.label] = {}
        for k in ks:
            metrics[fb.label][f"H@{k}"] = hit_ratio(sel, k)
            metrics[fb.label][f"N@{k}"] = ndcg(sel, k)
    return MetricsReport(name, split, metrics, counts)


def evaluate_split(model: PolicyModel, splits: SplitSet, split: str = "validation", name: str = "model",
                   ks: Sequence[int] = KS) -> MetricsReport:
    return evaluate_pool(model, splits.pool(split, model.config.window), name, split, ks)


def overall_hit_ratio(model: PolicyModel, pool: TuplePool, k: int = 10) -> float:
    return hit_ratio(ranks_of_targets(model.scores(pool.s), pool.action), k)


def validation_callback(splits: SplitSet, name: str = "model", split: str = "validation") -> EvalFn:
    def callback(model: PolicyModel, epoch: int) -> dict:
        report = evaluate_split(model, splits, split, name)
        return {"split": split, **report.flat()}
    return callback


# ---------------------------------------------------------------------------
# efficiency


@dataclass
class EfficiencyResult:
    threshold: float
    per_seed: list[int | None] = field(default_factory=list)
    patience: int = 5

    @property
    def reached(self) -> list[int]:
        return [e for e in self.per_seed if e is not None]

    @property
    def mean(self) -> float:
        return float(np.mean(self.reached)) if self.reached else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.reached)) if self.reached else math.nan

    def summary(self) -> str:
        never = len(self.per_seed) - len(self.reached)
        if not self.reached:
            return f"never reached in {never}/{never} seeds"
        tail = f", never reached in {never}/{len(self.per_seed)} seeds" if never else ""
        return f"{self.mean:.2f} (± {self.std:.2f}) epochs over {len(self.reached)} seeds{tail}"


def efficiency_epochs(history: Sequence[float], threshold: float, patience: int = 5) -> int | None:
    """1-based epoch starting the first run of ``patience`` evaluations strictly above ``threshold``."""
    if not len(history):
        raise ValueError("efficiency_epochs needs a non-empty history")
    run = 0
    for i, value in enumerate(history):
        run = run + 1 if value > threshold else 0
        if run >= patience:
            return i - patience + 2
    return None


# ---------------------------------------------------------------------------
# supervised baselines


def cross_entropy_step(lr: float, optimizer: str = "sgd"):
    opt = dc.make_optimizer(optimizer, lr)

    def step(batch: TuplePool, model: PolicyModel, streams: Streams) -> LossBreakdown:
        logits = model.policy_logits(model.encode(batch.s))
        loss = -dc.mean_axis(log_prob(logits, batch.action - 1))
        dc.backward(loss)
        opt.step(model.actor_params, ascent=False)
        value = float(loss.value)
        return LossBreakdown(j_log=value, j_linear=0.0, r_kl=0.0)
    return step


def session_weights(pool: TuplePool) -> np.ndarray:
    """Per-tuple weight ``1 / (tuples in its session)`` so each session carries equal mass."""
    counts = np.bincount(pool.session)
    return 1.0 / counts[pool.session]


def _train_supervised(splits: SplitSet, config: ModelConfig, seed: int, label: str, weights_fn,
                      evaluate: EvalFn | None, on_record) -> TrainResult:
    streams = Streams(seed)
    model = PolicyModel(config, splits.num_items, streams.init)
    pool = splits.pool("train", config.window)
    weights = weights_fn(pool) if weights_fn is not None else None
    return run_epochs(model, pool, config, streams, cross_entropy_step(config.lr_actor, config.optimizer), evaluate,
                      weights=weights, on_record=on_record, label=label)


def train_sl_baseline(splits: SplitSet, config: ModelConfig, seed: int = 0, evaluate: EvalFn | None = None,
                      on_record=None) -> TrainResult:
    """Next-item cross-entropy with every timestep of every session weighted equally."""
    return _train_supervised(splits, config, seed, "sl", None, evaluate, on_record)


def train_bc_baseline(splits: SplitSet, config: ModelConfig, seed: int = 0, evaluate: EvalFn | None = None,
                      on_record=None) -> TrainResult:
    """Next-item cross-entropy with each session weighted equally regardless of its length."""
    return _train_supervised(splits, config, seed, "bc", session_weights, evaluate, on_record)
