"""Conservative distribution-correction objective and its alternating training loop.

The critic ``v(s, a)`` descends and the recommender ascends on

    log mean_b exp(v(s_b, a_b) - gamma * v(s'_b, a'_b)) - (1 - gamma) mean_b v(s0_b, a0_b)

where ``a'`` and ``a0`` are Gumbel-Softmax samples from the current policy.
The recommender additionally pays ``delta * sum_i G_i (theta_i - theta'_i)^2``,
a diagonal-Fisher quadratic standing in for the KL between consecutive
policies.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from dicerec import diffcore as dc
from dicerec.datasets import SplitSet, TuplePool, sample_batch
from dicerec.diffcore import Node, ParamStore
from dicerec.models import ModelConfig, PolicyModel, gumbel_noise, gumbel_softmax_sample
from dicerec.rng import Streams

log = logging.getLogger(__name__)

RESIDUAL_CLAMP = 20.0


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, breakdown: LossBreakdown | None = None):
        super().__init__(message if breakdown is None else f"{message}: {breakdown.as_dict()}")
        self.breakdown = breakdown


@dataclass
class LossBreakdown:
    j_log: float
    j_linear: float
    r_kl: float
    residual_min: float = math.nan
    residual_mean: float = math.nan
    residual_max: float = math.nan
    clamp_count: int = 0

    @property
    def critic_objective(self) -> float:
        return self.j_log - self.j_linear

    @property
    def actor_objective(self) -> float:
        return self.j_log - self.j_linear - self.r_kl

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.j_log, self.j_linear, self.r_kl))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["critic_objective"] = self.critic_objective
        d["actor_objective"] = self.actor_objective
        return d

    @classmethod
    def average(cls, items: list[LossBreakdown]) -> LossBreakdown:
        return cls(
            j_log=float(np.mean([b.j_log for b in items])),
            j_linear=float(np.mean([b.j_linear for b in items])),
            r_kl=float(np.mean([b.r_kl for b in items])),
            residual_min=float(np.min([b.residual_min for b in items])),
            residual_mean=float(np.mean([b.residual_mean for b in items])),
            residual_max=float(np.max([b.residual_max for b in items])),
            clamp_count=int(np.sum([b.clamp_count for b in items])),
        )


@dataclass
class FisherDiag:
    """Diagonal empirical Fisher information laid out like a flattened :class:`ParamStore`."""

    values: np.ndarray
    damping: float = 1e-8

    def __len__(self) -> int:
        return int(self.values.size)


# ---------------------------------------------------------------------------
# objective terms


def bellman_residual(v_sa, v_next, gamma: float):
    """Temporal difference ``v(s, a) - gamma * v(s', a')``; accepts nodes or numbers."""
    if isinstance(v_sa, Node) or isinstance(v_next, Node):
        return dc._lift(v_sa) - dc.scale(dc._lift(v_next), gamma)
    return np.asarray(v_sa, dtype=np.float64) - gamma * np.asarray(v_next, dtype=np.float64)


def j_log(residuals: Node) -> Node:
    """Log-mean-exp over a batch of Bellman residuals."""
    n = residuals.shape[-1]
    if n < 1:
        raise ValueError("j_log needs at least one residual")
    return dc.logmeanexp(residuals)


def j_linear(v0: Node, gamma: float) -> Node:
    return dc.scale(dc.mean_axis(v0), 1.0 - gamma)


def log_prob(logits: Node, actions: np.ndarray) -> Node:
    """Per-row ``log softmax(logits)[action]`` with 0-based column indices."""
    onehot = np.zeros(logits.shape)
    onehot[np.arange(logits.shape[0]), actions] = 1.0
    return dc.sum_axis(logits * dc.constant(onehot), axis=-1) - dc.logsumexp(logits)


def fisher_diag(store: ParamStore, logits_fn: Callable[[int], Node], num_states: int,
                rng: np.random.Generator, damping: float = 1e-8) -> FisherDiag:
    """Average over states of squared score-function gradients, plus ``damping``.

    ``logits_fn(i)`` builds the (1, N) logit row for state ``i``; an action is
    drawn from its softmax and the gradient of its log-probability with
    respect to every parameter in ``store`` is squared and accumulated.
    """
    acc = np.zeros(store.size())
    for i in range(num_states):
        logits = logits_fn(i)
        p = dc._softmax(logits.value[0])
        if not np.all(np.isfinite(p)):
            raise TrainingDiverged("non-finite policy while estimating the Fisher diagonal")
        a = int(rng.choice(p.size, p=p))
        lp = log_prob(logits, np.array([a]))
        dc.backward(dc.sum_axis(lp))
        acc += store.flat_grad() ** 2
    store.zero_grad()
    return FisherDiag(acc / max(num_states, 1) + damping, damping)


def model_fisher(model: PolicyModel, windows: np.ndarray, rng: np.random.Generator) -> FisherDiag:
    c = model.config
    windows = windows[: c.fisher_samples]
    return fisher_diag(model.actor_params,
                       lambda i: model.policy_logits(model.encode(windows[i:i + 1])),
                       windows.shape[0], rng, c.fisher_damping)


def kl_penalty(dtheta: np.ndarray, fisher: FisherDiag | np.ndarray, delta: float) -> float:
    """``delta * sum_i G_i * dtheta_i^2``."""
    g = fisher.values if isinstance(fisher, FisherDiag) else np.asarray(fisher, dtype=np.float64)
    dtheta = np.asarray(dtheta, dtype=np.float64)
    if g.shape != dtheta.shape:
        raise dc.ShapeError("kl_penalty", dtheta.shape, g.shape)
    return float(delta * np.sum(g * dtheta * dtheta))


def kl_penalty_node(store: ParamStore, fisher: FisherDiag, delta: float) -> Node:
    """Differentiable version of :func:`kl_penalty` against ``store.snapshot``."""
    if store.snapshot is None:
        raise RuntimeError("KL penalty needs a parameter snapshot")
    per_param = store.unflatten(fisher.values)
    terms = []
    for name, node in store.items():
        diff = node - dc.constant(store.snapshot[name])
        terms.append(dc.sum_axis(diff * diff * dc.constant(per_param[name])))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return dc.scale(total, delta)


@dataclass
class ObjectiveGraph:
    actor_objective: Node
    j_log: Node
    j_linear: Node
    r_kl: Node | None
    residuals: Node
    clamp_count: int
    hard_a0: np.ndarray
    hard_next: np.ndarray

    def breakdown(self) -> LossBreakdown:
        r = self.residuals.value
        return LossBreakdown(
            j_log=float(self.j_log.value),
            j_linear=float(self.j_linear.value),
            r_kl=float(self.r_kl.value) if self.r_kl is not None else 0.0,
            residual_min=float(np.min(r)), residual_mean=float(np.mean(r)), residual_max=float(np.max(r)),
            clamp_count=self.clamp_count,
        )


def build_objective(model: PolicyModel, batch: TuplePool, gamma: float, delta: float,
                    noise_s0: np.ndarray, noise_next: np.ndarray,
                    fisher: FisherDiag | None = None) -> ObjectiveGraph:
    """Assemble the full objective graph for one batch with fixed Gumbel noise."""
    c = model.config
    B = len(batch)
    shared_start = bool(np.all(batch.s0 == batch.s0[0]))
    if shared_start:
        # every episode starts from the same window: encode it once and broadcast
        n0 = 1
        encoded = model.encode(np.concatenate([batch.s0[:1], batch.s, batch.s_next], axis=0))
    else:
        n0 = B
        encoded = model.encode(np.concatenate([batch.s0, batch.s, batch.s_next], axis=0))
    s_next = dc.slice_axis(encoded, 0, n0 + B, n0 + 2 * B)
    logits = model.policy_logits(dc.concat([dc.slice_axis(encoded, 0, 0, n0), s_next], axis=0))
    if shared_start:
        broadcast = np.concatenate([np.zeros(B, dtype=np.int64), np.arange(1, B + 1)])
        encoded = dc.row_select(encoded, np.concatenate([broadcast[:B], np.arange(1, 2 * B + 1)]))
        logits = dc.row_select(logits, broadcast)
    states = encoded
    y, hard = gumbel_softmax_sample(logits, c.gumbel_temperature, noise=np.concatenate([noise_s0, noise_next]))
    actions = dc.concat([model.soft_action_embedding(dc.slice_axis(y, 0, 0, B)),
                         model.action_embedding(batch.action),
                         model.soft_action_embedding(dc.slice_axis(y, 0, B, 2 * B))], axis=0)
    values = model.critic_value(states, actions)
    v0 = dc.slice_axis(values, 0, 0, B)
    v_sa = dc.slice_axis(values, 0, B, 2 * B)
    v_next = dc.slice_axis(values, 0, 2 * B, 3 * B)
    residuals = bellman_residual(v_sa, v_next, gamma)
    clamps = 0
    if not np.all(np.isfinite(residuals.value)):
        clamps = int(np.sum(~np.isfinite(residuals.value)))
        residuals = dc.clip(residuals, -RESIDUAL_CLAMP, RESIDUAL_CLAMP)
    jl = j_log(residuals)
    jn = j_linear(v0, gamma)
    objective = jl - jn
    r_kl = None
    if delta > 0 and fisher is not None:
        r_kl = kl_penalty_node(model.actor_params, fisher, delta)
        objective = objective - r_kl
    return ObjectiveGraph(objective, jl, jn, r_kl, residuals, clamps, hard[:B] + 1, hard[B:] + 1)


def train_step(batch: TuplePool, model: PolicyModel, gamma: float, delta: float,
               lr_critic: float, lr_actor: float, streams: Streams,
               critic_opt=None, actor_opt=None) -> LossBreakdown:
    """One alternating update: critic descends, recommender ascends.

    The snapshot ``theta'`` holds the recommender parameters from before the
    previous update, so the penalty measures the last consecutive move. It is
    created on the first call. Without explicit optimizers both groups take
    plain gradient steps at their learning rates.
    """
    theta = model.actor_params
    if theta.snapshot is None:
        dc.snapshot_params(theta)
    B, N = len(batch), model.num_items
    noise_s0 = gumbel_noise(streams.gumbel, (B, N))
    noise_next = gumbel_noise(streams.gumbel, (B, N))
    fisher = model_fisher(model, batch.s, streams.fisher) if delta > 0 else None
    graph = build_objective(model, batch, gamma, delta, noise_s0, noise_next, fisher)
    breakdown = graph.breakdown()
    if not breakdown.is_finite():
        raise TrainingDiverged("non-finite objective", breakdown)
    dc.backward(graph.actor_objective)
    before = theta.values()
    (critic_opt or dc.SGD(lr_critic)).step(model.critic_params, ascent=False)
    (actor_opt or dc.SGD(lr_actor)).step(theta, ascent=True)
    theta.snapshot = before
    return breakdown


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: PolicyModel
    history: list[dict] = field(default_factory=list)
    best_params: dict[str, np.ndarray] | None = None
    best_epoch: int = 0
    best_score: float = -math.inf


StepFn = Callable[[TuplePool, PolicyModel, Streams], LossBreakdown]
EvalFn = Callable[[PolicyModel, int], dict]


def run_epochs(model: PolicyModel, pool: TuplePool, config: ModelConfig, streams: Streams, step: StepFn,
               evaluate: EvalFn | None = None, select_key: str = "click_H@10",
               weights: np.ndarray | None = None, on_record: Callable[[dict], None] | None = None,
               label: str = "ours") -> TrainResult:
    """Generic epoch loop: ``len(pool) // B`` sampled batches per epoch, then an evaluation callback.

    The parameters with the best ``select_key`` seen by the callback are kept
    in ``best_params``.
    """
    result = TrainResult(model)
    if evaluate is not None and config.epochs == 0:
        result.best_params = model.params.values()
    steps = max(1, len(pool) // config.batch_size)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        parts = [step(sample_batch(pool, config.batch_size, streams.data, weights), model, streams)
                 for _ in range(steps)]
        loss = LossBreakdown.average(parts)
        record = {"model": label, "epoch": epoch, "split": "train", **loss.as_dict()}
        if evaluate is not None:
            metrics = evaluate(model, epoch)
            record["split"] = metrics.pop("split", "validation")
            record.update(metrics)
            score = metrics.get(select_key, -math.inf)
            if score > result.best_score:
                result.best_score, result.best_epoch = score, epoch
                result.best_params = model.params.values()
        record["seconds"] = time.perf_counter() - t0
        log.info("%s epoch %d: %s", label, epoch, {k: record[k] for k in ("j_log", "j_linear", "r_kl") if k in record})
        result.history.append(record)
        if on_record is not None:
            on_record(record)
    return result


def train(config: ModelConfig, splits: SplitSet, seed: int = 0, evaluate: EvalFn | None = None,
          on_record: Callable[[dict], None] | None = None, model: PolicyModel | None = None) -> TrainResult:
    """Train critic and recommender jointly on the training split."""
    streams = Streams(seed)
    if model is None:
        model = PolicyModel(config, splits.num_items, streams.init)
    pool = splits.pool("train", config.window)
    critic_opt = dc.make_optimizer(config.optimizer, config.lr_critic)
    actor_opt = dc.make_optimizer(config.optimizer, config.lr_actor)

    def step(batch, m, s):
        return train_step(batch, m, config.gamma, config.delta, config.lr_critic, config.lr_actor, s,
                          critic_opt, actor_opt)

    return run_epochs(model, pool, config, streams, step, evaluate, on_record=on_record, label="ours")
