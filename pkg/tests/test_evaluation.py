from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicerec import diffcore as dc
from dicerec.datasets import Feedback, Session, SplitSet, filter_corpus, sessions_to_events, split_sessions, \
    synth_generate
from dicerec.evaluation import (
    EfficiencyResult,
    MetricsReport,
    cross_entropy_step,
    efficiency_epochs,
    evaluate_pool,
    evaluate_split,
    format_table,
    hit_ratio,
    ndcg,
    overall_hit_ratio,
    rank_of_target,
    ranks_of_targets,
    session_weights,
    train_bc_baseline,
    train_sl_baseline,
)
from dicerec.models import ModelConfig, PolicyModel
from dicerec.objective import log_prob, run_epochs
from dicerec.rng import Streams
from tests.conftest import tiny_config


class TestRanking:
    def test_examples(self):
        assert rank_of_target([0.1, 5.0, 0.3], 2) == 1
        assert rank_of_target([0.5, 0.9, 0.1], 3) == 3
        flat = np.zeros(6)
        assert rank_of_target(flat, 1) == 1
        assert rank_of_target(flat, 6) == 6

    def test_ties_count_smaller_ids_only(self):
        assert rank_of_target([2.0, 1.0, 2.0, 2.0], 3) == 2
        assert rank_of_target([2.0, 3.0, 2.0, 2.0], 4) == 4

    def test_target_range(self):
        with pytest.raises(IndexError):
            rank_of_target([1.0, 2.0], 3)
        with pytest.raises(IndexError):
            rank_of_target([1.0, 2.0], 0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=2, max_size=12), st.data())
    def test_ranks_form_a_permutation(self, scores, data):
        scores = np.array(scores, dtype=float)
        n = scores.size
        ranks = ranks_of_targets(np.tile(scores, (n, 1)), np.arange(1, n + 1))
        assert sorted(ranks) == list(range(1, n + 1))
        # agrees with a stable sort on (-score, id)
        order = sorted(range(n), key=lambda i: (-scores[i], i))
        target = data.draw(st.integers(1, n))
        assert rank_of_target(scores, target) == order.index(target - 1) + 1

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-20, 20), min_size=2, max_size=10))
    def test_invariant_under_monotone_transform(self, scores):
        # integer scores keep every transformed value exactly representable, so ties survive
        s = np.array(scores, dtype=float)
        for t in range(1, s.size + 1):
            assert rank_of_target(s, t) == rank_of_target(np.exp(s) * 3.0 + 1.0, t) == rank_of_target(s ** 3, t)


class TestMetrics:
    def test_examples(self):
        assert hit_ratio([1, 3, 12], 10) == pytest.approx(2 / 3)
        assert ndcg([1, 3, 12], 10) == pytest.approx(0.5, abs=1e-15)
        assert hit_ratio([11, 20], 10) == ndcg([11, 20], 10) == 0.0
        assert hit_ratio([1, 1, 1], 5) == ndcg([1, 1, 1], 5) == 1.0

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            hit_ratio([1], 0)
        with pytest.raises(ValueError):
            ndcg([1], 0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 30), min_size=1, max_size=40), st.integers(1, 15))
    def test_ndcg_bounded_by_hit_ratio(self, ranks, k):
        h, n = hit_ratio(ranks, k), ndcg(ranks, k)
        assert 0.0 <= n <= h <= 1.0


class _Oracle:
    """Scores the logged action of each pool row highest."""

    def __init__(self, pool, num_items):
        self.pool, self.num_items = pool, num_items

    def scores(self, windows):
        out = np.zeros((len(windows), self.num_items))
        out[np.arange(len(windows)), self.pool.action - 1] = 1.0
        return out


@pytest.fixture(scope="module")
def synth_200():
    sessions = synth_generate(2000, 200, 0.8, seed=0)
    corpus = filter_corpus(sessions_to_events(sessions))
    return split_sessions(corpus.sessions, 0, corpus.vocab)


class TestEvaluate:
    def test_perfect_model(self, small_splits):
        pool = small_splits.pool("validation", 4)
        report = evaluate_pool(_Oracle(pool, small_splits.num_items), pool)
        for fb in ("click", "purchase"):
            if report.counts[fb]:
                assert all(v == 1.0 for v in report.metrics[fb].values())
        assert report.counts["click"] + report.counts["purchase"] == len(pool)

    def test_untrained_model_is_near_chance(self, synth_200):
        assert synth_200.num_items == 200
        pool = synth_200.pool("validation", 10)
        model = PolicyModel(ModelConfig(), 200, np.random.default_rng(0))
        hr = overall_hit_ratio(model, pool)
        se = math.sqrt(0.05 * 0.95 / len(pool))
        assert abs(hr - 0.05) <= 3 * se

    def test_report_invariants_and_read_only(self, small_splits):
        model = PolicyModel(tiny_config(), small_splits.num_items, np.random.default_rng(0))
        before = {k: v.copy() for k, v in model.params.values().items()}
        a = evaluate_split(model, small_splits, "test", name="ours")
        b = evaluate_split(model, small_splits, "test", name="ours")
        assert a == b
        for k, v in model.params.values().items():
            np.testing.assert_array_equal(v, before[k])
        for fb in ("click", "purchase"):
            for k in (5, 10):
                assert 0.0 <= a.metrics[fb][f"N@{k}"] <= a.metrics[fb][f"H@{k}"] <= 1.0
        flat = a.flat()
        assert {"click_H@5", "click_N@10", "purchase_H@10", "click_count"} <= set(flat)

    def test_table_layout(self):
        m = {"H@5": 0.1, "N@5": 0.05, "H@10": 0.2, "N@10": 0.08}
        rows = [MetricsReport(name, "test", {"click": m, "purchase": m}, {"click": 3, "purchase": 1})
                for name in ("sl", "ours")]
        lines = format_table(rows).splitlines()
        assert len(lines) == 4
        assert lines[1].split() == ["model"] + ["H@5", "N@5", "H@10", "N@10"] * 2
        assert lines[3].split() == ["ours", "0.1000", "0.0500", "0.2000", "0.0800"] * 1 + \
            ["0.1000", "0.0500", "0.2000", "0.0800"]
        assert len({len(line) for line in lines[1:]}) == 1


class TestEfficiency:
    def test_examples(self):
        assert efficiency_epochs([1, 2, 3, 3, 3, 3, 3], 2.5) == 3
        assert efficiency_epochs([9] * 6, 2.5) == 1
        assert efficiency_epochs([1, 2, 2.5, 2.5, 2.5, 2.5], 2.5) is None
        assert efficiency_epochs([3, 3, 3, 3, 1, 3, 3, 3, 3, 3], 2.5) == 6

    def test_empty_history(self):
        with pytest.raises(ValueError):
            efficiency_epochs([], 0.0)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=25), st.lists(st.integers(0, 4), max_size=10))
    def test_ignores_entries_after_qualifying_run(self, history, tail):
        e = efficiency_epochs(history, 2.0)
        if e is not None:
            assert e >= 1
            cut = e + 5 - 1
            assert efficiency_epochs(history[:cut] + tail, 2.0) == e
            assert efficiency_epochs(history + tail, 2.0) == e

    def test_aggregate(self):
        r = EfficiencyResult(0.5, [3, 5, None])
        assert r.reached == [3, 5] and r.mean == 4.0 and r.std == 1.0
        assert "never reached in 1/3" in r.summary()
        assert math.isnan(EfficiencyResult(0.5, [None]).mean)
        assert EfficiencyResult(0.5, [None, None]).summary() == "never reached in 2/2 seeds"


def _pattern_splits(length=40, period=5) -> SplitSet:
    items = [t % period + 1 for t in range(length)]
    session = Session("only", items, [Feedback.CLICK] * length, list(range(length)))
    vocab = OrderedDict((str(i), i) for i in range(1, period + 1))
    return SplitSet([session], [], [], vocab, 0)


def _pool_cross_entropy(model, pool) -> float:
    logits = model.policy_logits(model.encode(pool.s))
    return float(-dc.mean_axis(log_prob(logits, pool.action - 1)).value)


class TestBaselines:
    @pytest.mark.parametrize("trainer", [train_sl_baseline, train_bc_baseline])
    def test_memorizes_deterministic_pattern(self, trainer):
        splits = _pattern_splits()
        cfg = tiny_config(epochs=60, batch_size=8, lr_actor=2e-2)
        model = trainer(splits, cfg, seed=0).model
        pool = splits.pool("train", cfg.window)
        ranks = ranks_of_targets(model.scores(pool.s), pool.action)
        assert hit_ratio(ranks, 1) == 1.0

    def test_equal_length_sessions_make_bc_equal_sl(self):
        sessions = [Session(f"s{k}", [(k + t) % 6 + 1 for t in range(5)], [Feedback.CLICK] * 5, [0] * 5)
                    for k in range(12)]
        vocab = OrderedDict((str(i), i) for i in range(1, 7))
        splits = SplitSet(sessions, [], [], vocab, 0)
        cfg = tiny_config(epochs=2, batch_size=4)
        np.testing.assert_array_equal(session_weights(splits.pool("train", 4)), 0.25)
        a = train_sl_baseline(splits, cfg, seed=3).model.params.values()
        b = train_bc_baseline(splits, cfg, seed=3).model.params.values()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_session_weights_equalize_sessions(self, small_splits):
        pool = small_splits.pool("train", 4)
        w = session_weights(pool)
        mass = np.bincount(pool.session, weights=w)
        np.testing.assert_allclose(mass, 1.0)

    @pytest.mark.parametrize("optimizer", ["sgd", "adam"])
    def test_cross_entropy_decreases_over_first_epoch(self, small_splits, optimizer):
        cfg = tiny_config(epochs=1, batch_size=16, lr_actor=5e-3, optimizer=optimizer)
        pool = small_splits.pool("train", cfg.window)
        streams = Streams(0)
        model = PolicyModel(cfg, small_splits.num_items, streams.init)
        inner = cross_entropy_step(cfg.lr_actor, optimizer)
        steps = len(pool) // cfg.batch_size
        checkpoints = set(np.linspace(0, steps, 5).astype(int)[1:])
        trace = [_pool_cross_entropy(model, pool)]

        def step(batch, m, s):
            out = inner(batch, m, s)
            if step.calls + 1 in checkpoints:
                trace.append(_pool_cross_entropy(m, pool))
            step.calls += 1
            return out
        step.calls = 0

        run_epochs(model, pool, cfg, streams, step)
        assert len(trace) == 5
        assert all(b <= a for a, b in zip(trace, trace[1:])), trace
