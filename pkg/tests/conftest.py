from __future__ import annotations

import numpy as np
import pytest

from dicerec.datasets import filter_corpus, sessions_to_events, split_sessions, synth_generate
from dicerec.models import ModelConfig


def numeric_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f())
        flat[i] = orig - step
        lo = float(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tiny_config(**overrides) -> ModelConfig:
    base = dict(window=4, embed_dim=4, state_dim=4, actor_hidden=8, critic_hidden=8, critic_features=3,
                batch_size=6, gru_layers=2, epochs=1, fisher_samples=3, cnn_heights=(1, 2), cnn_filters=3,
                cnn_vertical=2)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_splits():
    """A quick synthetic corpus: 240 sessions over 30 items."""
    sessions = synth_generate(240, 30, 0.8, seed=3)
    corpus = filter_corpus(sessions_to_events(sessions))
    return split_sessions(corpus.sessions, 3, corpus.vocab)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
