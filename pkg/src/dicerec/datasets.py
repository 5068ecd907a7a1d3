"""Event-log ingestion, sessionization, filtering, splitting and windowing."""

from __future__ import annotations

import csv
import enum
import logging
from collections import Counter, OrderedDict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
SESSION_GAP_MS = 30 * 60 * 1000

RETAILROCKET_HEADER = ["timestamp", "visitorid", "event", "itemid", "transactionid"]


class Feedback(enum.IntEnum):
    CLICK = 0
    PURCHASE = 1

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> Feedback:
        return cls[text.strip().upper()]


class DataError(ValueError):
    """Input data that cannot be turned into a usable corpus."""


@dataclass(frozen=True)
class SessionEvent:
    session_id: str
    timestamp: int
    item_id: str | int
    feedback: Feedback


@dataclass
class Session:
    """A filtered session with items already mapped to ``[1, N]``."""

    session_id: str
    items: list[int]
    feedback: list[Feedback]
    timestamps: list[int]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Corpus:
    sessions: list[Session]
    vocab: OrderedDict[str, int]

    @property
    def num_items(self) -> int:
        return len(self.vocab)


@dataclass(frozen=True)
class DemoTuple:
    s0_window: tuple[int, ...]
    s_window: tuple[int, ...]
    action: int
    s_next_window: tuple[int, ...]
    feedback: Feedback


@dataclass
class TuplePool:
    """Column-major storage of many :class:`DemoTuple` records.

    ``session`` holds the index of the originating session inside its split,
    which the baselines use for per-session weighting.
    """

    s0: np.ndarray
    s: np.ndarray
    action: np.ndarray
    s_next: np.ndarray
    feedback: np.ndarray
    session: np.ndarray

    def __len__(self) -> int:
        return int(self.action.shape[0])

    @property
    def window(self) -> int:
        return int(self.s.shape[1])

    def take(self, idx: np.ndarray) -> TuplePool:
        return TuplePool(self.s0[idx], self.s[idx], self.action[idx], self.s_next[idx],
                         self.feedback[idx], self.session[idx])

    def tuples(self) -> list[DemoTuple]:
        return [
            DemoTuple(tuple(self.s0[i]), tuple(self.s[i]), int(self.action[i]),
                      tuple(self.s_next[i]), Feedback(int(self.feedback[i])))
            for i in range(len(self))
        ]

    @classmethod
    def from_tuples(cls, tuples: Sequence[DemoTuple], session: Sequence[int] | None = None) -> TuplePool:
        if not tuples:
            raise DataError("cannot build a pool from zero tuples")
        return cls(
            s0=np.array([t.s0_window for t in tuples], dtype=np.int64),
            s=np.array([t.s_window for t in tuples], dtype=np.int64),
            action=np.array([t.action for t in tuples], dtype=np.int64),
            s_next=np.array([t.s_next_window for t in tuples], dtype=np.int64),
            feedback=np.array([int(t.feedback) for t in tuples], dtype=np.int64),
            session=np.asarray(session if session is not None else np.zeros(len(tuples)), dtype=np.int64),
        )


@dataclass
class SplitSet:
    train: list[Session]
    validation: list[Session]
    test: list[Session]
    vocab: OrderedDict[str, int]
    seed: int
    _pools: dict = field(default_factory=dict, repr=False)

    @property
    def num_items(self) -> int:
        return len(self.vocab)

    def split(self, name: str) -> list[Session]:
        if name not in ("train", "validation", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def pool(self, name: str, window: int) -> TuplePool:
        key = (name, window)
        if key not in self._pools:
            self._pools[key] = build_pool(self.split(name), window)
        return self._pools[key]


# ---------------------------------------------------------------------------
# raw parsers


def _sort_and_sessionize(rows: dict[str, list[tuple[int, int, str, Feedback]]], gap_ms: int | None) -> list[SessionEvent]:
    """Sort each group by (timestamp, file order) and optionally split at gaps."""
    events: list[SessionEvent] = []
    for key, group in rows.items():
        group.sort(key=lambda r: (r[0], r[1]))
        part, last_ts = 0, None
        for ts, _, item, fb in group:
            if gap_ms is not None and last_ts is not None and ts - last_ts > gap_ms:
                part += 1
            last_ts = ts
            sid = f"{key}:{part}" if gap_ms is not None else key
            events.append(SessionEvent(sid, ts, item, fb))
    return events


def parse_retailrocket(path: str | Path, stats: Counter | None = None) -> list[SessionEvent]:
    """Read the Kaggle retailrocket ``events.csv`` layout.

    ``view`` becomes a click, ``addtocart`` a purchase, every other event type
    is dropped. Sessions are per visitor, cut at inactivity gaps over 30
    minutes.
    """
    stats = stats if stats is not None else Counter()
    mapping = {"view": Feedback.CLICK, "addtocart": Feedback.PURCHASE}
    rows: dict[str, list] = OrderedDict()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RETAILROCKET_HEADER:
            raise DataError(f"{path}: expected header {','.join(RETAILROCKET_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts, visitor, event, item = int(row[0]), row[1].strip(), row[2].strip(), row[3].strip()
                if not visitor or not item:
                    raise ValueError("empty id")
            except (ValueError, IndexError):
                stats["malformed"] += 1
                continue
            if event not in mapping:
                stats[f"dropped_{event}"] += 1
                continue
            stats[mapping[event].label] += 1
            rows.setdefault(visitor, []).append((ts, lineno, item, mapping[event]))
    if stats["malformed"]:
        log.warning("%s: skipped %d malformed rows", path, stats["malformed"])
    return _sort_and_sessionize(rows, SESSION_GAP_MS)


def _parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    return int(round(dt.timestamp() * 1000))


def parse_yoochoose(clicks_path: str | Path, buys_path: str | Path, stats: Counter | None = None) -> list[SessionEvent]:
    """Merge RecSys Challenge 2015 click and buy files into timestamp-sorted sessions.

    Timestamps may be integer milliseconds or ISO-8601 strings. On equal
    timestamps the click sorts before the purchase.
    """
    stats = stats if stats is not None else Counter()
    rows: dict[str, list] = OrderedDict()
    order = 0
    for path, fb in ((clicks_path, Feedback.CLICK), (buys_path, Feedback.PURCHASE)):
        try:
            fh = open(path, newline="", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        with fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().lower() == "session_id":
                    continue
                order += 1
                try:
                    sid, ts, item = row[0].strip(), _parse_timestamp(row[1]), row[2].strip()
                    if not sid or not item:
                        raise ValueError("empty id")
                except (ValueError, IndexError):
                    stats["malformed"] += 1
                    continue
                stats[fb.label] += 1
                rows.setdefault(sid, []).append((ts, order, item, fb))
    if stats["malformed"]:
        log.warning("skipped %d malformed yoochoose rows", stats["malformed"])
    return _sort_and_sessionize(rows, None)


# ---------------------------------------------------------------------------
# normalization


def group_sessions(events: Iterable[SessionEvent]) -> list[list[SessionEvent]]:
    groups: dict[str, list[SessionEvent]] = OrderedDict()
    for ev in events:
        groups.setdefault(ev.session_id, []).append(ev)
    return list(groups.values())


def filter_corpus(events: Iterable[SessionEvent], min_item_freq: int = 3, min_session_len: int = 3) -> Corpus:
    """Drop rare items and short sessions until neither filter removes anything.

    Surviving raw item ids are mapped to ``1..N`` in order of first
    appearance.
    """
    sessions = group_sessions(events)
    while True:
        freq = Counter(ev.item_id for s in sessions for ev in s)
        kept = [[ev for ev in s if freq[ev.item_id] >= min_item_freq] for s in sessions]
        kept = [s for s in kept if len(s) >= min_session_len]
        if sum(map(len, kept)) == sum(map(len, sessions)) and len(kept) == len(sessions):
            break
        sessions = kept
    if not sessions:
        raise DataError("filtering removed every session")
    vocab: OrderedDict[str, int] = OrderedDict()
    out = []
    for s in sessions:
        for ev in s:
            vocab.setdefault(str(ev.item_id), len(vocab) + 1)
        out.append(Session(
            s[0].session_id,
            [vocab[str(ev.item_id)] for ev in s],
            [ev.feedback for ev in s],
            [ev.timestamp for ev in s],
        ))
    return Corpus(out, vocab)


def split_sessions(sessions: Sequence[Session], seed: int, vocab: OrderedDict[str, int] | None = None) -> SplitSet:
    """Seeded 80/10/10 split by session; each part keeps the input order."""
    n = len(sessions)
    if n < 3:
        raise DataError(f"need at least 3 sessions to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val = int(np.floor(0.8 * n)), int(np.floor(0.1 * n))
    parts = np.split(perm, [n_train, n_train + n_val])
    train, val, test = ([sessions[i] for i in sorted(p)] for p in parts)
    if vocab is None:
        vocab = OrderedDict((str(i), i) for i in sorted({x for s in sessions for x in s.items}))
    return SplitSet(train, val, test, vocab, seed)


def window_before(items: Sequence[int], t: int, w: int) -> tuple[int, ...]:
    """Chronological window of the ``min(t, w)`` items preceding position ``t``, right-padded."""
    recent = list(items[max(0, t - w):t])
    return tuple(recent + [PAD] * (w - len(recent)))


def build_windows(session: Session | Sequence[int], w: int = 10,
                  feedback: Sequence[Feedback] | None = None) -> list[DemoTuple]:
    if isinstance(session, Session):
        items, feedback = session.items, session.feedback
    else:
        items = list(session)
        feedback = feedback if feedback is not None else [Feedback.CLICK] * len(items)
    s0 = (PAD,) * w
    return [
        DemoTuple(s0, window_before(items, t, w), int(items[t]), window_before(items, t + 1, w), feedback[t])
        for t in range(1, len(items))
    ]


def build_pool(sessions: Sequence[Session], w: int) -> TuplePool:
    tuples, owner = [], []
    for k, s in enumerate(sessions):
        tt = build_windows(s, w)
        tuples.extend(tt)
        owner.extend([k] * len(tt))
    return TuplePool.from_tuples(tuples, owner)


def sample_batch(pool: TuplePool, batch_size: int, rng: np.random.Generator,
                 weights: np.ndarray | None = None) -> TuplePool:
    """Draw ``batch_size`` tuples with replacement, optionally non-uniformly.

    Constant ``weights`` take the uniform path, so they consume the generator
    exactly as ``weights=None`` does.
    """
    if len(pool) == 0:
        raise DataError("cannot sample from an empty tuple pool")
    if weights is None or np.all(weights == weights[0]):
        idx = rng.integers(0, len(pool), size=batch_size)
    else:
        idx = rng.choice(len(pool), size=batch_size, replace=True, p=weights / weights.sum())
    return pool.take(idx)


# ---------------------------------------------------------------------------
# synthetic compositional demonstrations


def sparse_expert_chain(num_items: int, rng: np.random.Generator, fanout: int = 3) -> np.ndarray:
    """Row-stochastic item transition matrix with ``fanout`` successors per item."""
    P = np.zeros((num_items, num_items))
    for i in range(num_items):
        succ = rng.choice(num_items, size=min(fanout, num_items), replace=False)
        P[i, succ] = rng.dirichlet(np.ones(len(succ)))
    return P


def synth_generate(num_sessions: int, num_items: int, beta: float, seed: int,
                   expert: np.ndarray | None = None, min_len: int = 3, max_len: int = 20) -> list[Session]:
    """Sessions mixing an expert Markov chain (probability ``beta``) with uniform noise.

    Items are numbered ``1..num_items``. A purchase is emitted when the expert
    chain produced the event and landed on one of the goal items (5% of the
    catalogue, at least one); every other event is a click.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"mixing weight beta must lie in [0, 1], got {beta}")
    if num_items < 5:
        raise ValueError("synthetic corpus needs at least 5 items")
    rng = np.random.default_rng(seed)
    if expert is None:
        expert = sparse_expert_chain(num_items, rng)
    expert = np.asarray(expert, dtype=np.float64)
    goals = set(rng.choice(num_items, size=max(1, int(round(0.05 * num_items))), replace=False).tolist())
    cdf = np.cumsum(expert, axis=1)
    sessions = []
    for k in range(num_sessions):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(num_items))
        items, fbs = [cur], [Feedback.CLICK]
        for _ in range(length - 1):
            if rng.random() < beta:
                cur = int(min(np.searchsorted(cdf[cur], rng.random(), side="right"), num_items - 1))
                fb = Feedback.PURCHASE if cur in goals else Feedback.CLICK
            else:
                cur = int(rng.integers(num_items))
                fb = Feedback.CLICK
            items.append(cur)
            fbs.append(fb)
        sessions.append(Session(f"synth{k}", [i + 1 for i in items], fbs, list(range(length))))
    return sessions


def sessions_to_events(sessions: Iterable[Session], vocab: OrderedDict[str, int] | None = None) -> list[SessionEvent]:
    """Flatten sessions back to events, translating indices to raw ids when a vocab is given."""
    inverse = {v: k for k, v in vocab.items()} if vocab else None
    return [
        SessionEvent(s.session_id, ts, inverse[i] if inverse else str(i), fb)
        for s in sessions for i, fb, ts in zip(s.items, s.feedback, s.timestamps)
    ]


# ---------------------------------------------------------------------------
# normalized files


def write_normalized(corpus: Corpus, events_path: str | Path, vocab_path: str | Path) -> None:
    """Tab-separated ``session_id, timestamp, item_id, feedback`` plus a ``raw_id -> index`` sidecar."""
    with open(events_path, "w", encoding="utf-8", newline="\n") as fh:
        for s in corpus.sessions:
            for i, fb, ts in zip(s.items, s.feedback, s.timestamps):
                fh.write(f"{s.session_id}\t{ts}\t{i}\t{fb.label}\n")
    with open(vocab_path, "w", encoding="utf-8", newline="\n") as fh:
        for raw, idx in corpus.vocab.items():
            fh.write(f"{raw}\t{idx}\n")


def read_normalized(events_path: str | Path, vocab_path: str | Path) -> Corpus:
    vocab: OrderedDict[str, int] = OrderedDict()
    with open(vocab_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw, idx = line.rstrip("\n").split("\t")
                vocab[raw] = int(idx)
    sessions: dict[str, Session] = OrderedDict()
    with open(events_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sid, ts, item, fb = line.rstrip("\n").split("\t")
                s = sessions.setdefault(sid, Session(sid, [], [], []))
                s.items.append(int(item))
                s.timestamps.append(int(ts))
                s.feedback.append(Feedback.parse(fb))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{events_path}:{lineno}: bad record ({exc})") from exc
    n = len(vocab)
    for s in sessions.values():
        if any(not 1 <= i <= n for i in s.items):
            raise DataError(f"{events_path}: session {s.session_id} has item ids outside [1, {n}]")
    return Corpus(list(sessions.values()), vocab)
