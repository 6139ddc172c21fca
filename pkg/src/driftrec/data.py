"""Interaction logs, temporal splits, candidate sampling and token encoding.

Everything here works on dense integer IDs; the original string IDs are kept
on the log so that exports can map back.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

PAD, BOS, SEP = 0, 1, 2
N_SPECIAL = 3
N_CANDIDATES = 30


# ---------------------------------------------------------------------------
# Interaction log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionLog:
    """Timestamped (user, item) events, sorted by (user, timestamp).

    ``users``/``items`` hold dense IDs; ``user_ids[u]`` and ``item_ids[i]``
    give back the original strings.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple
    item_ids: tuple

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_records(cls, records: Iterable[tuple]) -> "InteractionLog":
        """Build a normalized log from ``(user_id, item_id, timestamp)`` rows.

        Dense IDs follow the sorted order of the original IDs. Sorting is
        stable, so events with equal timestamps keep their input order.
        """
        records = list(records)
        if not records:
            return cls._empty()
        raw_u = [str(r[0]) for r in records]
        raw_i = [str(r[1]) for r in records]
        user_ids = tuple(sorted(set(raw_u)))
        item_ids = tuple(sorted(set(raw_i)))
        u_index = {u: k for k, u in enumerate(user_ids)}
        i_index = {i: k for k, i in enumerate(item_ids)}
        users = np.array([u_index[u] for u in raw_u], dtype=np.int64)
        items = np.array([i_index[i] for i in raw_i], dtype=np.int64)
        ts = np.array([int(r[2]) for r in records], dtype=np.int64)
        order = np.lexsort((ts, users))  # lexsort is stable
        return cls(users[order], items[order], ts[order], user_ids, item_ids)

    @classmethod
    def _empty(cls) -> "InteractionLog":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), (), ())

    def records(self) -> list[tuple[str, str, int]]:
        return [
            (self.user_ids[u], self.item_ids[i], int(t))
            for u, i, t in zip(self.users, self.items, self.timestamps)
        ]

    def user_sequences(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per dense user: (items, timestamps) in chronological order."""
        bounds = np.searchsorted(self.users, np.arange(self.n_users + 1))
        return [
            (self.items[a:b], self.timestamps[a:b])
            for a, b in zip(bounds[:-1], bounds[1:])
        ]

    def subset(self, keep: np.ndarray) -> "InteractionLog":
        """Rows where ``keep`` is true, densely re-indexed."""
        return InteractionLog.from_records(
            (self.user_ids[u], self.item_ids[i], t)
            for u, i, t in zip(self.users[keep], self.items[keep], self.timestamps[keep])
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "item_id", "timestamp"])
            w.writerows(self.records())


def ingest(path, format: str | None = None) -> InteractionLog:
    """Read a CSV (``user_id,item_id,timestamp[,rating]``) or JSONL log."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    if fmt == "csv":
        rows = _read_csv(path)
    elif fmt == "jsonl":
        rows = _read_jsonl(path)
    else:
        raise DataError(f"unknown format {fmt!r}")
    if not rows:
        raise DataError(f"{path}: no records")
    out = InteractionLog.from_records(rows)
    log.info("ingested %d records (%d users, %d items) from %s",
             len(out), out.n_users, out.n_items, path)
    return out


def _parse_ts(value, where: str) -> int:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise DataError(f"{where}: bad timestamp {value!r}") from None
    if not math.isfinite(f):
        raise DataError(f"{where}: bad timestamp {value!r}")
    return int(f)


def _read_csv(path: Path) -> list[tuple]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        header = [h.strip() for h in header]
        try:
            cu, ci, ct = (header.index(k) for k in ("user_id", "item_id", "timestamp"))
        except ValueError:
            raise DataError(f"{path}:1: header must contain user_id,item_id,timestamp") from None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            u, i = row[cu].strip(), row[ci].strip()
            if not u or not i:
                raise DataError(f"{path}:{lineno}: empty user or item id")
            rows.append((u, i, _parse_ts(row[ct], f"{path}:{lineno}")))
    return rows


def _read_jsonl(path: Path) -> list[tuple]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                u, i, t = obj["user_id"], obj["item_id"], obj["timestamp"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from None
            rows.append((str(u), str(i), _parse_ts(t, f"{path}:{lineno}")))
    return rows


def kcore_filter(log_: InteractionLog, k: int) -> InteractionLog:
    """Iteratively drop users and items with fewer than ``k`` interactions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(len(log_), dtype=bool)
    while True:
        u_deg = np.bincount(log_.users[keep], minlength=log_.n_users)
        i_deg = np.bincount(log_.items[keep], minlength=log_.n_items)
        bad = keep & ((u_deg[log_.users] < k) | (i_deg[log_.items] < k))
        if not bad.any():
            break
        keep &= ~bad
    if keep.all():
        return log_
    return log_.subset(keep)


# ---------------------------------------------------------------------------
# Temporal split
# ---------------------------------------------------------------------------


@dataclass
class TemporalSplit:
    """Users partitioned at cutoff ``T`` with per-user leave-one-out targets.

    ``pre[u]`` is S_u^{<=T}; ``post[u]`` is S_u^{A+} (empty for inactive
    users). The evaluation sequence of a user is ``pre + post``; its last item
    is the test item and the one before it the validation item.
    """

    T: int
    horizon: int | None
    n_items: int
    pre: dict
    post: dict
    history: dict
    excluded: list = field(default_factory=list)

    @property
    def users(self) -> list[int]:
        return sorted(self.pre)

    @property
    def active_users(self) -> list[int]:
        return [u for u in self.users if len(self.post[u]) > 0]

    @property
    def inactive_users(self) -> list[int]:
        return [u for u in self.users if len(self.post[u]) == 0]

    def is_active(self, u: int) -> bool:
        return len(self.post[u]) > 0

    def full(self, u: int) -> np.ndarray:
        """S_u^A for active users, S_u^{<=T} otherwise."""
        return np.concatenate([self.pre[u], self.post[u]])

    def test_item(self, u: int) -> int:
        return int(self.full(u)[-1])

    def valid_item(self, u: int) -> int:
        return int(self.full(u)[-2])

    def train_sequence(self, u: int) -> np.ndarray:
        """Everything except the held-out validation and test items."""
        return self.full(u)[:-2]

    def train_parts(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        """Training sequence cut at T: (pre part, post part)."""
        seq = self.train_sequence(u)
        n_pre = min(len(self.pre[u]), len(seq))
        return seq[:n_pre], seq[n_pre:]

    def pretrain_sequence(self, u: int) -> np.ndarray:
        """Pre-T items usable for training (held-out items removed)."""
        return self.train_parts(u)[0]

    def eval_history(self, u: int) -> np.ndarray:
        return self.full(u)[:-1]

    def summary(self) -> dict:
        return {
            "T": self.T,
            "horizon": self.horizon,
            "n_users": len(self.pre),
            "n_active": len(self.active_users),
            "n_inactive": len(self.inactive_users),
            "n_excluded": len(self.excluded),
        }

    def to_json(self) -> dict:
        return {
            **self.summary(),
            "n_items": self.n_items,
            "excluded": [int(u) for u in self.excluded],
            "users": {
                str(u): {"pre": self.pre[u].tolist(), "post": self.post[u].tolist()}
                for u in self.users
            },
            "history": {str(u): sorted(int(i) for i in h) for u, h in self.history.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TemporalSplit":
        users = obj["users"]
        return cls(
            T=obj["T"],
            horizon=obj["horizon"],
            n_items=obj["n_items"],
            pre={int(u): np.array(v["pre"], dtype=np.int64) for u, v in users.items()},
            post={int(u): np.array(v["post"], dtype=np.int64) for u, v in users.items()},
            history={int(u): frozenset(v) for u, v in obj["history"].items()},
            excluded=list(obj["excluded"]),
        )


def temporal_split(log_: InteractionLog, T: int, horizon: int | None = None,
                   min_pre: int = 3) -> TemporalSplit:
    """Partition users at ``T``.

    Events later than ``horizon`` are invisible (used for multi-cycle
    schedules). Users with fewer than ``min_pre`` pre-T events are excluded
    and reported, since leave-one-out needs train/valid/test items.
    """
    if len(log_) == 0:
        raise DataError("no records")
    lo, hi = int(log_.timestamps.min()), int(log_.timestamps.max())
    if not lo <= T <= hi:
        raise DataError(f"T={T} outside log range [{lo}, {hi}]")
    if horizon is not None and horizon < T:
        raise DataError(f"horizon {horizon} precedes T={T}")
    pre, post, history, excluded = {}, {}, {}, []
    for u, (items, ts) in enumerate(log_.user_sequences()):
        visible = ts <= horizon if horizon is not None else np.ones(len(ts), dtype=bool)
        before = ts <= T
        if before.sum() < min_pre:
            excluded.append(u)
            continue
        pre[u] = items[before].copy()
        post[u] = items[~before & visible].copy()
        history[u] = frozenset(int(i) for i in items)
    if excluded:
        log.info("split at T=%d: excluded %d users with < %d pre-T interactions",
                 T, len(excluded), min_pre)
    if not pre:
        raise DataError(f"no users with >= {min_pre} interactions before T={T}")
    return TemporalSplit(T, horizon, log_.n_items, pre, post, history, excluded)


# ---------------------------------------------------------------------------
# Candidate sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSet:
    target: int
    negatives: tuple
    presented: tuple


def candidate_seed(seed: int, user: int, cycle: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(user), int(cycle)])


def sample_candidates(split: TemporalSplit, user: int, rng_seed,
                      n_candidates: int = N_CANDIDATES) -> CandidateSet:
    """Test item plus ``n_candidates - 1`` items the user never touched."""
    target = split.test_item(user)
    n_neg = n_candidates - 1
    seen = split.history[user] | {target}
    pool = np.array([i for i in range(split.n_items) if i not in seen], dtype=np.int64)
    if len(pool) < n_neg:
        raise DataError(
            f"user {user}: only {len(pool)} non-interacted items, need {n_neg}")
    rng = np.random.default_rng(rng_seed)
    negatives = rng.choice(pool, size=n_neg, replace=False)
    presented = rng.permutation(np.concatenate([[target], negatives]))
    return CandidateSet(int(target), tuple(int(i) for i in negatives),
                        tuple(int(i) for i in presented))


# ---------------------------------------------------------------------------
# Token encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodedInstance:
    input_tokens: tuple
    target_tokens: tuple
    user_id: int = -1


def item_token(item: int) -> int:
    return int(item) + N_SPECIAL


def token_item(token: int) -> int:
    return int(token) - N_SPECIAL


@dataclass(frozen=True)
class Encoder:
    """Maps item sequences to ``[BOS, items..., SEP]`` token streams."""

    n_items: int
    max_seq_len: int = 50

    @property
    def vocab_size(self) -> int:
        return self.n_items + N_SPECIAL

    def encode(self, sequence: Sequence[int], target=None, user_id: int = -1) -> EncodedInstance:
        seq = [int(i) for i in sequence]
        if not seq:
            raise DataError("cannot encode an empty sequence")
        targets = [] if target is None else (
            [int(t) for t in target] if np.ndim(target) else [int(target)])
        for i in seq + targets:
            if not 0 <= i < self.n_items:
                raise DataError(f"item {i} outside vocabulary of {self.n_items} items")
        seq = seq[-self.max_seq_len:]
        return EncodedInstance(
            (BOS, *(item_token(i) for i in seq), SEP),
            tuple(item_token(t) for t in targets),
            user_id,
        )

    def next_item_instances(self, sequence: Sequence[int], user_id: int = -1,
                            start: int = 1) -> list[EncodedInstance]:
        """One instance per position ``p >= start``: history ``seq[:p]``, target ``seq[p]``."""
        seq = list(sequence)
        return [self.encode(seq[:p], seq[p], user_id) for p in range(max(start, 1), len(seq))]


def pretrain_instances(split: TemporalSplit, encoder: Encoder) -> list[EncodedInstance]:
    """D^{<=T}: next-item instances over every user's pre-T training items."""
    out = []
    for u in split.users:
        out.extend(encoder.next_item_instances(split.pretrain_sequence(u), u))
    return out


def full_instances(split: TemporalSplit, encoder: Encoder) -> list[EncodedInstance]:
    """Next-item instances over the whole training sequence (pre and post)."""
    out = []
    for u in split.users:
        out.extend(encoder.next_item_instances(split.train_sequence(u), u))
    return out


def update_instances(sequences: dict, encoder: Encoder) -> list[EncodedInstance]:
    """Instances whose targets are the post-T items of each ``(pre, post)`` pair.

    A user with no post-T training items contributes its final training item
    as target instead, so nobody in U_A is silently dropped.
    """
    out = []
    for u in sorted(sequences):
        pre_part, post_part = sequences[u]
        seq = list(pre_part) + list(post_part)
        if len(seq) < 2:
            continue
        start = len(pre_part) if len(post_part) else len(seq) - 1
        out.extend(encoder.next_item_instances(seq, u, start=start))
    return out


# ---------------------------------------------------------------------------
# Synthetic drift scenarios
# ---------------------------------------------------------------------------


@dataclass
class DriftScenario:
    """Parameters of a cluster-switching preference-drift log.

    Every user starts in a latent cluster and interacts before ``timestamps[0]``.
    A ``drift_fraction`` of users switch cluster at the first cutoff and keep
    interacting in every window ``(T_c, T_{c+1}]`` (the last window ends at
    ``T_n + window``). In later windows a drifted user switches again with
    probability ``redrift``. Each window has a trending cluster that switching
    users move to with probability ``trend_share``. Other users never interact
    after ``timestamps[0]``.
    """

    n_users: int = 2000
    n_items: int = 500
    n_clusters: int = 4
    drift_fraction: float = 0.25
    timestamps: tuple = (100_000, 110_000, 120_000)
    window: int = 10_000
    seed: int = 0
    fidelity: float = 0.9
    trend_share: float = 0.75
    redrift: float = 0.5
    zipf: float = 1.1
    pre_len: tuple = (8, 20)
    post_len: tuple = (4, 8)

    def validate(self) -> None:
        if self.n_users < 1 or self.n_clusters < 1:
            raise DataError("n_users and n_clusters must be positive")
        if self.n_items < self.n_clusters * 10:
            raise DataError("need n_items >= 10 * n_clusters")
        if not 0 <= self.drift_fraction < 1:
            raise DataError("drift_fraction must lie in [0, 1)")
        if not 0 < self.fidelity <= 1 or not 0 <= self.trend_share <= 1 or not 0 <= self.redrift <= 1:
            raise DataError("fidelity must lie in (0, 1], trend_share and redrift in [0, 1]")
        ts = list(self.timestamps)
        if not ts or any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] <= 0:
            raise DataError("timestamps must be positive and strictly increasing")
        if self.drift_fraction > 0 and self.n_clusters < 2:
            raise DataError("drift needs at least two clusters")
        lo, hi = self.pre_len
        if lo < 3 or hi < lo:
            raise DataError("pre_len must satisfy 3 <= lo <= hi")
        lo, hi = self.post_len
        if lo < 1 or hi < lo:
            raise DataError("post_len must satisfy 1 <= lo <= hi")
        per_cluster = self.n_items // self.n_clusters
        if self.pre_len[1] + len(ts) * self.post_len[1] > per_cluster:
            raise DataError("sequences longer than a cluster; raise n_items")


def generate_drift(scenario: DriftScenario) -> tuple[InteractionLog, dict]:
    """Sample a log and its ground truth (cluster labels, drift cycles)."""
    sc = scenario
    sc.validate()
    rng = np.random.default_rng(sc.seed)
    n_cycles = len(sc.timestamps)
    bounds = list(sc.timestamps) + [sc.timestamps[-1] + sc.window]

    item_cluster = rng.permutation(np.arange(sc.n_items) % sc.n_clusters)
    members = [np.flatnonzero(item_cluster == c) for c in range(sc.n_clusters)]
    popularity = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** sc.zipf
        popularity.append(rng.permutation(w / w.sum()))
    trending = rng.integers(0, sc.n_clusters, size=n_cycles)

    def draw(cluster, seen, k):
        out = []
        for _ in range(k):
            if rng.random() < sc.fidelity:
                cand, p = members[cluster], popularity[cluster]
            else:
                cand, p = None, None
            while True:
                item = int(rng.choice(cand, p=p)) if cand is not None else int(rng.integers(sc.n_items))
                if item not in seen:
                    break
            seen.add(item)
            out.append(item)
        return out

    def stamps(lo, hi, k):
        return np.sort(rng.integers(lo + 1, hi + 1, size=k))

    width = len(str(max(sc.n_users, sc.n_items) - 1))
    rows, truth_users = [], {}
    for u in range(sc.n_users):
        c0 = int(rng.integers(sc.n_clusters))
        seen: set = set()
        n_pre = int(rng.integers(sc.pre_len[0], sc.pre_len[1] + 1))
        items = draw(c0, seen, n_pre)
        ts = list(stamps(-1, bounds[0] - 1, n_pre))
        entry = {"cluster_before": c0, "cluster_after": c0, "drift_cycle": None, "window_clusters": []}
        if rng.random() < sc.drift_fraction:
            cur, path = c0, []
            for cyc in range(n_cycles):
                prev = cur
                if cyc == 0 or rng.random() < sc.redrift:
                    trend = int(trending[cyc])
                    if trend != cur and rng.random() < sc.trend_share:
                        cur = trend
                    else:
                        cur = int(rng.choice([c for c in range(sc.n_clusters) if c != prev]))
                n_post = int(rng.integers(sc.post_len[0], sc.post_len[1] + 1))
                for _ in range(n_post):
                    # residual interest stays with the previous cluster
                    c = cur if rng.random() < sc.fidelity else prev
                    items.extend(_draw_pure(rng, members[c], popularity[c], seen))
                ts.extend(stamps(bounds[cyc], bounds[cyc + 1], n_post))
                path.append(cur)
            entry = {"cluster_before": c0, "cluster_after": cur, "drift_cycle": 1, "window_clusters": path}
        uid = f"u{u:0{width}d}"
        truth_users[uid] = entry
        rows.extend((uid, f"i{i:0{width}d}", int(t)) for i, t in zip(items, ts))

    log_ = InteractionLog.from_records(rows)
    truth = {
        "scenario": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(sc).items()},
        "cycle_timestamps": list(sc.timestamps),
        "window_bounds": bounds,
        "trending_clusters": [int(c) for c in trending],
        "item_cluster": {f"i{i:0{width}d}": int(c) for i, c in enumerate(item_cluster)},
        "users": truth_users,
    }
    return log_, truth


def _draw_pure(rng, cand, p, seen):
    while True:
        item = int(rng.choice(cand, p=p))
        if item not in seen:
            seen.add(item)
            return [item]


def write_generated(log_: InteractionLog, truth: dict, path) -> None:
    """CSV log plus a ``<stem>.scenario.json`` sidecar with the ground truth."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log_.write_csv(path)
    with open(path.with_suffix(".scenario.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
