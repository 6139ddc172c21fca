"""Leave-one-out ranking metrics over sampled candidate sets."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Encoder, TemporalSplit, candidate_seed, sample_candidates
from .errors import DataError
from .model import RecModel, predict_logits, rank_candidates

METRICS = ("HR@1", "HR@3", "NDCG@3")
USER_SETS = ("U_A", "U_I", "U")
CSV_FIELDS = ("cycle", "strategy", "user_set", "metric", "value", "n_users")


def _rank(ranking: Sequence[int], target: int) -> int:
    try:
        return list(ranking).index(target) + 1
    except ValueError:
        raise DataError(f"target {target} missing from ranking") from None


def hit_rate(ranking: Sequence[int], target: int, k: int) -> int:
    return int(_rank(ranking, target) <= k)


def ndcg(ranking: Sequence[int], target: int, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    r = _rank(ranking, target)
    return 1.0 / math.log2(r + 1) if r <= k else 0.0


def metric_values(ranking: Sequence[int], target: int) -> dict:
    return {"HR@1": float(hit_rate(ranking, target, 1)),
            "HR@3": float(hit_rate(ranking, target, 3)),
            "NDCG@3": ndcg(ranking, target, 3)}


@dataclass
class MetricRow:
    cycle: int
    strategy: str
    user_set: str
    metric: str
    value: float
    n_users: int


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    per_user: list = field(default_factory=list)

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        self.rows.extend(other.rows)
        self.per_user.extend(other.per_user)
        for k, v in other.provenance.items():
            self.provenance.setdefault(k, v)
        return self

    def value(self, metric: str, user_set: str, strategy: str | None = None, cycle: int | None = None) -> float:
        hits = [r for r in self.rows if r.metric == metric and r.user_set == user_set
                and (strategy is None or r.strategy == strategy) and (cycle is None or r.cycle == cycle)]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {metric}/{user_set}/{strategy}/{cycle}")
        return hits[0].value

    def check(self) -> None:
        """Assert bounds, HR@1 <= HR@3, NDCG@3 <= HR@3 and the U aggregation identity."""
        cells: dict = {}
        for r in self.rows:
            if not 0.0 <= r.value <= 1.0:
                raise AssertionError(f"{r} out of [0, 1]")
            cells.setdefault((r.cycle, r.strategy), {})[(r.user_set, r.metric)] = r
        for key, c in cells.items():
            for us in USER_SETS:
                if (us, "HR@3") in c:
                    hr3 = c[(us, "HR@3")].value
                    if c[(us, "HR@1")].value > hr3 + 1e-12 or c[(us, "NDCG@3")].value > hr3 + 1e-12:
                        raise AssertionError(f"{key}/{us}: metric ordering violated")
            if all((us, "HR@1") in c for us in USER_SETS):
                for m in METRICS:
                    a, i, u = c[("U_A", m)], c[("U_I", m)], c[("U", m)]
                    agg = (a.n_users * a.value + i.n_users * i.value) / (a.n_users + i.n_users)
                    if abs(agg - u.value) > 1e-9:
                        raise AssertionError(f"{key}/{m}: U row {u.value} != weighted {agg}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.cycle, r.strategy, r.user_set, r.metric, f"{r.value:.6f}", r.n_users])
        return buf.getvalue()

    def write(self, directory, per_user: bool = True) -> None:
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.csv").write_text(self.to_csv(), encoding="utf-8")
        summary = {"rows": [asdict(r) for r in self.rows], "provenance": self.provenance}
        (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
        if per_user and self.per_user:
            with open(d / "per_user.jsonl", "w", encoding="utf-8") as fh:
                for rec in self.per_user:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read_csv(path) -> list[MetricRow]:
        with open(path, encoding="utf-8") as fh:
            return [MetricRow(int(r["cycle"]), r["strategy"], r["user_set"], r["metric"],
                              float(r["value"]), int(r["n_users"])) for r in csv.DictReader(fh)]


Scorer = Callable[[list], np.ndarray]


def evaluate(model: RecModel | Scorer, split: TemporalSplit, seed: int, cycle: int = 0,
             strategy: str = "", user_sets: Sequence[str] = USER_SETS,
             encoder: Encoder | None = None, provenance: dict | None = None) -> MetricsReport:
    """HR@1, HR@3, NDCG@3 for the requested user sets.

    Active users are tested on their last post-T item, inactive users on their
    last pre-T item. ``model`` may be a RecModel or any callable mapping a list
    of EncodedInstance to an ``(N, n_items)`` logit array. Candidate sets depend
    only on ``(seed, user, cycle)``, so every strategy sees the same ones.
    """
    if encoder is None:
        max_len = model.cfg.max_seq_len if isinstance(model, RecModel) else 50
        encoder = Encoder(split.n_items, max_len)
    groups = {"U_A": split.active_users, "U_I": split.inactive_users, "U": split.users}
    needed = sorted({u for us in user_sets for u in groups[us]})
    for us in user_sets:
        if not groups[us]:
            raise DataError(f"user set {us} is empty")
    instances = [encoder.encode(split.eval_history(u), split.test_item(u), u) for u in needed]
    if isinstance(model, RecModel):
        logits = predict_logits(model, instances)
    else:
        logits = np.asarray(model(instances))
    per_user = {}
    for row, u in enumerate(needed):
        cands = sample_candidates(split, u, candidate_seed(seed, u, cycle))
        ranking = rank_candidates(logits[row], cands.presented)
        per_user[u] = metric_values(ranking, cands.target)
    report = MetricsReport(provenance=dict(provenance or {}, seed=seed))
    for us in user_sets:
        members = groups[us]
        for m in METRICS:
            # fixed summation order keeps the U aggregation identity exact to ~1e-15
            value = math.fsum(per_user[u][m] for u in members) / len(members)
            report.rows.append(MetricRow(cycle, strategy, us, m, value, len(members)))
    active = set(split.active_users)
    report.per_user = [{"cycle": cycle, "strategy": strategy, "user": int(u),
                        "active": u in active, **per_user[u]} for u in needed]
    return report
