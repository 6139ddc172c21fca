"""Find the layers whose hidden states move most when a user's history grows."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Encoder, TemporalSplit
from .errors import DataError
from .model import ForwardTrace, RecModel, collate

log = logging.getLogger(__name__)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 1 if both vectors are zero, 0 if only one is."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm hidden state in similarity", RuntimeWarning, stacklevel=2)
        return 1.0 if na == nb else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def summary_vector(hidden: np.ndarray, pooling: str = "last") -> np.ndarray:
    if pooling == "last":
        return hidden[-1]
    if pooling == "mean":
        return hidden.mean(axis=0)
    raise ValueError(f"unknown pooling {pooling!r}")


def layer_similarity(trace_old: ForwardTrace, trace_new: ForwardTrace, layer: int,
                     pooling: str = "last") -> float:
    """Cosine between the layer-``layer`` summaries (1-indexed) of two traces."""
    L = len(trace_old.hidden_states) - 1
    if len(trace_new.hidden_states) != L + 1:
        raise ValueError("traces come from models of different depth")
    if not 1 <= layer <= L:
        raise ValueError(f"layer must be in [1, {L}]")
    return cosine(summary_vector(trace_old.hidden_states[layer], pooling),
                  summary_vector(trace_new.hidden_states[layer], pooling))


def most_sensitive_layer(scores: Sequence[float]) -> int:
    """1-indexed argmin; the first (lowest) layer wins ties."""
    if len(scores) == 0:
        raise ValueError("no scores")
    return int(np.argmin(np.asarray(scores))) + 1


def select_layers(counts: Sequence[int], t: float) -> list[int]:
    """Top ``ceil(t% * L)`` layers by count, ties to the lower layer, sorted ascending."""
    if not 0 < t <= 100:
        raise ValueError(f"t must lie in (0, 100], got {t}")
    counts = np.asarray(counts)
    L = len(counts)
    k = math.ceil(round(t / 100 * L, 9))
    order = sorted(range(L), key=lambda i: (-counts[i], i))
    return sorted(i + 1 for i in order[:k])


@dataclass
class SensitivityReport:
    per_pair_scores: dict       # user -> list of L similarities
    counts: list                # C(l), index 0 is layer 1
    selected: list              # Phi, 1-indexed, ascending
    t: float
    pooling: str = "last"
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.counts)

    @property
    def n_pairs(self) -> int:
        return len(self.per_pair_scores)

    def to_json(self) -> dict:
        total = max(sum(self.counts), 1)
        return {
            "t": self.t,
            "pooling": self.pooling,
            "n_pairs": self.n_pairs,
            "counts": list(self.counts),
            "selected": list(self.selected),
            "histogram": [{"layer": l + 1, "count": c, "frequency": c / total}
                          for l, c in enumerate(self.counts)],
            "per_pair_scores": {str(u): s for u, s in sorted(self.per_pair_scores.items())},
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SensitivityReport":
        return cls({int(u): s for u, s in obj["per_pair_scores"].items()},
                   obj["counts"], obj["selected"], obj["t"], obj.get("pooling", "last"),
                   obj.get("meta", {}))

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "SensitivityReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@torch.no_grad()
def _summaries(model: RecModel, instances, pooling: str, batch_size: int = 256) -> np.ndarray:
    """Per-instance summaries for layers 0..L, shape (N, L+1, d)."""
    out = []
    for i in range(0, len(instances), batch_size):
        tokens, lengths, _ = collate(instances[i:i + batch_size])
        _, hidden = model(tokens, lengths, return_hidden=True)
        H = torch.stack(hidden, dim=1).double()  # (B, L+1, T, d)
        if pooling == "last":
            s = H[torch.arange(len(lengths)), :, lengths - 1]
        elif pooling == "mean":
            mask = (torch.arange(tokens.shape[1])[None] < lengths[:, None]).double()
            s = (H * mask[:, None, :, None]).sum(2) / lengths[:, None, None].double()
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
        out.append(s.numpy())
    return np.concatenate(out)


def locate(model: RecModel, split: TemporalSplit, t: float = 30.0, pooling: str = "last",
           encoder: Encoder | None = None) -> SensitivityReport:
    """Count, over active users, which layer's summary moves most from S^{<=T} to S^A.

    Both sequences are suffix-truncated like training data. Read-only.
    """
    if not 0 < t <= 100:
        raise ValueError(f"t must lie in (0, 100], got {t}")
    users = split.active_users
    if not users:
        raise DataError("no active users to locate on")
    enc = encoder or Encoder(split.n_items, model.cfg.max_seq_len)
    old = _summaries(model, [enc.encode(split.pre[u], None, u) for u in users], pooling)
    new = _summaries(model, [enc.encode(split.full(u), None, u) for u in users], pooling)
    L = model.cfg.n_layers
    counts = [0] * L
    scores = {}
    for row, u in enumerate(users):
        s = [cosine(old[row, l], new[row, l]) for l in range(1, L + 1)]
        scores[int(u)] = s
        counts[most_sensitive_layer(s) - 1] += 1
    report = SensitivityReport(scores, counts, select_layers(counts, t), t, pooling,
                               {"T": split.T, "n_layers": L})
    log.info("locate: counts %s -> layers %s", counts, report.selected)
    return report
