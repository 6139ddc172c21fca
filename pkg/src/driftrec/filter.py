"""Lightweight self-attentive filter that scores and drops outdated interactions.

The filter is trained with BPR on next-item prediction. Its final-position
output ``seq_u`` is dotted with the input embedding of every pre-T item; the
K lowest-scoring items are dropped before the recommender is updated.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import TemporalSplit
from .errors import DataError
from .model import AdaptiveMoment, check_finite

log = logging.getLogger(__name__)


@dataclass
class FilterConfig:
    n_items: int
    d_f: int = 16
    n_blocks: int = 2
    n_heads: int = 1
    max_seq_len: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.d_f > 64:
            raise ValueError("d_f must be <= 64 for a lightweight filter")
        if self.n_blocks not in (1, 2):
            raise ValueError("n_blocks must be 1 or 2")
        if self.d_f % self.n_heads:
            raise ValueError("d_f must be divisible by n_heads")


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def forward(self, h, causal):
        a = self.ln1(h)
        h = h + self.attn(a, a, a, attn_mask=causal, need_weights=False)[0]
        return h + self.ff(self.ln2(h))


class FilterModel(nn.Module):
    def __init__(self, cfg: FilterConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.item_emb = nn.Embedding(cfg.n_items + 1, cfg.d_f, padding_idx=0)
            self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_f)
            self.blocks = nn.ModuleList(_Block(cfg.d_f, cfg.n_heads) for _ in range(cfg.n_blocks))
            self.ln_f = nn.LayerNorm(cfg.d_f)
        g = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("emb.weight"):
                    p.copy_(torch.randn(p.shape, generator=g) * 0.1)
            self.item_emb.weight[0].zero_()

    def embeddings(self, items) -> torch.Tensor:
        """Input embedding rows ``e_i`` for item IDs."""
        return self.item_emb(torch.as_tensor(items, dtype=torch.int64) + 1)

    def forward(self, seqs: Sequence[Sequence[int]]):
        """Contextual outputs (B, T, d_f) and lengths for right-padded sequences."""
        seqs = [list(s)[-self.cfg.max_seq_len:] for s in seqs]
        T = max(len(s) for s in seqs)
        tokens = torch.zeros(len(seqs), T, dtype=torch.int64)
        for r, s in enumerate(seqs):
            tokens[r, :len(s)] = torch.as_tensor(s) + 1
        lengths = torch.tensor([len(s) for s in seqs])
        h = self.item_emb(tokens) + self.pos_emb(torch.arange(T))[None]
        causal = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)
        for blk in self.blocks:
            h = blk(h, causal)
        return self.ln_f(h), lengths


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_size(fm: FilterModel, rec: nn.Module, limit: float = 0.05) -> float:
    """Filter/recommender parameter ratio; warns when above ``limit``."""
    ratio = param_count(fm) / param_count(rec)
    if ratio >= limit:
        warnings.warn(f"filter has {ratio:.1%} of the recommender's parameters", RuntimeWarning, stacklevel=2)
    return ratio


@torch.no_grad()
def seq_repr(fm: FilterModel, sequence: Sequence[int]) -> np.ndarray:
    """Final-position encoder output for one sequence."""
    if len(sequence) == 0:
        raise DataError("empty sequence")
    out, lengths = fm([sequence])
    return out[0, lengths[0] - 1].double().numpy()


def bpr_loss(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """Per-term ``-log sigmoid(pos - neg)``."""
    return -F.logsigmoid(pos - neg)


def train_bpr(fm: FilterModel, sequences: dict, epochs: int = 1, lr: float = 1e-3,
              batch_size: int = 128, seed: int = 0, exclude: dict | None = None) -> list[float]:
    """BPR on next-item prediction, one uniform negative per positive.

    ``sequences`` maps user -> item sequence; negatives avoid ``exclude[user]``
    (defaults to the sequence itself). Returns the mean loss of every epoch.
    """
    users = [u for u in sorted(sequences) if len(sequences[u]) >= 2]
    if not users:
        raise DataError("no sequences with at least two items")
    n_items = fm.cfg.n_items
    rng = np.random.default_rng(seed)
    opt = AdaptiveMoment(lr=lr)
    named = list(fm.named_parameters())
    names = [n for n, _ in named]
    history = []
    for epoch in range(epochs):
        t0, total, count = time.perf_counter(), 0.0, 0
        order = rng.permutation(len(users))
        for start in range(0, len(order), batch_size):
            batch = [users[i] for i in order[start:start + batch_size]]
            seqs = [list(sequences[u])[-fm.cfg.max_seq_len:] for u in batch]
            out, lengths = fm(seqs)
            rows, cols, pos, neg = [], [], [], []
            for r, (u, s) in enumerate(zip(batch, seqs)):
                banned = exclude[u] if exclude is not None else set(s)
                for t in range(len(s) - 1):
                    rows.append(r)
                    cols.append(t)
                    pos.append(s[t + 1])
                    while True:
                        j = int(rng.integers(n_items))
                        if j not in banned:
                            break
                    neg.append(j)
            h = out[rows, cols]
            sp = (h * fm.embeddings(pos)).sum(-1)
            sn = (h * fm.embeddings(neg)).sum(-1)
            loss = bpr_loss(sp, sn).mean()
            value = float(loss.detach())
            check_finite(value, f"BPR loss at epoch {epoch}")
            raw = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
            grads = {n: g if g is not None else torch.zeros_like(p) for (n, p), g in zip(named, raw)}
            opt.step(fm, grads, names)
            total += value * len(pos)
            count += len(pos)
        history.append(total / max(count, 1))
        log.info("filter epoch %d: BPR %.4f (%.1fs)", epoch, history[-1], time.perf_counter() - t0)
    return history


def pretrain_filter(fm: FilterModel, split: TemporalSplit, epochs: int, lr: float = 1e-3,
                    seed: int = 0) -> list[float]:
    """Train on every user's pre-T training items."""
    seqs = {u: split.pretrain_sequence(u) for u in split.users}
    return train_bpr(fm, seqs, epochs, lr, seed=seed, exclude=split.history)


def finetune_filter(fm: FilterModel, split: TemporalSplit, epochs: int = 1, lr: float = 1e-3,
                    seed: int = 0) -> list[float]:
    """Adapt to the active users' full training sequences."""
    seqs = {u: split.train_sequence(u) for u in split.active_users}
    return train_bpr(fm, seqs, epochs, lr, seed=seed, exclude=split.history)


@dataclass
class RelevanceScores:
    user_id: int
    items: list
    scores: list
    kept_mask: list | None = None


@torch.no_grad()
def relevance_scores(fm: FilterModel, pre_part: Sequence[int], seq: np.ndarray,
                     user_id: int = -1) -> RelevanceScores:
    """Score of each pre-T item: its input embedding dotted with ``seq``."""
    if len(pre_part) == 0:
        raise DataError("empty pre-T part")
    E = fm.embeddings(list(pre_part)).double().numpy()
    return RelevanceScores(user_id, [int(i) for i in pre_part], (E @ np.asarray(seq, dtype=np.float64)).tolist())


def kept_mask(scores: Sequence[float], K: int) -> list[bool]:
    """Drop the K lowest scores (earlier position first on ties), keeping at least one."""
    if K < 0:
        raise ValueError("K must be >= 0")
    n = len(scores)
    k = min(K, n - 1)
    if k < K:
        warnings.warn(f"K={K} capped at {k} for a pre-T part of {n} items", RuntimeWarning, stacklevel=2)
    order = sorted(range(n), key=lambda j: (scores[j], j))
    dropped = set(order[:k])
    return [j not in dropped for j in range(n)]


def drop_bottom_k(scores: RelevanceScores, K: int) -> list[int]:
    mask = kept_mask(scores.scores, K)
    scores.kept_mask = mask
    return [i for i, keep in zip(scores.items, mask) if keep]


@dataclass
class ForgetResult:
    sequences: dict              # user -> (kept pre part, post part); S'_u = kept + post
    records: list = field(default_factory=list)
    seconds: float = 0.0

    def write_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "ForgetResult":
        seqs, records = {}, []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                records.append(rec)
                seqs[rec["user_id"]] = (np.array(rec["kept"], dtype=np.int64),
                                        np.array(rec["post"], dtype=np.int64))
        return cls(seqs, records)


def forget(fm: FilterModel, split: TemporalSplit, K: int = 2) -> ForgetResult:
    """Drop the bottom-K pre-T training items of every active user."""
    t0 = time.perf_counter()
    seqs, records = {}, []
    for u in split.active_users:
        pre_part, post_part = split.train_parts(u)
        rel = relevance_scores(fm, pre_part, seq_repr(fm, split.train_sequence(u)), u)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            kept = drop_bottom_k(rel, K)
        dropped = [i for i, k in zip(rel.items, rel.kept_mask) if not k]
        seqs[u] = (np.array(kept, dtype=np.int64), np.asarray(post_part, dtype=np.int64))
        records.append({"user_id": int(u), "kept": kept, "dropped": dropped,
                        "post": [int(i) for i in post_part], "scores": rel.scores})
    return ForgetResult(seqs, records, time.perf_counter() - t0)
