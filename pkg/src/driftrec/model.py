"""Decoder-only item-token transformer with per-layer low-rank adapters.

Blocks use the parallel residual form ``h + Att(LN(h)) + MLP(LN(h))``.
The output layer is tied to the item rows of the token embedding, so logits
cover items only (special tokens are never predicted).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import BOS, N_SPECIAL, PAD, SEP, CandidateSet, EncodedInstance
from .errors import DataError, NumericalError

log = logging.getLogger(__name__)

LORA_TARGETS = ("attn_q", "attn_v", "mlp_in", "mlp_out")
LINEARS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")


@dataclass
class ModelConfig:
    n_items: int
    n_layers: int = 6
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 50
    lora_rank: int = 4
    lora_targets: tuple = ("attn_q", "attn_v")
    seed: int = 0

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.lora_rank < min(self.d_model, self.d_ff):
            raise ValueError("lora_rank must satisfy 1 <= r < min(d_model, d_ff)")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad or not self.lora_targets:
            raise ValueError(f"lora_targets must be a non-empty subset of {LORA_TARGETS}")

    @property
    def vocab_size(self) -> int:
        return self.n_items + N_SPECIAL

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


class LoraLinear(nn.Module):
    """``y = W x + b + B (A x)`` with ``A: r x d_in`` and ``B: d_out x r``."""

    def __init__(self, d_in: int, d_out: int, rank: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out))
        self.lora_A = nn.Parameter(torch.empty(rank, d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        self.enabled = True

    def forward(self, x):
        out = F.linear(x, self.weight, self.bias)
        if self.enabled:
            out = out + F.linear(F.linear(x, self.lora_A), self.lora_B)
        return out


def merge_delta(adapter: LoraLinear) -> torch.Tensor:
    """Effective weight delta ``B @ A``."""
    if not adapter.enabled:
        raise ValueError("adapter is disabled")
    A, B = adapter.lora_A, adapter.lora_B
    if B.shape[1] != A.shape[0] or adapter.weight.shape != (B.shape[0], A.shape[1]):
        raise ValueError(f"shape mismatch: B{tuple(B.shape)} A{tuple(A.shape)} W{tuple(adapter.weight.shape)}")
    return (B @ A).detach()


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        self.n_heads = cfg.n_heads
        self.ln_attn = nn.LayerNorm(d)
        self.ln_mlp = nn.LayerNorm(d)
        dims = {"attn_q": (d, d), "attn_k": (d, d), "attn_v": (d, d), "attn_o": (d, d),
                "mlp_in": (d, f), "mlp_out": (f, d)}
        for name in LINEARS:
            d_in, d_out = dims[name]
            layer = LoraLinear(d_in, d_out, cfg.lora_rank) if name in cfg.lora_targets else nn.Linear(d_in, d_out)
            setattr(self, name, layer)

    def forward(self, h, mask):
        B, T, d = h.shape
        nh = self.n_heads
        a = self.ln_attn(h)
        q = self.attn_q(a).view(B, T, nh, -1).transpose(1, 2)
        k = self.attn_k(a).view(B, T, nh, -1).transpose(1, 2)
        v = self.attn_v(a).view(B, T, nh, -1).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(mask, float("-inf"))
        att = (scores.softmax(-1) @ v).transpose(1, 2).reshape(B, T, d)
        m = self.mlp_out(F.gelu(self.mlp_in(self.ln_mlp(h))))
        return h + self.attn_o(att) + m


class RecModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_seq_len + 2, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self._init_weights()
        self.set_trainable(base=True, adapter_layers=())

    def _init_weights(self):
        g = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if ".ln_" in name or name.startswith("ln_"):
                    p.fill_(1.0 if leaf == "weight" else 0.0)
                elif leaf in ("lora_B", "bias"):
                    p.zero_()
                elif leaf == "lora_A":
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_(torch.rand(p.shape, generator=g) * 2 * bound - bound)
                elif name.endswith("emb.weight"):
                    p.copy_(torch.randn(p.shape, generator=g) * 0.1)
                else:
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)

    # -- parameter bookkeeping -------------------------------------------------

    @staticmethod
    def is_adapter(name: str) -> bool:
        return ".lora_" in name

    @staticmethod
    def layer_of(name: str) -> int | None:
        """1-indexed layer of a block parameter, else None."""
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        return None

    def base_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if not self.is_adapter(n)]

    def adapter_names(self, layers: Iterable[int] | None = None) -> list[str]:
        keep = None if layers is None else set(layers)
        return [n for n, _ in self.named_parameters()
                if self.is_adapter(n) and (keep is None or self.layer_of(n) in keep)]

    def param_count(self, names: Iterable[str]) -> int:
        params = dict(self.named_parameters())
        return sum(params[n].numel() for n in names)

    def adapters(self) -> dict:
        """``{(layer, target): LoraLinear}`` with 1-indexed layers."""
        return {(l + 1, t): getattr(blk, t)
                for l, blk in enumerate(self.blocks) for t in self.cfg.lora_targets}

    def set_trainable(self, base: bool = False, adapter_layers: Iterable[int] | None = None) -> None:
        """Per-layer trainability mask. ``adapter_layers=None`` means all layers."""
        allowed = set(self.adapter_names(adapter_layers))
        for n, p in self.named_parameters():
            p.requires_grad_(n in allowed if self.is_adapter(n) else base)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    # -- forward ---------------------------------------------------------------

    def encode(self, tokens, positions, blocked):
        """Hidden states ``H_0..H_L`` for tokens with explicit positions and mask."""
        if int(positions.max()) > self.cfg.max_seq_len + 1:
            raise DataError(f"sequence exceeds max_seq_len = {self.cfg.max_seq_len}")
        h = self.tok_emb(tokens) + self.pos_emb(positions)
        hidden = [h]
        for blk in self.blocks:
            h = blk(h, blocked)
            hidden.append(h)
        return hidden

    def head(self, h):
        return self.ln_f(h) @ self.tok_emb.weight[N_SPECIAL:].T

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor, return_hidden: bool = False):
        """Item logits at each row's last real position (``lengths - 1``)."""
        B, T = tokens.shape
        if T > self.cfg.max_seq_len + 2:
            raise DataError(f"sequence of {T} tokens exceeds max_seq_len + 2 = {self.cfg.max_seq_len + 2}")
        positions = torch.arange(T).expand(B, T)
        blocked = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)
        hidden = self.encode(tokens, positions, blocked[None, None])
        logits = self.head(hidden[-1][torch.arange(B), lengths - 1])
        return (logits, hidden) if return_hidden else logits

    def forward_packed(self, packed: "PackedBatch") -> torch.Tensor:
        """Item logits at every query (SEP) token of a packed batch."""
        hidden = self.encode(packed.tokens, packed.positions, packed.blocked[:, None])
        return self.head(hidden[-1][packed.query_rows, packed.query_cols])


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def collate(batch: Sequence[EncodedInstance]):
    """Right-padded token matrix, lengths, and target matrix (-1 padded)."""
    if not batch:
        raise ValueError("empty batch")
    T = max(len(x.input_tokens) for x in batch)
    K = max(1, max(len(x.target_tokens) for x in batch))
    tokens = np.full((len(batch), T), PAD, dtype=np.int64)
    targets = np.full((len(batch), K), -1, dtype=np.int64)
    lengths = np.empty(len(batch), dtype=np.int64)
    for r, x in enumerate(batch):
        tokens[r, :len(x.input_tokens)] = x.input_tokens
        lengths[r] = len(x.input_tokens)
        for c, t in enumerate(x.target_tokens):
            targets[r, c] = t - N_SPECIAL
    return torch.from_numpy(tokens), torch.from_numpy(lengths), torch.from_numpy(targets)


@dataclass
class Pack:
    """Several instances sharing one history: ``[BOS, items..., SEP x q]``.

    Query ``j`` sits at position ``cuts[j] + 1`` and attends only to BOS, the
    first ``cuts[j]`` items and itself, which reproduces the separate instance
    ``[BOS, items[:cuts[j]], SEP]`` exactly.
    """

    items: tuple
    cuts: list
    targets: list

    @property
    def width(self) -> int:
        return 1 + len(self.items) + len(self.cuts)


def pack_instances(instances: Sequence[EncodedInstance]) -> list[Pack]:
    """Group instances of the same user whose histories are prefixes of one another."""
    by_user: dict = {}
    for x in instances:
        if x.input_tokens[0] != BOS or x.input_tokens[-1] != SEP:
            raise DataError("instance is not [BOS, items..., SEP]")
        by_user.setdefault(x.user_id, []).append(x)
    packs = []
    for group in by_user.values():
        user_packs: list[Pack] = []
        for x in sorted(group, key=lambda x: -len(x.input_tokens)):
            items = x.input_tokens[1:-1]
            n = len(items)
            home = next((p for p in user_packs if p.items[:n] == items), None)
            if home is None:
                home = Pack(items, [], [])
                user_packs.append(home)
            home.cuts.append(n)
            home.targets.append(x.target_tokens)
        packs.extend(user_packs)
    return packs


@dataclass
class PackedBatch:
    tokens: torch.Tensor
    positions: torch.Tensor
    blocked: torch.Tensor
    query_rows: torch.Tensor
    query_cols: torch.Tensor
    targets: torch.Tensor  # (n_queries, K), item indices, -1 padded


def collate_packs(packs: Sequence[Pack]) -> PackedBatch:
    if not packs:
        raise ValueError("empty batch")
    B = len(packs)
    T = max(p.width for p in packs)
    K = max(1, max(len(t) for p in packs for t in p.targets))
    tokens = np.full((B, T), PAD, dtype=np.int64)
    positions = np.zeros((B, T), dtype=np.int64)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    blocked = np.ones((B, T, T), dtype=bool)
    rows, cols, targets = [], [], []
    for r, p in enumerate(packs):
        n = len(p.items)
        tokens[r, 0] = BOS
        tokens[r, 1:n + 1] = p.items
        positions[r, :n + 1] = np.arange(n + 1)
        blocked[r, :n + 1, :n + 1] = causal[:n + 1, :n + 1]
        for j, (cut, tgt) in enumerate(zip(p.cuts, p.targets)):
            q = n + 1 + j
            tokens[r, q] = SEP
            positions[r, q] = cut + 1
            blocked[r, q, :cut + 1] = False
            blocked[r, q, q] = False
            rows.append(r)
            cols.append(q)
            targets.append([t - N_SPECIAL for t in tgt] + [-1] * (K - len(tgt)))
        blocked[r, p.width:, 0] = False  # padding rows: keep softmax finite
    return PackedBatch(torch.from_numpy(tokens), torch.from_numpy(positions),
                       torch.from_numpy(blocked), torch.tensor(rows), torch.tensor(cols),
                       torch.tensor(targets, dtype=torch.int64))


def pack_batches(packs: Sequence[Pack], batch_size: int, rng: np.random.Generator | None):
    """Groups of packs holding roughly ``batch_size`` queries each."""
    order = rng.permutation(len(packs)) if rng is not None else np.arange(len(packs))
    group, n = [], 0
    for i in order:
        group.append(packs[i])
        n += len(packs[i].cuts)
        if n >= batch_size:
            yield group
            group, n = [], 0
    if group:
        yield group


def item_logits(model: RecModel, batch: Sequence[EncodedInstance]) -> torch.Tensor:
    tokens, lengths, _ = collate(batch)
    return model(tokens, lengths)


@torch.no_grad()
def predict_logits(model: RecModel, instances: Sequence[EncodedInstance], batch_size: int = 512) -> np.ndarray:
    """Item logits for many instances, shape ``(N, n_items)``."""
    out = [item_logits(model, instances[i:i + batch_size]).double().numpy()
           for i in range(0, len(instances), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_items))


def packed_nll(model: RecModel, packs: Sequence[Pack]) -> torch.Tensor:
    pb = collate_packs(packs)
    logp = model.forward_packed(pb).log_softmax(-1)
    valid = pb.targets >= 0
    picked = logp.gather(1, pb.targets.clamp(min=0))
    return -(picked * valid).sum() / valid.sum()


def nll(model: RecModel, batch: Sequence[EncodedInstance]) -> torch.Tensor:
    """Mean negative log-probability of the target items (differentiable)."""
    for x in batch:
        if not x.target_tokens:
            raise DataError("instance without target")
    return packed_nll(model, pack_instances(batch))


def gradients(model: RecModel, loss: torch.Tensor) -> dict:
    """Gradient of ``loss`` for every parameter; exact zeros where frozen."""
    named = list(model.named_parameters())
    live = [(n, p) for n, p in named if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in live], allow_unused=True) if live else []
    by_name = {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(live, grads)}
    return {n: by_name.get(n, torch.zeros_like(p)) for n, p in named}


def nll_loss(model: RecModel, batch: Sequence[EncodedInstance]) -> tuple[float, dict]:
    if not batch:
        raise ValueError("empty batch")
    loss = nll(model, batch)
    return float(loss.detach()), gradients(model, loss)


@dataclass
class ForwardTrace:
    hidden_states: list  # L+1 arrays of shape (tokens, d_model)
    logits: np.ndarray   # (n_items,)


@torch.no_grad()
def forward_trace(model: RecModel, instance: EncodedInstance) -> ForwardTrace:
    tokens, lengths, _ = collate([instance])
    logits, hidden = model(tokens, lengths, return_hidden=True)
    return ForwardTrace([h[0].double().numpy() for h in hidden], logits[0].double().numpy())


def rank_candidates(logits: np.ndarray, presented: Sequence[int]) -> list[int]:
    """Candidates by logit descending, ties by item ID ascending."""
    items = np.asarray(presented, dtype=np.int64)
    order = np.lexsort((items, -logits[items]))
    return [int(i) for i in items[order]]


def score_candidates(model: RecModel, instance: EncodedInstance, cands: CandidateSet) -> list[int]:
    n = model.cfg.n_items
    if any(not 0 <= i < n for i in cands.presented):
        raise DataError("candidate outside vocabulary")
    return rank_candidates(forward_trace(model, instance).logits, cands.presented)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdaptiveMoment:
    """Per-parameter adaptive step without momentum (``beta1 = 0`` by default).

    ``v <- beta2 v + (1 - beta2) g^2``;  ``m <- beta1 m + (1 - beta1) g``;
    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`` with the usual bias
    corrections ``m_hat = m / (1 - beta1^t)``, ``v_hat = v / (1 - beta2^t)``.
    """

    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    @torch.no_grad()
    def step(self, model: nn.Module, grads: dict, names: Iterable[str], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        params = dict(model.named_parameters())
        for n in names:
            p, g = params[n], grads[n]
            st = self.state.setdefault(n, {"t": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)})
            st["t"] += 1
            st["v"].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            st["m"].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            m_hat = st["m"] / (1 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1 - self.beta2 ** st["t"])
            p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))


def check_finite(value: float, what: str, hint: str = "learning rate too high?") -> None:
    if not math.isfinite(value):
        raise NumericalError(f"{what} is {value}; {hint}")


def pretrain(model: RecModel, instances: Sequence[EncodedInstance], epochs: int = 10,
             lr: float = 1e-3, batch_size: int = 256, seed: int = 0,
             on_epoch: Callable | None = None) -> list[float]:
    """Train the base weights on next-item NLL; adapters stay untouched.

    ``batch_size`` counts instances (queries). Returns the mean training loss
    of every epoch.
    """
    if not instances:
        raise DataError("no pretraining instances")
    model.set_trainable(base=True, adapter_layers=())
    names = model.trainable_names()
    opt = AdaptiveMoment(lr=lr)
    rng = np.random.default_rng(seed)
    packs = pack_instances(instances)
    history = []
    for epoch in range(epochs):
        t0, total, count = time.perf_counter(), 0.0, 0
        for group in pack_batches(packs, batch_size, rng):
            loss = packed_nll(model, group)
            value = float(loss.detach())
            check_finite(value, f"pretraining loss at epoch {epoch}")
            opt.step(model, gradients(model, loss), names)
            n = sum(len(p.cuts) for p in group)
            total += value * n
            count += n
        history.append(total / count)
        log.info("pretrain epoch %d: loss %.4f (%.1fs)", epoch, history[-1], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    model.set_trainable(base=False, adapter_layers=None)
    return history
