"""Incremental update strategies and the multi-cycle schedule.

``evorec`` updates only the adapters of the located layers on filtered
sequences, with a KL consistency term anchoring inactive users' predictions
to the pre-update model. The comparators are full-adapter fine-tuning (with
an optional KL or EWC penalty) and retraining from scratch.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint, state_hash
from .data import (Encoder, InteractionLog, TemporalSplit, full_instances,
                   pretrain_instances, temporal_split, update_instances)
from .errors import DataError
from .evaluation import MetricsReport, evaluate
from .filter import FilterModel, ForgetResult, finetune_filter, forget
from .locate import SensitivityReport, locate
from .model import (AdaptiveMoment, RecModel, check_finite, collate, gradients,
                    nll, pack_batches, pack_instances, packed_nll, pretrain)

log = logging.getLogger(__name__)

STRATEGIES = ("evorec", "finetune", "retrain", "ft_kl", "ewc")
LOG_FLOOR = math.log(1e-12)


@dataclass
class EvolutionConfig:
    strategy: str = "evorec"
    t: float = 30.0
    K: int = 2
    lam: float = 2e-4
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int = 64
    consistency_sample_size: int = 256
    ewc_weight: float = 1.0
    fisher_samples: int = 256
    filter_epochs: int = 1
    filter_lr: float = 1e-3
    pretrain_epochs: int = 15
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.lam < 0 or self.ewc_weight < 0:
            raise ValueError("lam and ewc_weight must be non-negative")
        if not 0 < self.t <= 100:
            raise ValueError("t must lie in (0, 100]")
        if self.K < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("K, epochs must be >= 0 and batch_size >= 1")
        if self.consistency_sample_size < 1:
            raise ValueError("consistency_sample_size must be >= 1")

    def replace(self, **kw) -> "EvolutionConfig":
        return EvolutionConfig(**{**asdict(self), **kw})


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class ConsistencyAnchor:
    """Sampled inactive users and the pre-update model's log-probabilities.

    Instances are grouped into fixed batches; the reference for each batch is
    computed once, with the same batch layout used during training.
    """

    users: list
    instances: list
    batches: list                 # lists of row indices into ``instances``
    reference: list               # per batch, floored log-probs (B, n_items)

    def reference_probs(self) -> np.ndarray:
        return np.concatenate([r.exp().numpy() for r in self.reference])


@torch.no_grad()
def capture_anchor(model: RecModel, split: TemporalSplit, size: int = 256, seed: int = 0,
                   batch_size: int = 64, encoder: Encoder | None = None) -> ConsistencyAnchor:
    users = split.inactive_users
    if not users:
        raise DataError("no inactive users to anchor consistency on")
    enc = encoder or Encoder(split.n_items, model.cfg.max_seq_len)
    rng = np.random.default_rng(seed)
    chosen = sorted(int(u) for u in rng.choice(users, size=min(size, len(users)), replace=False))
    instances = [enc.encode(split.pretrain_sequence(u), None, u) for u in chosen]
    batches = [list(range(i, min(i + batch_size, len(instances))))
               for i in range(0, len(instances), batch_size)]
    reference = []
    for idx in batches:
        tokens, lengths, _ = collate([instances[i] for i in idx])
        reference.append(model(tokens, lengths).log_softmax(-1).clamp(min=LOG_FLOOR))
    return ConsistencyAnchor(chosen, instances, batches, reference)


def kl_to_reference(logits: torch.Tensor, ref_logp: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(current || reference) over items.

    Both log-probabilities are floored at log(1e-12) so a reference zero cannot
    blow up; this slightly under-counts mass the reference deems impossible.
    """
    logp = logits.log_softmax(-1)
    return (logp.exp() * (logp.clamp(min=LOG_FLOOR) - ref_logp)).sum(-1)


def _consistency(model: RecModel, anchor: ConsistencyAnchor, batch: int | None = None) -> torch.Tensor:
    which = range(len(anchor.batches)) if batch is None else [batch % len(anchor.batches)]
    total, n = 0.0, 0
    for b in which:
        idx = anchor.batches[b]
        tokens, lengths, _ = collate([anchor.instances[i] for i in idx])
        total = total + kl_to_reference(model(tokens, lengths), anchor.reference[b]).sum()
        n += len(idx)
    return total / n


def alignment_loss(model: RecModel, batch) -> tuple[float, dict]:
    """Mean target NLL; gradients only where the trainability mask allows."""
    loss = nll(model, batch)
    return float(loss.detach()), gradients(model, loss)


def consistency_loss(model: RecModel, anchor: ConsistencyAnchor, batch: int | None = None) -> tuple[float, dict]:
    """Mean KL(current || reference) over the anchor (or one of its batches)."""
    loss = _consistency(model, anchor, batch)
    return float(loss.detach()), gradients(model, loss)


def total_loss(model: RecModel, batch, anchor: ConsistencyAnchor, lam: float,
               anchor_batch: int | None = None) -> tuple[float, dict]:
    """``L_e + lam * L_c``."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    loss = nll(model, batch)
    if lam:
        loss = loss + lam * _consistency(model, anchor, anchor_batch)
    return float(loss.detach()), gradients(model, loss)


def fisher_diagonal(model: RecModel, instances, names: Sequence[str]) -> dict:
    """Mean squared per-instance gradient of the NLL for ``names``."""
    params = dict(model.named_parameters())
    fisher = {n: torch.zeros_like(params[n]) for n in names}
    flags = {n: params[n].requires_grad for n in names}
    for n in names:
        params[n].requires_grad_(True)
    try:
        for x in instances:
            grads = torch.autograd.grad(nll(model, [x]), [params[n] for n in names], allow_unused=True)
            for n, g in zip(names, grads):
                if g is not None:
                    fisher[n] += g.detach() ** 2
    finally:
        for n, flag in flags.items():
            params[n].requires_grad_(flag)
    return {n: f / max(len(instances), 1) for n, f in fisher.items()}


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def selective_step(model: RecModel, grads: dict, layers: Sequence[int], lr: float,
                   optimizer: AdaptiveMoment | None = None) -> AdaptiveMoment:
    """One optimizer step on the adapters of ``layers`` only."""
    if not layers:
        raise ValueError("no layers selected for update")
    bad = [l for l in layers if not 1 <= l <= model.cfg.n_layers]
    if bad:
        raise ValueError(f"layers {bad} outside [1, {model.cfg.n_layers}]")
    optimizer = optimizer or AdaptiveMoment(lr=lr)
    optimizer.step(model, grads, model.adapter_names(layers), lr=lr)
    return optimizer


@dataclass
class RunLog:
    strategy: str
    events: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def event(self, **kw) -> None:
        self.events.append(kw)

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "runlog.jsonl", "w", encoding="utf-8") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        (d / "summary.json").write_text(json.dumps(self.summary, indent=1, sort_keys=True), encoding="utf-8")


def _train_adapters(model: RecModel, instances, layers: list, cfg: EvolutionConfig, runlog: RunLog,
                    penalty=None) -> int:
    """Adapter-only training loop; ``penalty(step)`` returns (name, weight, tensor) or None."""
    model.set_trainable(base=False, adapter_layers=layers)
    opt = AdaptiveMoment(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    packs = pack_instances(instances)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        for group in pack_batches(packs, cfg.batch_size, rng):
            le = packed_nll(model, group)
            loss, record = le, {"L_e": float(le.detach())}
            extra = penalty(step) if penalty is not None else None
            if extra is not None:
                name, weight, term = extra
                loss = loss + weight * term
                record[name] = float(term.detach())
            value = float(loss.detach())
            check_finite(value, f"{cfg.strategy} loss at step {step}")
            selective_step(model, gradients(model, loss), layers, cfg.lr, opt)
            runlog.event(step=step, epoch=epoch, loss=value, wall=time.perf_counter() - t0, **record)
            step += 1
    return step


def run_strategy(config: EvolutionConfig, model: RecModel, split: TemporalSplit,
                 report: SensitivityReport | None = None, forgotten: ForgetResult | None = None,
                 encoder: Encoder | None = None) -> tuple[RecModel, RunLog]:
    """Apply one update strategy; returns the updated model and its run log.

    Non-retrain strategies mutate ``model`` in place (adapters only).
    """
    cfg = config
    enc = encoder or Encoder(split.n_items, model.cfg.max_seq_len)
    runlog = RunLog(cfg.strategy)
    L = model.cfg.n_layers
    all_layers = list(range(1, L + 1))
    t0 = time.perf_counter()
    steps = 0

    if cfg.strategy == "retrain":
        fresh = RecModel(copy.deepcopy(model.cfg))
        history = pretrain(fresh, full_instances(split, enc), cfg.pretrain_epochs, cfg.pretrain_lr,
                           cfg.pretrain_batch_size, cfg.seed)
        for epoch, loss in enumerate(history):
            runlog.event(epoch=epoch, loss=loss, wall=time.perf_counter() - t0)
        steps = len(history)
        updated = fresh.param_count(fresh.base_names())
        model = fresh
        layers = []
    else:
        if not split.active_users:
            raise DataError("no active users: nothing to update on")
        if cfg.strategy == "evorec":
            if report is None:
                raise DataError("evorec needs a locate report (run locate first)")
            if forgotten is None:
                raise DataError("evorec needs filtered sequences (run forget first)")
            layers = list(report.selected)
            seqs = forgotten.sequences
        else:
            layers = all_layers
            seqs = {u: split.train_parts(u) for u in split.active_users}
        instances = update_instances(seqs, enc)
        penalty = None
        if cfg.strategy in ("evorec", "ft_kl") and cfg.lam > 0:
            anchor = capture_anchor(model, split, cfg.consistency_sample_size, cfg.seed,
                                    cfg.batch_size, enc)
            penalty = lambda step: ("L_c", cfg.lam, _consistency(model, anchor, step))
        elif cfg.strategy == "ewc":
            names = model.adapter_names()
            rng = np.random.default_rng(cfg.seed)
            pool = pretrain_instances(split, enc)
            sample = [pool[i] for i in sorted(rng.choice(len(pool), min(cfg.fisher_samples, len(pool)), replace=False))]
            model.set_trainable(base=False, adapter_layers=None)
            fisher = fisher_diagonal(model, sample, names)
            params = dict(model.named_parameters())
            star = {n: params[n].detach().clone() for n in names}

            def penalty(step):
                term = sum((fisher[n] * (params[n] - star[n]) ** 2).sum() for n in names)
                return "ewc", cfg.ewc_weight, term

            runlog.summary["fisher_min"] = float(min(f.min() for f in fisher.values()))
        steps = _train_adapters(model, instances, layers, cfg, runlog, penalty)
        updated = model.param_count(model.adapter_names(layers))
        model.set_trainable(base=False, adapter_layers=None)

    runlog.summary.update(
        strategy=cfg.strategy,
        steps=steps,
        layers=layers,
        updated_params=updated,
        total_adapter_params=model.param_count(model.adapter_names()),
        update_seconds=time.perf_counter() - t0,
    )
    return model, runlog


# ---------------------------------------------------------------------------
# Cycles
# ---------------------------------------------------------------------------


@dataclass
class CycleResult:
    cycle: int
    model: RecModel
    runlog: RunLog
    report: SensitivityReport | None = None
    forgotten: ForgetResult | None = None
    timings: dict = field(default_factory=dict)


def evolve_cycle(model: RecModel, split: TemporalSplit, config: EvolutionConfig,
                 filter_model: FilterModel | None = None, cycle: int = 1) -> CycleResult:
    """Locate, forget and update (evorec), or just update (other strategies)."""
    timings = {}
    report = forgotten = None
    if config.strategy == "evorec":
        if filter_model is None:
            raise DataError("evorec needs a pretrained filter model")
        t0 = time.perf_counter()
        report = locate(model, split, config.t)
        timings["locate"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        finetune_filter(filter_model, split, config.filter_epochs, config.filter_lr, config.seed)
        forgotten = forget(filter_model, split, config.K)
        timings["forget"] = time.perf_counter() - t0
    model, runlog = run_strategy(config, model, split, report, forgotten)
    timings["update"] = runlog.summary["update_seconds"]
    timings["total"] = sum(timings.values())
    runlog.summary["timings"] = timings
    return CycleResult(cycle, model, runlog, report, forgotten, timings)


def cycle_splits(log_: InteractionLog, timestamps: Sequence[int]) -> list[TemporalSplit]:
    """Split ``c`` cuts at ``T_c`` and sees events up to ``T_{c+1}`` (all, for the last)."""
    ts = list(timestamps)
    if not ts:
        raise DataError("no cycle timestamps")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise DataError(f"cycle timestamps must increase strictly: {ts}")
    return [temporal_split(log_, T, ts[c + 1] if c + 1 < len(ts) else None) for c, T in enumerate(ts)]


@dataclass
class ScheduleResult:
    models: list
    cycles: list
    metrics: MetricsReport


def run_schedule(configs, timestamps: Sequence[int], log_: InteractionLog, model: RecModel,
                 filter_model: FilterModel | None = None, eval_seed: int = 0, name: str | None = None,
                 out_dir=None, splits: list | None = None, baseline: bool = True) -> ScheduleResult:
    """Evolve ``model`` through one cycle per timestamp, evaluating after each.

    Adapters persist across cycles (retrain rebuilds). With ``baseline`` the
    starting model is evaluated on the first split as cycle 0.
    """
    splits = splits or cycle_splits(log_, timestamps)
    if isinstance(configs, EvolutionConfig):
        configs = [configs] * len(splits)
    if len(configs) != len(splits):
        raise ValueError("need one config per cycle")
    name = name or configs[0].strategy
    metrics = MetricsReport(provenance={"strategy": name})
    if baseline:
        metrics.extend(evaluate(model, splits[0], eval_seed, cycle=0, strategy=name))
    models, cycles = [], []
    for c, (split, cfg) in enumerate(zip(splits, configs), start=1):
        res = evolve_cycle(model, split, cfg, filter_model, c)
        model = res.model
        rep = evaluate(model, split, eval_seed, cycle=c, strategy=name)
        metrics.extend(rep)
        models.append(copy.deepcopy(model))
        cycles.append(res)
        if out_dir is not None:
            _persist_cycle(Path(out_dir) / str(c), split, res, rep, cfg)
        log.info("cycle %d %s: U_A HR@3 %.4f, U HR@3 %.4f", c, name,
                 rep.value("HR@3", "U_A"), rep.value("HR@3", "U"))
    metrics.provenance["final_model_sha256"] = state_hash(model)
    return ScheduleResult(models, cycles, metrics)


def _persist_cycle(d: Path, split: TemporalSplit, res: CycleResult, rep: MetricsReport,
                   cfg: EvolutionConfig) -> None:
    (d / "split").mkdir(parents=True, exist_ok=True)
    (d / "split" / "split.json").write_text(json.dumps(split.to_json()), encoding="utf-8")
    if res.report is not None:
        res.report.write(d / "locate" / "report.json")
    if res.forgotten is not None:
        res.forgotten.write_jsonl(d / "forget" / "filtered.jsonl")
    res.runlog.write(d / "update")
    save_checkpoint(res.model, d / "update" / "model", res.model.cfg.to_dict(), res.model.cfg.seed,
                    {"cycle": res.cycle, "strategy": cfg.strategy})
    rep.write(d / "eval")
