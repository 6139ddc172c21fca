"""Command-line driver: one subcommand per pipeline phase.

Artifacts live under ``<out>/<cycle>/<phase>/``. Cycle 0 holds the
pretrained recommender and filter; cycle ``c >= 1`` splits at the ``c``-th
timestamp. ``compare`` repeats the cycle loop per strategy under
``<out>/compare/<strategy>/``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .checkpoint import load_into, read_manifest, save_checkpoint, state_hash
from .data import (DriftScenario, Encoder, TemporalSplit, generate_drift, ingest, kcore_filter,
                   pretrain_instances, temporal_split, write_generated)
from .errors import DataError, MissingArtifactError, NumericalError
from .evaluation import METRICS, USER_SETS, MetricsReport, evaluate
from .evolve import STRATEGIES, EvolutionConfig, run_strategy
from .filter import (FilterConfig, FilterModel, ForgetResult, check_size, finetune_filter, forget,
                     pretrain_filter)
from .locate import SensitivityReport, locate
from .model import ModelConfig, RecModel, pretrain

log = logging.getLogger("driftrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULTS = {
    "data": None,
    "format": None,
    "kcore": 0,
    "timestamps": [100_000, 110_000, 120_000],
    "gen_n_users": 2000,
    "gen_n_items": 500,
    "gen_n_clusters": 4,
    "gen_drift_fraction": 0.25,
    "gen_window": 10_000,
    "gen_fidelity": 0.9,
    "gen_trend_share": 0.75,
    "gen_redrift": 0.5,
    "gen_zipf": 1.1,
    "n_layers": 6,
    "d_model": 32,
    "n_heads": 2,
    "d_ff": 64,
    "max_seq_len": 50,
    "lora_rank": 4,
    "lora_targets": ["attn_q", "attn_v"],
    "pretrain_epochs": 15,
    "pretrain_lr": 3e-3,
    "pretrain_batch_size": 256,
    "filter_d": 16,
    "filter_blocks": 2,
    "filter_heads": 1,
    "filter_epochs": 3,
    "filter_lr": 1e-3,
    "filter_finetune_epochs": 1,
    "strategy": "evorec",
    "t": 30.0,
    "K": 2,
    "lam": 2e-4,
    "lr": 1e-3,
    "epochs": 2,
    "batch_size": 64,
    "consistency_sample_size": 256,
    "ewc_weight": 1.0,
    "fisher_samples": 256,
    "eval_seed": None,
    "seed": 0,
    "out": "runs",
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def resolve_config(path=None, overrides=(), **flags) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides, then flags."""
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path}: {e}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a flat JSON object")
        layers.append(doc)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        layers.append({key: value})
    layers.append({k: v for k, v in flags.items() if v is not None})
    for layer in layers:
        unknown = sorted(set(layer) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in layer.items():
            if isinstance(v, dict):
                raise UsageError(f"config key {k} must not be nested")
        cfg.update(layer)
    ts = cfg["timestamps"]
    if not isinstance(ts, list) or not ts or any(b <= a for a, b in zip(ts, ts[1:])):
        raise DataError(f"timestamps must be a strictly increasing list, got {ts}")
    if cfg["strategy"] not in STRATEGIES:
        raise UsageError(f"strategy must be one of {', '.join(STRATEGIES)}")
    return cfg


def write_config(cfg: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True), encoding="utf-8")


def scenario_of(cfg: dict) -> DriftScenario:
    return DriftScenario(n_users=cfg["gen_n_users"], n_items=cfg["gen_n_items"],
                         n_clusters=cfg["gen_n_clusters"], drift_fraction=cfg["gen_drift_fraction"],
                         timestamps=tuple(cfg["timestamps"]), window=cfg["gen_window"], seed=cfg["seed"],
                         fidelity=cfg["gen_fidelity"], trend_share=cfg["gen_trend_share"],
                         redrift=cfg["gen_redrift"], zipf=cfg["gen_zipf"])


def model_config(cfg: dict, n_items: int) -> ModelConfig:
    return ModelConfig(n_items=n_items, n_layers=cfg["n_layers"], d_model=cfg["d_model"],
                       n_heads=cfg["n_heads"], d_ff=cfg["d_ff"], max_seq_len=cfg["max_seq_len"],
                       lora_rank=cfg["lora_rank"], lora_targets=tuple(cfg["lora_targets"]), seed=cfg["seed"])


def filter_config(cfg: dict, n_items: int) -> FilterConfig:
    return FilterConfig(n_items=n_items, d_f=cfg["filter_d"], n_blocks=cfg["filter_blocks"],
                        n_heads=cfg["filter_heads"], max_seq_len=cfg["max_seq_len"], seed=cfg["seed"])


def evolution_config(cfg: dict, strategy: str | None = None) -> EvolutionConfig:
    return EvolutionConfig(strategy=strategy or cfg["strategy"], t=cfg["t"], K=cfg["K"], lam=cfg["lam"],
                           lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                           consistency_sample_size=cfg["consistency_sample_size"],
                           ewc_weight=cfg["ewc_weight"], fisher_samples=cfg["fisher_samples"],
                           filter_epochs=cfg["filter_finetune_epochs"], filter_lr=cfg["filter_lr"],
                           pretrain_epochs=cfg["pretrain_epochs"], pretrain_lr=cfg["pretrain_lr"],
                           pretrain_batch_size=cfg["pretrain_batch_size"], seed=cfg["seed"])


def eval_seed(cfg: dict) -> int:
    return cfg["seed"] if cfg["eval_seed"] is None else cfg["eval_seed"]


# ---------------------------------------------------------------------------
# Artifact layout
# ---------------------------------------------------------------------------


class Layout:
    """Paths of one run tree. ``shared`` holds data and the cycle-0 pretrain."""

    def __init__(self, root, shared=None):
        self.root = Path(root)
        self.shared = Path(shared) if shared is not None else self.root

    def phase(self, cycle: int, name: str) -> Path:
        return self.root / str(cycle) / name

    @property
    def data(self) -> Path:
        return self.shared / "data" / "interactions.csv"

    @property
    def pretrain(self) -> Path:
        return self.shared / "0" / "pretrain"

    def model_dir(self, cycle: int) -> Path:
        return self.pretrain / "model" if cycle == 0 else self.phase(cycle, "update") / "model"

    def filter_dir(self, cycle: int) -> Path:
        return self.pretrain / "filter" if cycle == 0 else self.phase(cycle, "forget") / "filter"


def _check_cycle(cfg: dict, cycle: int, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if not lo <= cycle <= len(cfg["timestamps"]):
        raise UsageError(f"cycle must lie in [{lo}, {len(cfg['timestamps'])}]")


def load_log(cfg: dict, lay: Layout):
    path = Path(cfg["data"]) if cfg["data"] else lay.data
    if not path.exists():
        raise MissingArtifactError(path, "gen-data or ingest")
    return ingest(path, cfg["format"])


def load_split(lay: Layout, cycle: int) -> TemporalSplit:
    path = lay.phase(cycle, "split") / "split.json"
    if not path.exists():
        raise MissingArtifactError(path, f"split --cycle {cycle}")
    return TemporalSplit.from_json(json.loads(path.read_text(encoding="utf-8")))


def load_model(lay: Layout, cycle: int) -> RecModel:
    path = lay.model_dir(cycle)
    try:
        manifest = read_manifest(path)
    except FileNotFoundError:
        raise MissingArtifactError(path, "pretrain" if cycle == 0 else f"update --cycle {cycle}") from None
    model = RecModel(ModelConfig(**manifest["config"]))
    load_into(model, path)
    model.set_trainable(base=False, adapter_layers=None)
    return model


def load_filter(lay: Layout, cycle: int) -> FilterModel:
    path = lay.filter_dir(cycle)
    try:
        manifest = read_manifest(path)
    except FileNotFoundError:
        raise MissingArtifactError(path, "pretrain" if cycle == 0 else f"forget --cycle {cycle}") from None
    fm = FilterModel(FilterConfig(**manifest["config"]))
    load_into(fm, path)
    return fm


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def do_gen_data(cfg: dict, lay: Layout) -> Path:
    log_, truth = generate_drift(scenario_of(cfg))
    write_generated(log_, truth, lay.data)
    write_config(cfg, lay.data.parent)
    log.info("gen-data: %d records, %d users, %d items -> %s", len(log_), log_.n_users, log_.n_items, lay.data)
    return lay.data


def do_ingest(cfg: dict, lay: Layout, source) -> Path:
    log_ = ingest(source, cfg["format"])
    n = len(log_)
    if cfg["kcore"] > 1:
        log_ = kcore_filter(log_, cfg["kcore"])
        if len(log_) == 0:
            raise DataError(f"{cfg['kcore']}-core filtering left no records")
    lay.data.parent.mkdir(parents=True, exist_ok=True)
    log_.write_csv(lay.data)
    write_config(cfg, lay.data.parent)
    log.info("ingest: %d records read, %d kept (%d users, %d items)", n, len(log_), log_.n_users, log_.n_items)
    return lay.data


def do_split(cfg: dict, lay: Layout, cycle: int) -> TemporalSplit:
    _check_cycle(cfg, cycle)
    ts = cfg["timestamps"]
    split = temporal_split(load_log(cfg, lay), ts[cycle - 1], ts[cycle] if cycle < len(ts) else None)
    d = lay.phase(cycle, "split")
    d.mkdir(parents=True, exist_ok=True)
    (d / "split.json").write_text(json.dumps(split.to_json()), encoding="utf-8")
    write_config(cfg, d)
    log.info("split %d: %s", cycle, split.summary())
    return split


def do_pretrain(cfg: dict, lay: Layout) -> RecModel:
    split = load_split(lay, 1)
    model = RecModel(model_config(cfg, split.n_items))
    enc = Encoder(split.n_items, cfg["max_seq_len"])
    losses = pretrain(model, pretrain_instances(split, enc), cfg["pretrain_epochs"], cfg["pretrain_lr"],
                      cfg["pretrain_batch_size"], cfg["seed"])
    fm = FilterModel(filter_config(cfg, split.n_items))
    check_size(fm, model)
    f_losses = pretrain_filter(fm, split, cfg["filter_epochs"], cfg["filter_lr"], cfg["seed"])
    save_checkpoint(model, lay.pretrain / "model", model.cfg.to_dict(), cfg["seed"],
                    {"phase": "pretrain", "T": split.T, "losses": losses})
    save_checkpoint(fm, lay.pretrain / "filter", asdict(fm.cfg), cfg["seed"],
                    {"phase": "pretrain", "T": split.T, "losses": f_losses})
    write_config(cfg, lay.pretrain)
    return model


def do_locate(cfg: dict, lay: Layout, cycle: int) -> SensitivityReport:
    _check_cycle(cfg, cycle)
    split, model = load_split(lay, cycle), load_model(lay, cycle - 1)
    before = state_hash(model)
    t0 = time.perf_counter()
    report = locate(model, split, cfg["t"])
    report.meta["seconds"] = time.perf_counter() - t0
    if state_hash(model) != before:
        raise RuntimeError("locate modified the model")
    d = lay.phase(cycle, "locate")
    report.write(d / "report.json")
    write_config(cfg, d)
    return report


def do_forget(cfg: dict, lay: Layout, cycle: int) -> ForgetResult:
    _check_cycle(cfg, cycle)
    split, fm = load_split(lay, cycle), load_filter(lay, cycle - 1)
    t0 = time.perf_counter()
    finetune_filter(fm, split, cfg["filter_finetune_epochs"], cfg["filter_lr"], cfg["seed"])
    result = forget(fm, split, cfg["K"])
    seconds = time.perf_counter() - t0
    d = lay.phase(cycle, "forget")
    result.write_jsonl(d / "filtered.jsonl")
    summary = {"seconds": seconds, "users": len(result.records),
               "dropped": sum(len(r["dropped"]) for r in result.records)}
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    save_checkpoint(fm, d / "filter", asdict(fm.cfg), cfg["seed"], {"phase": "forget", "cycle": cycle})
    write_config(cfg, d)
    return result


def do_update(cfg: dict, lay: Layout, cycle: int, strategy: str | None = None) -> RecModel:
    _check_cycle(cfg, cycle)
    ecfg = evolution_config(cfg, strategy)
    split, model = load_split(lay, cycle), load_model(lay, cycle - 1)
    report = forgotten = None
    if ecfg.strategy == "evorec":
        rpath = lay.phase(cycle, "locate") / "report.json"
        fpath = lay.phase(cycle, "forget") / "filtered.jsonl"
        if not rpath.exists():
            raise MissingArtifactError(rpath, f"locate --cycle {cycle}")
        if not fpath.exists():
            raise MissingArtifactError(fpath, f"forget --cycle {cycle}")
        report, forgotten = SensitivityReport.read(rpath), ForgetResult.read_jsonl(fpath)
    model, runlog = run_strategy(ecfg, model, split, report, forgotten)
    d = lay.phase(cycle, "update")
    runlog.write(d)
    save_checkpoint(model, d / "model", model.cfg.to_dict(), cfg["seed"],
                    {"phase": "update", "cycle": cycle, "strategy": ecfg.strategy})
    write_config(cfg, d)
    return model


def do_evaluate(cfg: dict, lay: Layout, cycle: int, strategy: str | None = None) -> MetricsReport:
    """Cycle 0 scores the pretrained model on the first split."""
    _check_cycle(cfg, cycle, allow_zero=True)
    split, model = load_split(lay, max(cycle, 1)), load_model(lay, cycle)
    name = strategy or cfg["strategy"]
    report = evaluate(model, split, eval_seed(cfg), cycle=cycle, strategy=name,
                      provenance={"model_sha256": read_manifest(lay.model_dir(cycle))["sha256"]})
    report.check()
    d = lay.phase(cycle, "eval")
    report.write(d)
    write_config(cfg, d)
    return report


def do_run_cycle(cfg: dict, lay: Layout, cycle: int, strategy: str | None = None) -> MetricsReport:
    """split, locate, forget, update and evaluate, exactly as the phase commands would."""
    strategy = strategy or cfg["strategy"]
    do_split(cfg, lay, cycle)
    if strategy == "evorec":
        do_locate(cfg, lay, cycle)
        do_forget(cfg, lay, cycle)
    do_update(cfg, lay, cycle, strategy)
    return do_evaluate(cfg, lay, cycle, strategy)


def series_csv(report: MetricsReport) -> str:
    """One row per (strategy, user set, metric), one column per cycle."""
    cycles = sorted({r.cycle for r in report.rows})
    strategies = list(dict.fromkeys(r.strategy for r in report.rows))
    cell = {(r.strategy, r.user_set, r.metric, r.cycle): r.value for r in report.rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "user_set", "metric"] + [f"cycle_{c}" for c in cycles])
    for s in strategies:
        for us in USER_SETS:
            for m in METRICS:
                if (s, us, m, cycles[-1]) in cell:
                    w.writerow([s, us, m] + [f"{cell[(s, us, m, c)]:.6f}" if (s, us, m, c) in cell else ""
                                             for c in cycles])
    return buf.getvalue()


def do_compare(cfg: dict, lay: Layout, strategies) -> MetricsReport:
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    if not lay.data.exists() and not cfg["data"]:
        raise MissingArtifactError(lay.data, "gen-data or ingest")
    if not (lay.model_dir(0) / "manifest.json").exists():
        do_split(cfg, lay, 1)
        do_pretrain(cfg, lay)
    combined = MetricsReport(provenance={"strategies": list(strategies), "seed": cfg["seed"]})
    efficiency = []
    out = lay.root / "compare"
    for s in strategies:
        sub = Layout(out / s, shared=lay.root)
        scfg = dict(cfg, strategy=s)
        do_split(scfg, sub, 1)
        combined.extend(do_evaluate(scfg, sub, 0, s))
        for c in range(1, len(cfg["timestamps"]) + 1):
            combined.extend(do_run_cycle(scfg, sub, c, s))
            summary = json.loads((sub.phase(c, "update") / "summary.json").read_text(encoding="utf-8"))
            row = {"strategy": s, "cycle": c, "updated_params": summary["updated_params"],
                   "total_adapter_params": summary["total_adapter_params"], "steps": summary["steps"],
                   "locate_seconds": 0.0, "forget_seconds": 0.0, "update_seconds": summary["update_seconds"]}
            if s == "evorec":
                row["locate_seconds"] = SensitivityReport.read(sub.phase(c, "locate") / "report.json").meta["seconds"]
                row["forget_seconds"] = json.loads(
                    (sub.phase(c, "forget") / "summary.json").read_text(encoding="utf-8"))["seconds"]
            row["total_seconds"] = row["locate_seconds"] + row["forget_seconds"] + row["update_seconds"]
            efficiency.append(row)
    combined.check()
    out.mkdir(parents=True, exist_ok=True)
    combined.write(out, per_user=True)
    (out / "series.csv").write_text(series_csv(combined), encoding="utf-8")
    with open(out / "efficiency.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(efficiency[0]) if efficiency else ["strategy"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(efficiency)
    write_config(cfg, out)
    return combined


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (value parsed as JSON when possible)")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    cyc = argparse.ArgumentParser(add_help=False)
    cyc.add_argument("--cycle", type=int, default=1, help="cycle index, 1-based (default 1)")

    p = _Parser(prog="driftrec", description="Locate, forget and update a drifting sequential recommender.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic drift log")
    ing = sub.add_parser("ingest", parents=[common], help="normalize a CSV/JSONL interaction log")
    ing.add_argument("input", help="path to the raw log")
    ing.add_argument("--format", choices=("csv", "jsonl"))
    ing.add_argument("--kcore", type=int, help="k-core filter (default: off)")
    sub.add_parser("split", parents=[common, cyc], help="temporal split at the cycle's timestamp")
    sub.add_parser("pretrain", parents=[common], help="train the base recommender and the filter")
    sub.add_parser("locate", parents=[common, cyc], help="find the drift-sensitive layers")
    sub.add_parser("forget", parents=[common, cyc], help="fine-tune the filter and drop outdated items")
    up = sub.add_parser("update", parents=[common, cyc], help="apply an update strategy")
    up.add_argument("--strategy", choices=STRATEGIES)
    ev = sub.add_parser("evaluate", parents=[common], help="HR/NDCG on U_A, U_I and U")
    ev.add_argument("--cycle", type=int, default=1, help="0 scores the pretrained model")
    ev.add_argument("--strategy", choices=STRATEGIES)
    rc = sub.add_parser("run-cycle", parents=[common, cyc], help="split, locate, forget, update, evaluate")
    rc.add_argument("--strategy", choices=STRATEGIES)
    cmp_ = sub.add_parser("compare", parents=[common], help="run every cycle for several strategies")
    cmp_.add_argument("--strategies", default=",".join(STRATEGIES),
                      help="comma-separated list (default: all)")
    return p


def run(args) -> int:
    flags = {"out": args.out, "seed": args.seed}
    if args.command == "ingest":
        flags.update(format=args.format, kcore=args.kcore)
    cfg = resolve_config(args.config, args.overrides, **flags)
    lay = Layout(cfg["out"])
    strategy = getattr(args, "strategy", None)
    cycle = getattr(args, "cycle", None)
    cmd = args.command
    if cmd == "gen-data":
        do_gen_data(cfg, lay)
    elif cmd == "ingest":
        do_ingest(cfg, lay, args.input)
    elif cmd == "split":
        do_split(cfg, lay, cycle)
    elif cmd == "pretrain":
        do_pretrain(cfg, lay)
    elif cmd == "locate":
        do_locate(cfg, lay, cycle)
    elif cmd == "forget":
        do_forget(cfg, lay, cycle)
    elif cmd == "update":
        do_update(cfg, lay, cycle, strategy)
    elif cmd == "evaluate":
        print(do_evaluate(cfg, lay, cycle, strategy).to_csv(), end="")
    elif cmd == "run-cycle":
        print(do_run_cycle(cfg, lay, cycle, strategy).to_csv(), end="")
    elif cmd == "compare":
        names = [s.strip() for s in args.strategies.split(",") if s.strip()]
        report = do_compare(cfg, lay, names)
        print((lay.root / "compare" / "series.csv").read_text(encoding="utf-8"), end="")
        log.info("compare: %d metric rows", len(report.rows))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
