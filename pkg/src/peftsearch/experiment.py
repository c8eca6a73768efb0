"""Experiment orchestration: config parsing, modes, transfer, reports.

A run maps (config, seeds) deterministically to a report directory with
figure-ready CSVs and JSON summaries. Ablation modes swap out the
scoring step while consuming the same search-epoch budget as the hybrid
mode.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, replace

from . import criteria as C
from . import pruner as P
from . import strategy as ST
from . import supernet as S
from . import tasks as TK

MODES = ("hybrid", "random-prune", "no-partition", "no-prune")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: TK.SyntheticTaskSpec
    net: S.SupernetConfig
    mode: str = "hybrid"
    seeds: tuple = (0,)
    budget: int | None = None
    k: int | None = None
    steps_per_round: int | None = None
    fidelity: str = "full"
    reinit_survivors: bool = True
    warmup_rounds: int = 3
    trim_fraction: float = 0.1
    low_fidelity_fraction: float = 0.01
    retrain_epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 20
    report_dir: str | None = None
    strategy_doc: dict | None = None
    architecture_doc: dict | None = None

    def __post_init__(self):
        if not (self.mode in MODES or self.mode.startswith("single:")):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode.startswith("single:"):
            tag = self.mode.split(":", 1)[1]
            if tag not in C.CRITERIA_ORDER:
                raise ConfigError(f"unknown criterion {tag!r} in mode {self.mode!r}")
        if self.fidelity not in ("full", "low"):
            raise ConfigError(f"fidelity must be 'full' or 'low', got {self.fidelity!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.warmup_rounds < 1:
            raise ConfigError("warmup_rounds must be >= 1")
        if not (0 < self.trim_fraction <= 1) or not (0 < self.low_fidelity_fraction <= 1):
            raise ConfigError("trim fractions must lie in (0, 1]")
        if self.retrain_epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("invalid training parameters")


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    records: list
    log: P.SearchLog
    strategy_doc: dict | None = None
    architecture_doc: dict | None = None
    tendency: dict | None = None


@dataclass
class Report:
    config: dict
    mode: str
    per_seed: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# config files


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "task": asdict(config.task),
        "supernet": S.config_to_dict(config.net),
        "mode": config.mode,
        "seeds": list(config.seeds),
        "schedule": {
            "budget": config.budget,
            "k": config.k,
            "steps_per_round": config.steps_per_round,
            "fidelity": config.fidelity,
            "reinit_survivors": config.reinit_survivors,
        },
        "warmup": {
            "rounds": config.warmup_rounds,
            "trim_fraction": config.trim_fraction,
        },
        "low_fidelity_fraction": config.low_fidelity_fraction,
        "training": {
            "retrain_epochs": config.retrain_epochs,
            "lr": config.lr,
            "batch_size": config.batch_size,
        },
        "report_dir": config.report_dir,
    }


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing key {key!r} in {where}")
    return section[key]


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    try:
        task = TK.SyntheticTaskSpec(**_require(doc, "task", "config"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid task section: {exc}") from exc
    try:
        net = S.config_from_dict(_require(doc, "supernet", "config"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid supernet section: {exc}") from exc
    schedule = doc.get("schedule", {})
    warm = doc.get("warmup", {})
    training = doc.get("training", {})
    try:
        return ExperimentConfig(
            task=task,
            net=net,
            mode=doc.get("mode", "hybrid"),
            seeds=tuple(doc.get("seeds", [0])),
            budget=schedule.get("budget"),
            k=schedule.get("k"),
            steps_per_round=schedule.get("steps_per_round"),
            fidelity=schedule.get("fidelity", "full"),
            reinit_survivors=schedule.get("reinit_survivors", True),
            warmup_rounds=warm.get("rounds", 3),
            trim_fraction=warm.get("trim_fraction", 0.1),
            low_fidelity_fraction=doc.get("low_fidelity_fraction", 0.01),
            retrain_epochs=training.get("retrain_epochs", 20),
            lr=training.get("lr", 1e-3),
            batch_size=training.get("batch_size", 20),
            report_dir=doc.get("report_dir"),
        )
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# running


def _single_tag(mode: str):
    return mode.split(":", 1)[1] if mode.startswith("single:") else None


def _run_seed(config: ExperimentConfig, seed: int) -> SeedResult:
    net = S.build_supernet(config.net, seed)
    train, val, test = TK.generate_task(config.task)
    log = P.SearchLog(retrain_epochs=float(config.retrain_epochs))

    if config.architecture_doc is not None:
        arch_cfg, flags, _ = S.architecture_from_doc(config.architecture_doc)
        if arch_cfg.num_layers != config.net.num_layers:
            raise ConfigError(
                f"architecture document has {arch_cfg.num_layers} layers,"
                f" config has {config.net.num_layers}")
        mask = S.MaskState(flags.keys(), flags)
        records = []
        strategy_doc = None
        tendency = None
    elif config.mode == "no-prune":
        mask = net.mask.copy()
        records = []
        strategy_doc = None
        tendency = None
    else:
        d_warm = TK.stratified_trim(train, config.trim_fraction, seed)
        partitions = ST.partition_layers(config.net.num_layers)
        warm_steps = -(-len(d_warm) // config.batch_size)
        k = config.k if config.k is not None else P.default_k(net)

        if config.strategy_doc is not None:
            strategy, score_partitions = ST.HybridStrategy.from_doc(config.strategy_doc)
            tendency = None
        else:
            table = ST.warmup(
                net,
                lambda rng: TK.Batcher(d_warm, config.batch_size, rng),
                warm_steps, C.default_criteria(), config.warmup_rounds, k,
                partitions, config.lr, seed)
            log.warmup_epochs = config.warmup_rounds * warm_steps * min(
                config.batch_size, len(d_warm)) / len(train)
            tendency = table.to_dict()
            if config.mode == "hybrid":
                strategy = ST.assign_strategies(table)
                score_partitions = partitions
            elif config.mode == "no-partition":
                crit = ST.global_best_criterion(table)
                score_partitions = [ST.Partition(1, 0, config.net.num_layers)]
                strategy = ST.HybridStrategy({1: crit})
            elif _single_tag(config.mode):
                crit = C.Criterion(_single_tag(config.mode))
                strategy = ST.HybridStrategy({p.index: crit for p in partitions})
                score_partitions = partitions
            else:  # random-prune: warm-up ran for epoch parity, table unused
                strategy = None
                score_partitions = partitions

        if config.mode == "random-prune":
            scorer = ST.random_scorer()
            strategy_doc = None
        else:
            scorer = ST.hybrid_scorer(strategy, score_partitions)
            strategy_doc = strategy.to_doc(score_partitions)

        budget = config.budget if config.budget is not None else P.default_budget(net)
        d_low = (TK.stratified_trim(train, config.low_fidelity_fraction, seed)
                 if config.fidelity == "low" else d_warm)
        round_data = d_low if config.fidelity == "low" else train
        steps = (config.steps_per_round if config.steps_per_round is not None
                 else -(-len(round_data) // config.batch_size))
        schedule = P.derive_schedule(budget, net, k, steps, config.fidelity,
                                     config.reinit_survivors)
        mask, records, search_log = P.run_search(
            net, train, d_low, scorer, schedule, config.lr, config.batch_size, seed)
        log.prune_epochs = search_log.prune_epochs
        log.wall_seconds = search_log.wall_seconds

    metrics = P.retrain(net, mask, train, config.retrain_epochs, config.lr,
                        config.batch_size, seed, eval_data=test)
    metrics["val_accuracy"] = P.evaluate(net, val)
    metrics["trainable_params"] = S.trainable_param_count(net, mask)
    arch_doc = S.architecture_to_doc(net, mask)
    return SeedResult(seed=seed, metrics=metrics, records=records, log=log,
                      strategy_doc=strategy_doc, architecture_doc=arch_doc,
                      tendency=tendency)


def run_experiment(config: ExperimentConfig) -> Report:
    report = Report(config=config_to_dict(config), mode=config.mode)
    for seed in config.seeds:
        report.per_seed.append(_run_seed(config, int(seed)))
    return report


# ---------------------------------------------------------------------------
# report serialization


def _record_to_dict(rec: P.PruneRecord) -> dict:
    return {
        "round": rec.round_index,
        "pruned": [{"layer": m.layer, "kind": m.kind,
                    "criterion": rec.criterion_by_module.get(m, "")}
                   for m in rec.pruned],
        "probabilities": [
            {"layer": m.layer, "kind": m.kind, "p": float(p)}
            for m, p in zip(rec.probabilities.ids, rec.probabilities.p)
        ],
        "param_count_after": rec.param_count_after,
    }


def report_to_dict(report: Report) -> dict:
    per_seed = []
    for sr in report.per_seed:
        per_seed.append({
            "seed": sr.seed,
            "metrics": sr.metrics,
            "records": [_record_to_dict(r) for r in sr.records],
            "epochs": {
                "warmup": sr.log.warmup_epochs,
                "prune": sr.log.prune_epochs,
                "search_total": sr.log.search_epochs,
                "retrain": sr.log.retrain_epochs,
            },
            "strategy": sr.strategy_doc,
            "architecture": sr.architecture_doc,
            "tendency": sr.tendency,
        })
    return {"config": report.config, "mode": report.mode, "per_seed": per_seed}


def frequency_counts(report_doc: dict) -> dict:
    """(layer, kind, criterion) -> prune count, aggregated over seeds."""
    counts = {}
    for sr in report_doc["per_seed"]:
        for rec in sr["records"]:
            for mod in rec["pruned"]:
                key = (mod["layer"], mod["kind"], mod["criterion"])
                counts[key] = counts.get(key, 0) + 1
    return counts


def epoch_summary(report_doc: dict) -> dict:
    seeds = report_doc["per_seed"]
    n = len(seeds)
    warm = sum(s["epochs"]["warmup"] for s in seeds) / n
    prune = sum(s["epochs"]["prune"] for s in seeds) / n
    retrain = sum(s["epochs"]["retrain"] for s in seeds) / n
    search = warm + prune
    return {
        "warmup_epochs": warm,
        "prune_epochs": prune,
        "search_epochs": search,
        "retrain_epochs": retrain,
        "ratio": search / retrain if retrain else 0.0,
    }


def export_strategy(report_doc: dict) -> dict:
    for sr in report_doc["per_seed"]:
        if sr.get("strategy"):
            return sr["strategy"]
    raise ValueError("report contains no hybrid strategy to export")


def export_architecture(report_doc: dict) -> dict:
    for sr in report_doc["per_seed"]:
        if sr.get("architecture"):
            return sr["architecture"]
    raise ValueError("report contains no architecture to export")


def import_strategy(doc: dict, config: ExperimentConfig) -> ExperimentConfig:
    ST.HybridStrategy.from_doc(doc)  # validates criterion tags
    return replace(config, strategy_doc=doc)


def import_architecture(doc: dict, config: ExperimentConfig) -> ExperimentConfig:
    arch_cfg, _, _ = S.architecture_from_doc(doc)
    if arch_cfg.num_layers != config.net.num_layers:
        raise ConfigError(
            f"architecture document has {arch_cfg.num_layers} layers,"
            f" config has {config.net.num_layers}")
    return replace(config, architecture_doc=doc)


# ---------------------------------------------------------------------------
# emission


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def emit_reports(report_doc: dict, out_dir: str):
    """Write the report files; emission is a pure function of the report."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"report directory {out_dir!r} is not writable: {exc}") from exc

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "kind", "criterion", "count"])
    for (layer, kind, criterion), count in sorted(frequency_counts(report_doc).items()):
        writer.writerow([layer, kind, criterion, count])
    _write(os.path.join(out_dir, "frequency.csv"), buf.getvalue())

    rounds = {str(sr["seed"]): sr["records"] for sr in report_doc["per_seed"]}
    _write(os.path.join(out_dir, "rounds.json"), _dump_json(rounds))

    summary = {
        "mode": report_doc["mode"],
        "epochs": epoch_summary(report_doc),
        "per_seed_epochs": {str(sr["seed"]): sr["epochs"]
                            for sr in report_doc["per_seed"]},
        "tendency": {str(sr["seed"]): sr["tendency"]
                     for sr in report_doc["per_seed"] if sr.get("tendency")},
    }
    _write(os.path.join(out_dir, "summary.json"), _dump_json(summary))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "accuracy", "val_accuracy", "train_accuracy",
                     "trainable_params", "final_loss"])
    for sr in report_doc["per_seed"]:
        m = sr["metrics"]
        writer.writerow([sr["seed"], m.get("accuracy"), m.get("val_accuracy"),
                         m.get("train_accuracy"), m.get("trainable_params"),
                         m["loss_curve"][-1]])
    _write(os.path.join(out_dir, "metrics.csv"), buf.getvalue())

    _write(os.path.join(out_dir, "report.json"), _dump_json(report_doc))
    try:
        _write(os.path.join(out_dir, "strategy.json"),
               _dump_json(export_strategy(report_doc)))
    except ValueError:
        pass
    _write(os.path.join(out_dir, "architecture.json"),
           _dump_json(export_architecture(report_doc)))
