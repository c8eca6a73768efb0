import json
import os

import numpy as np
import pytest

from peftsearch import cli
from peftsearch import experiment as E
from peftsearch import supernet as S
from peftsearch import tasks as TK

TASK = TK.SyntheticTaskSpec("t", 12, 8, 2, "token-majority", 40, 8, 16, 5)
NET = S.SupernetConfig(4, 16, 2, 16, 4, 2, 12, 2, 8)


def make_config(**overrides):
    base = dict(task=TASK, net=NET, seeds=(0,), retrain_epochs=2,
                warmup_rounds=1, trim_fraction=0.5, batch_size=20)
    base.update(overrides)
    return E.ExperimentConfig(**base)


class TestConfigValidation:
    def test_unknown_mode_rejected(self):
        with pytest.raises(E.ConfigError, match="mode"):
            make_config(mode="magic")

    def test_unknown_single_criterion_rejected(self):
        with pytest.raises(E.ConfigError, match="criterion"):
            make_config(mode="single:entropy")

    def test_single_criterion_modes_accepted(self):
        assert make_config(mode="single:weight").mode == "single:weight"

    def test_empty_seed_list_rejected(self):
        with pytest.raises(E.ConfigError, match="seed"):
            make_config(seeds=())

    def test_bad_fractions_rejected(self):
        with pytest.raises(E.ConfigError):
            make_config(trim_fraction=0.0)
        with pytest.raises(E.ConfigError):
            make_config(low_fidelity_fraction=2.0)


class TestConfigFiles:
    def test_dict_round_trip(self):
        cfg = make_config(mode="random-prune", seeds=(1, 2), fidelity="low",
                          budget=500, lr=5e-4)
        assert E.config_from_dict(E.config_to_dict(cfg)) == cfg

    def test_missing_task_section_reported(self):
        with pytest.raises(E.ConfigError, match="task"):
            E.config_from_dict({"supernet": S.config_to_dict(NET)})

    def test_invalid_supernet_section_reported(self):
        doc = E.config_to_dict(make_config())
        doc["supernet"]["num_heads"] = 3
        with pytest.raises(E.ConfigError, match="supernet"):
            E.config_from_dict(doc)

    def test_load_config_rejects_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(E.ConfigError, match="JSON"):
            E.load_config(str(path))

    def test_load_config_reads_file(self, tmp_path):
        cfg = make_config()
        path = tmp_path / "c.json"
        path.write_text(json.dumps(E.config_to_dict(cfg)), encoding="utf-8")
        assert E.load_config(str(path)) == cfg


class TestRunModes:
    def test_hybrid_produces_records_strategy_and_tendency(self):
        report = E.run_experiment(make_config())
        sr = report.per_seed[0]
        assert sr.records
        assert sr.strategy_doc is not None
        assert sr.tendency is not None
        assert sr.log.warmup_epochs > 0
        assert sr.log.prune_epochs > 0
        assert "accuracy" in sr.metrics

    def test_no_prune_keeps_everything_and_skips_search(self):
        report = E.run_experiment(make_config(mode="no-prune"))
        sr = report.per_seed[0]
        assert sr.records == []
        assert sr.log.search_epochs == 0
        assert sr.metrics["trainable_params"] == S.trainable_param_count(
            S.build_supernet(NET, 0))

    def test_random_prune_reaches_budget_without_strategy(self):
        report = E.run_experiment(make_config(mode="random-prune"))
        sr = report.per_seed[0]
        assert sr.strategy_doc is None
        assert sr.records
        assert sr.log.warmup_epochs > 0  # epoch parity with hybrid search

    def test_no_partition_uses_a_single_global_block(self):
        report = E.run_experiment(make_config(mode="no-partition"))
        doc = report.per_seed[0].strategy_doc
        assert len(doc["partitions"]) == 1
        assert doc["partitions"][0] == {
            "partition": 1, "lo": 0, "hi": NET.num_layers,
            "criterion": doc["partitions"][0]["criterion"]}

    def test_single_mode_applies_one_criterion_everywhere(self):
        report = E.run_experiment(make_config(mode="single:gradient"))
        doc = report.per_seed[0].strategy_doc
        assert {e["criterion"] for e in doc["partitions"]} == {"gradient"}

    def test_ablations_share_the_search_epoch_budget(self):
        logs = {}
        for mode in ("hybrid", "random-prune", "single:weight"):
            report = E.run_experiment(make_config(mode=mode))
            logs[mode] = report.per_seed[0].log
        assert logs["hybrid"].warmup_epochs == logs["random-prune"].warmup_epochs
        assert logs["hybrid"].warmup_epochs == logs["single:weight"].warmup_epochs

    def test_low_fidelity_trains_rounds_on_the_small_split(self):
        full = E.run_experiment(make_config()).per_seed[0]
        low = E.run_experiment(
            make_config(fidelity="low", low_fidelity_fraction=0.25)).per_seed[0]
        assert low.log.prune_epochs < full.log.prune_epochs

    def test_runs_are_deterministic(self):
        a = E.report_to_dict(E.run_experiment(make_config(seeds=(0, 1))))
        b = E.report_to_dict(E.run_experiment(make_config(seeds=(0, 1))))
        assert a == b


class TestTransfer:
    def test_strategy_export_import_round_trip(self):
        report = E.report_to_dict(E.run_experiment(make_config()))
        doc = E.export_strategy(report)
        cfg = E.import_strategy(doc, make_config(task=TK.SyntheticTaskSpec(
            "other", 12, 8, 2, "pattern-presence", 40, 8, 16, 9)))
        transferred = E.run_experiment(cfg).per_seed[0]
        assert transferred.strategy_doc == doc
        assert transferred.tendency is None  # warm-up skipped
        assert transferred.log.warmup_epochs == 0

    def test_architecture_import_skips_search_entirely(self):
        report = E.report_to_dict(E.run_experiment(make_config()))
        arch = E.export_architecture(report)
        cfg = E.import_architecture(arch, make_config())
        sr = E.run_experiment(cfg).per_seed[0]
        assert sr.records == []
        assert sr.log.search_epochs == 0
        assert sr.architecture_doc["modules"] == arch["modules"]

    def test_architecture_layer_mismatch_rejected(self):
        report = E.report_to_dict(E.run_experiment(make_config()))
        arch = E.export_architecture(report)
        other = S.SupernetConfig(6, 16, 2, 16, 4, 2, 12, 2, 8)
        with pytest.raises(E.ConfigError, match="layers"):
            E.import_architecture(arch, make_config(net=other))

    def test_no_prune_report_has_no_strategy(self):
        report = E.report_to_dict(E.run_experiment(make_config(mode="no-prune")))
        with pytest.raises(ValueError, match="strategy"):
            E.export_strategy(report)


class TestReports:
    def test_epoch_summary_aggregates_means(self):
        report = E.report_to_dict(E.run_experiment(make_config(seeds=(0, 1))))
        summary = E.epoch_summary(report)
        warm = [s["epochs"]["warmup"] for s in report["per_seed"]]
        assert summary["warmup_epochs"] == pytest.approx(np.mean(warm))
        assert summary["search_epochs"] == pytest.approx(
            summary["warmup_epochs"] + summary["prune_epochs"])
        assert summary["ratio"] == pytest.approx(
            summary["search_epochs"] / summary["retrain_epochs"])

    def test_frequency_counts_match_records(self):
        report = E.report_to_dict(E.run_experiment(make_config()))
        counts = E.frequency_counts(report)
        pruned_total = sum(len(r["pruned"])
                           for sr in report["per_seed"] for r in sr["records"])
        assert sum(counts.values()) == pruned_total

    def test_emit_writes_expected_files(self, tmp_path):
        report = E.report_to_dict(E.run_experiment(make_config()))
        out = tmp_path / "r"
        E.emit_reports(report, str(out))
        names = {p.name for p in out.iterdir()}
        assert {"frequency.csv", "rounds.json", "summary.json", "metrics.csv",
                "report.json", "strategy.json", "architecture.json"} <= names

    def test_emission_is_byte_stable(self, tmp_path):
        report = E.report_to_dict(E.run_experiment(make_config()))
        a, b = tmp_path / "a", tmp_path / "b"
        E.emit_reports(report, str(a))
        E.emit_reports(report, str(b))
        for name in os.listdir(a):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_unwritable_directory_reported(self, tmp_path):
        blocker = tmp_path / "blocked"
        blocker.write_text("a plain file, not a directory", encoding="utf-8")
        with pytest.raises(OSError, match="not writable"):
            E.emit_reports(
                E.report_to_dict(E.run_experiment(make_config(mode="no-prune"))),
                str(blocker))


class TestCli:
    def _write_config(self, tmp_path, **overrides):
        cfg = make_config(**overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(E.config_to_dict(cfg)), encoding="utf-8")
        return str(path)

    def test_run_writes_reports_and_prints_summary(self, tmp_path, capsys):
        config = self._write_config(tmp_path)
        out = tmp_path / "run"
        assert cli.main(["run", "--config", config, "--out", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["mode"] == "hybrid"
        assert (out / "report.json").exists()

    def test_run_without_output_directory_fails_cleanly(self, tmp_path, capsys):
        config = self._write_config(tmp_path)
        assert cli.main(["run", "--config", config]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ConfigError"

    def test_mode_and_seed_overrides(self, tmp_path, capsys):
        config = self._write_config(tmp_path)
        out = tmp_path / "run"
        code = cli.main(["run", "--config", config, "--mode", "no-prune",
                         "--seeds", "3,4", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mode"] == "no-prune"
        assert [sr["seed"] for sr in report["per_seed"]] == [3, 4]

    def test_strategy_transfer_via_cli(self, tmp_path, capsys):
        config = self._write_config(tmp_path)
        native = tmp_path / "native"
        assert cli.main(["run", "--config", config, "--out", str(native)]) == 0
        strategy = tmp_path / "strategy.json"
        assert cli.main(["export-strategy", "--run", str(native),
                         "--out", str(strategy)]) == 0
        transferred = tmp_path / "transfer"
        assert cli.main(["import-strategy", "--config", config,
                         "--strategy", str(strategy),
                         "--out", str(transferred)]) == 0
        doc = json.loads((transferred / "strategy.json").read_text())
        assert doc == json.loads(strategy.read_text())

    def test_report_reemission_round_trips(self, tmp_path, capsys):
        config = self._write_config(tmp_path)
        out = tmp_path / "run"
        assert cli.main(["run", "--config", config, "--out", str(out)]) == 0
        again = tmp_path / "again"
        assert cli.main(["report", "--run", str(out), "--out", str(again)]) == 0
        assert (again / "report.json").read_bytes() == (out / "report.json").read_bytes()
