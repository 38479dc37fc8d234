import json

import numpy as np
import pytest

from fedliab.harness import (
    ConfigError,
    ExperimentConfig,
    audit_run_dir,
    config_from_mapping,
    config_to_mapping,
    load_config,
    load_experiment_data,
    measure_overhead,
    node_datasets,
    overhead_report_dict,
    parse_config_text,
    preferred_classes,
    rerun_from_manifest,
    run_and_export,
    run_scenario,
)

TINY = dict(
    classes=6,
    train_per_class=80,
    test_per_class=25,
    image_size=12,
    nodes=4,
    per_node_size=60,
    bias_factor=5.0,
    rounds=3,
    batch_size=20,
    attack_source=2,
    attack_target=5,
    seed=3,
)


def tiny_config(**overrides):
    return ExperimentConfig(**{**TINY, **overrides})


class TestConfig:
    def test_parse_text(self):
        cfg = parse_config_text(
            """
            # comment
            nodes = 4
            lr = 0.1
            scenario = all_correct
            couple_attacker_preferred = true
            lrp_epsilon = auto
            """
        )
        assert cfg.nodes == 4 and cfg.lr == 0.1
        assert cfg.scenario == "all_correct"
        assert cfg.couple_attacker_preferred is True
        assert cfg.lrp_epsilon is None

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_text("nodes = 4\nbogus = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("nodes = many\n")

    def test_bad_scenario_rejected(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"scenario": "sideways"})

    def test_attacker_range_checked(self):
        with pytest.raises(ConfigError, match="attacker"):
            config_from_mapping({"nodes": 3, "attacker": 3})

    def test_idx_requires_paths(self):
        with pytest.raises(ConfigError, match="idx"):
            config_from_mapping({"dataset": "idx"})

    def test_mapping_round_trip(self):
        cfg = tiny_config(lrp_epsilon=1e-7)
        back = config_from_mapping(config_to_mapping(cfg))
        assert back == cfg

    def test_manifest_loadable_as_json(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(config_to_mapping(cfg)))
        assert load_config(path) == cfg


class TestPreferredClasses:
    def test_coupling_override(self):
        cfg = tiny_config(couple_attacker_preferred=True)
        prefs = preferred_classes(cfg)
        assert prefs[cfg.attacker] == cfg.attack_source
        assert sorted(set(prefs)) == sorted(set(prefs))  # still valid classes

    def test_default_draw_is_deterministic(self):
        cfg = tiny_config()
        assert preferred_classes(cfg) == preferred_classes(cfg)


@pytest.fixture(scope="module")
def retrain_result():
    return run_scenario(tiny_config(scenario="audited_retrain"))


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = run_and_export(tiny_config(scenario="with_misbehaving"), out)
    return out, result


class TestScenarios:
    def test_all_correct_single_phase(self):
        result = run_scenario(tiny_config(scenario="all_correct"))
        assert list(result.phases) == ["all_correct"]
        phase = result.phases["all_correct"]
        assert phase.message_count == 2 * 4 * 3
        assert phase.tensor.dims == (3, 4, 4)

    def test_retrain_excludes_flagged(self, retrain_result):
        faulty = retrain_result.phases["with_misbehaving"]
        retrained = retrain_result.phases["audited_retrain"]
        expected_survivors = tuple(
            i for i in range(4) if i not in faulty.audit.flagged
        )
        assert retrained.node_ids == expected_survivors
        assert retrained.message_count == 2 * len(expected_survivors) * 3

    def test_scores_shapes(self, retrain_result):
        phase = retrain_result.phases["with_misbehaving"]
        for trace in phase.scores.values():
            assert trace.shape == (3, 4)

    def test_audit_targets_predicted_class(self, retrain_result):
        phase = retrain_result.phases["with_misbehaving"]
        assert phase.selection.rule in ("misclassified", "lowest_margin")
        assert 0 <= phase.selection.target_class < 6
        assert np.isclose(phase.selection.layer_weights.sum(), 1.0)

    def test_corruption_applied_only_to_attacker(self):
        cfg = tiny_config()
        clean = node_datasets(cfg, load_experiment_data(cfg)[0], corrupted=False)
        bad = node_datasets(cfg, load_experiment_data(cfg)[0], corrupted=True)
        assert np.sum(bad[cfg.attacker].labels == cfg.attack_source) == 0
        for n in range(4):
            if n != cfg.attacker:
                np.testing.assert_array_equal(bad[n].labels, clean[n].labels)


class TestExport:
    def test_files_written(self, exported):
        out, _ = exported
        for name in (
            "accuracy.csv",
            "scores.csv",
            "audit.json",
            "overhead.json",
            "manifest.json",
            "distances.bin",
            "model.bin",
            "relevance.json",
            "relevance.pgm",
        ):
            assert (out / name).exists(), name

    def test_scores_row_count(self, exported):
        out, _ = exported
        lines = (out / "scores.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 * 3 * 4  # header + 3 metrics * E * N

    def test_audit_json_matches_detect(self, exported):
        out, result = exported
        blob = json.loads((out / "audit.json").read_text())
        phase = result.phases["with_misbehaving"]
        assert blob["flagged"] == list(phase.audit.flagged)
        assert blob["sample_id"] == phase.audit.sample_id
        assert blob["selection_rule"] == phase.selection.rule

    def test_accuracy_rows(self, exported):
        out, result = exported
        lines = (out / "accuracy.csv").read_text().splitlines()
        assert lines[0] == "scenario,class,accuracy"
        assert len(lines) == 1 + (1 + 6)  # one phase: overall + per-class rows

    def test_manifest_rerun_reproduces(self, exported, tmp_path):
        out, _ = exported
        rerun_dir = tmp_path / "rerun"
        rerun_from_manifest(out / "manifest.json", rerun_dir)
        for name in ("accuracy.csv", "scores.csv", "audit.json", "manifest.json"):
            assert (rerun_dir / name).read_bytes() == (out / name).read_bytes(), name

    def test_audit_cli_surface(self, exported):
        out, result = exported
        phase = result.phases["with_misbehaving"]
        blob = audit_run_dir(out, phase.audit.sample_id)
        assert blob["per_node_mean"] == [float(v) for v in phase.audit.per_node_mean]
        assert blob["flagged"] == list(phase.audit.flagged)

    def test_audit_bad_sample_id(self, exported):
        out, _ = exported
        with pytest.raises(RuntimeError, match="sample id"):
            audit_run_dir(out, 10**6)


class TestOverhead:
    def test_report_fields(self):
        cfg = tiny_config(rounds=2)
        report = measure_overhead(cfg, inference_calls=40, train_repeats=1)
        blob = overhead_report_dict(report)
        assert report.message_count == 2 * 4 * 2
        assert report.relevance_bytes_per_sample == 8 * 12 * 12
        assert report.similarity_bytes_per_epoch_per_node > 4 * 8
        assert report.inference_overhead_ratio > 0
        assert set(blob) == set(report.__dataclass_fields__)
