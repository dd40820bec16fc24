"""
実験ハーネス（スイープ・CSV・ポリシーマップ）のテスト
"""
import csv

import pytest

from spm_protocol.config import EnvConfig, ExperimentConfig
from spm_protocol.errors import ConfigError, ModelFileError
from spm_protocol.services.analytics import reconfigure_collision_free
from spm_protocol.services.experiments import (
    RUN_COLUMNS,
    LoadedModels,
    evaluate_policy,
    load_models,
    mean_of,
    model_info,
    policy_agreement,
    policy_map_export,
    policy_map_rows,
    run_experiment,
    sweep,
)
from spm_protocol.services.inference import SpmPolicy
from spm_protocol.services.neural_protocol import NPModel
from spm_protocol.services.npm_io import write_npm
from spm_protocol.services.problog_io import write_spm


def _read(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class TestSweep:
    def test_rows_and_columns(self, tmp_path):
        config = ExperimentConfig(
            scenario="smoke", protocols=["aloha", "silent"], repetitions=1, output_dir=str(tmp_path),
        )
        paths = run_experiment(config, EnvConfig())
        rows = _read(paths["runs"])
        assert len(rows) == 2
        assert tuple(rows[0].keys()) == RUN_COLUMNS
        assert [r["protocol"] for r in rows] == ["aloha", "silent"]
        assert float(rows[1]["goodput"]) == 0.0
        summary = _read(paths["summary"])
        assert len(summary) == 2
        assert summary[0]["runs"] == "1"

    def test_byte_identical_reruns(self, tmp_path):
        """同じ設定とシードなら同じバイト列のCSV"""
        outputs = []
        for name in ("a", "b"):
            config = ExperimentConfig(
                scenario="rerun", protocols=["aloha", "beb"], lambdas=[0.3, 0.7], repetitions=3,
                seed=11, output_dir=str(tmp_path / name),
            )
            paths = run_experiment(config, EnvConfig())
            with open(paths["runs"], "rb") as f:
                outputs.append(f.read())
        assert outputs[0] == outputs[1]

    def test_full_block_error_gives_zero_goodput(self):
        config = ExperimentConfig(protocols=["aloha", "beb"], eps_blocks=[1.0], repetitions=2)
        rows = sweep(config, EnvConfig())
        assert all(r["goodput"] == 0.0 for r in rows)

    def test_workers_match_serial(self):
        """並列実行でも結果と順序は逐次実行と同じ"""
        base = dict(protocols=["aloha", "beb"], lambdas=[0.2, 0.5, 0.8], repetitions=2, seed=3)
        serial = sweep(ExperimentConfig(**base), EnvConfig())
        parallel = sweep(ExperimentConfig(workers=2, **base), EnvConfig())
        assert serial == parallel

    def test_silent_never_accesses(self):
        config = ExperimentConfig(protocols=["silent"], repetitions=2, seed=1)
        rows = sweep(config, EnvConfig())
        assert all(r["n_access"] == 0 for r in rows)

    def test_plot_written(self, tmp_path):
        config = ExperimentConfig(
            scenario="plot", protocols=["aloha"], lambdas=[0.2, 0.6], repetitions=1,
            output_dir=str(tmp_path), plots=True,
        )
        paths = run_experiment(config, EnvConfig())
        with open(paths["plot"], encoding="utf-8") as f:
            assert "<svg" in f.read()


class TestModels:
    def test_missing_model_path(self):
        with pytest.raises(ModelFileError):
            load_models(ExperimentConfig(protocols=["npm"]))

    def test_missing_model_file(self, tmp_path):
        with pytest.raises(ModelFileError):
            load_models(ExperimentConfig(protocols=["spm"], spm_path=str(tmp_path / "absent.pl")))

    def test_unknown_protocol(self):
        with pytest.raises(ConfigError):
            load_models(ExperimentConfig(protocols=["csma"]))

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")
        config = ExperimentConfig(protocols=["silent"], repetitions=1, output_dir=str(blocker / "sub"))
        with pytest.raises(ConfigError):
            run_experiment(config, EnvConfig())

    def test_model_sweep(self, tmp_path, small_model, toy_spm):
        """NPM・SPM・再構成SPMをファイルから読んでスイープできる"""
        npm_path = tmp_path / "model.npm"
        spm_path = tmp_path / "toy.pl"
        cf_path = tmp_path / "toy_cf.pl"
        write_npm(small_model, str(npm_path))
        write_spm(toy_spm, str(spm_path))
        write_spm(reconfigure_collision_free(toy_spm, 0.0).spm, str(cf_path))
        config = ExperimentConfig(
            protocols=["npm", "spm", "spm_cf"], repetitions=2,
            npm_path=str(npm_path), spm_path=str(spm_path), spm_cf_path=str(cf_path),
        )
        rows = sweep(config, EnvConfig(b_max=1))
        assert len(rows) == 6
        cf_rows = [r for r in rows if r["protocol"] == "spm_cf"]
        assert all(r["n_c"] == 0 for r in cf_rows)
        npm_row = next(r for r in rows if r["protocol"] == "npm")
        assert npm_row["cm_bits"] == small_model.cm_width * 32

    def test_model_info(self, toy_spm):
        models = LoadedModels(npm=NPModel.zeros(5), spm=toy_spm)
        assert model_info("npm", models) == {"cm_bits": 256, "model_bytes": 13460, "inference_flops": 6208}
        assert model_info("spm", models)["cm_bits"] == 1
        assert model_info("aloha", models) == {"cm_bits": 0, "model_bytes": 0, "inference_flops": 0}


class TestPolicyMap:
    def test_npm_map_covers_grid(self):
        grid = policy_map_export(NPModel.zeros(5))
        assert len(grid) == 36
        assert grid[(3, 4)] == {"a1": "S", "a2": "S", "access1": 0.0, "access2": 0.0}

    def test_spm_map(self, toy_spm):
        grid = policy_map_export(toy_spm, b_max=1)
        assert len(grid) == 4
        assert grid[(1, 1)]["access1"] == pytest.approx(0.9)
        assert (grid[(1, 0)]["a1"], grid[(1, 0)]["a2"]) == ("A", "S")

    def test_spm_map_outside_domain(self, toy_spm):
        grid = policy_map_export(toy_spm, b_max=2)
        assert grid[(2, 2)] == {"a1": "", "a2": "", "access1": 0.0, "access2": 0.0}

    def test_spm_map_needs_b_max(self, toy_spm):
        with pytest.raises(ValueError):
            policy_map_export(toy_spm)

    def test_rows_sorted(self, toy_spm):
        rows = policy_map_rows(policy_map_export(toy_spm, b_max=1))
        assert [(r["b1"], r["b2"]) for r in rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_agreement(self, toy_spm):
        cf = reconfigure_collision_free(toy_spm, 0.0).spm
        fraction, mismatched = policy_agreement(
            policy_map_export(toy_spm, b_max=1), policy_map_export(cf, b_max=1)
        )
        assert fraction == pytest.approx(0.75)
        assert mismatched == [(1, 1)]

    def test_agreement_without_overlap(self):
        assert policy_agreement({}, {(0, 0): {"a1": "S", "a2": "S"}}) == (0.0, [])


def test_evaluate_policy(toy_spm, small_env):
    rows = evaluate_policy(SpmPolicy(toy_spm), small_env, episodes=3, seed=0)
    assert [r["episode"] for r in rows] == [0, 1, 2]
    assert 0.0 <= mean_of(rows, "goodput") <= 1.0
    assert mean_of([], "goodput") == 0.0
