"""
spm_cli のテスト

サブコマンドを main(argv) で直接呼び出し、終了コード・標準出力・出力ファイルを確認する。
"""
import csv

import pytest

from spm_cli import build_parser, main
from spm_protocol.services.analytics import reconfigure_collision_free
from spm_protocol.services.problog_io import read_spm, write_spm

TINY_CONFIG = """\
# 数秒で終わるパイプライン用の設定
b_max = 1
t_max = 8
d_max = 6
lambda = 0.6
eps_block = 0.0
hidden_width = 4
hidden_layers = 1
cm_width = 3
replay_capacity = 100
batch_size = 4
target_sync_interval = 10
total_episodes = 4
n_episodes = 4
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return str(path)


@pytest.fixture
def spm_files(tmp_path, toy_spm):
    toy = tmp_path / "toy.pl"
    cf = tmp_path / "toy_cf.pl"
    write_spm(toy_spm, str(toy))
    write_spm(reconfigure_collision_free(toy_spm, 0.0).spm, str(cf))
    return str(toy), str(cf)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class TestParser:
    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0

    def test_lambda_option(self):
        args = build_parser().parse_args(["train", "--out", "x.bin", "--lambda", "0.9,0.1"])
        assert args.lam == "0.9,0.1"
        assert args.seed is None


class TestAnalysisCommands:
    def test_entropy(self, spm_files, tmp_path, capsys):
        clauses = tmp_path / "clauses.csv"
        assert main(["entropy", "--spm", spm_files[0], "--clauses", str(clauses)]) == 0
        out = capsys.readouterr().out
        assert "net=" in out and "(nats)" in out
        assert len(_rows(clauses)) == 24

    def test_entropy_bits(self, spm_files, capsys):
        assert main(["entropy", "--spm", spm_files[1], "--base", "bits"]) == 0
        assert "(bits)" in capsys.readouterr().out

    def test_missing_file_returns_error(self, tmp_path, capsys):
        assert main(["entropy", "--spm", str(tmp_path / "absent.pl")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_reconfigure(self, spm_files, tmp_path, capsys):
        out_path = tmp_path / "cf.pl"
        log_path = tmp_path / "log.csv"
        assert main(["reconfigure", "--spm", spm_files[0], "--out", str(out_path), "--log", str(log_path)]) == 0
        assert "1 manipulation(s)" in capsys.readouterr().out
        log = _rows(log_path)
        assert log[0]["dcm"] == "d2_2" and log[0]["ue"] == "2"
        assert read_spm(str(out_path)).clause("d2_2", "a2_A") is None

    def test_select_min_entropy(self, spm_files, capsys):
        assert main(["select", *spm_files]) == 0
        assert capsys.readouterr().out.strip() == spm_files[1]

    def test_select_study(self, spm_files, tmp_path, config_file, capsys):
        out = tmp_path / "study.csv"
        argv = ["select", *spm_files, "--study", "--subset-size", "2", "--trials", "5",
                "--episodes", "2", "--config", config_file, "--out", str(out)]
        assert main(argv) == 0
        assert [r["selector"] for r in _rows(out)] == ["min_entropy", "min_vocabulary", "random"]

    def test_policymap_needs_a_model(self, tmp_path, capsys):
        assert main(["policymap", "--out", str(tmp_path / "pm.csv")]) == 1

    def test_policymap_spm_only(self, spm_files, tmp_path, capsys):
        out = tmp_path / "pm.csv"
        assert main(["policymap", "--spm", spm_files[0], "--b-max", "1", "--out", str(out)]) == 0
        rows = _rows(out)
        assert len(rows) == 4
        assert set(rows[0]) == {"b1", "b2", "spm_a1", "spm_a2", "spm_access1", "spm_access2"}


class TestRunCommands:
    def test_run_baseline_protocol(self, tmp_path, capsys):
        kpi = tmp_path / "kpi.csv"
        trace = tmp_path / "trace.csv"
        argv = ["run", "--protocol", "aloha", "--episodes", "2", "--seed", "3",
                "--kpi", str(kpi), "--trace", str(trace)]
        assert main(argv) == 0
        assert capsys.readouterr().out.startswith("aloha: goodput=")
        assert len(_rows(kpi)) == 2
        assert len(_rows(trace)) == 2 * 24

    def test_run_model_protocol_needs_model(self, capsys):
        assert main(["run", "--protocol", "spm"]) == 1

    def test_run_spm_inference_trace(self, spm_files, tmp_path, config_file, capsys):
        inference = tmp_path / "inference.csv"
        argv = ["run", "--protocol", "spm_cf", "--model", spm_files[1], "--config", config_file,
                "--inference-trace", str(inference)]
        assert main(argv) == 0
        rows = _rows(inference)
        assert len(rows) == 8
        assert all(r["fallback"] == "0" for r in rows)

    def test_baseline_sweep(self, tmp_path, capsys):
        argv = ["baseline", "--protocol", "beb", "--lambdas", "0.2,0.8", "--output-dir", str(tmp_path)]
        assert main(argv) == 0
        rows = _rows(tmp_path / "baseline_beb_runs.csv")
        assert {r["lambda"] for r in rows} == {"0.2", "0.8"}
        assert len(rows) == 2 * 10

    def test_experiment_describe(self, tmp_path, config_file, capsys):
        argv = ["experiment", "--config", config_file, "--output-dir", str(tmp_path), "--describe"]
        with open(config_file, "a", encoding="utf-8") as f:
            f.write("protocols = silent, aloha\nrepetitions = 2\nscenario = cli\n")
        assert main(argv) == 0
        out = capsys.readouterr().out
        assert "# EnvConfig" in out and "b_max = 1" in out
        assert len(_rows(tmp_path / "cli_runs.csv")) == 4

    def test_bad_config_value(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("b_max = zero\n", encoding="utf-8")
        assert main(["run", "--protocol", "silent", "--config", str(bad)]) == 1
        assert "EnvConfig" in capsys.readouterr().err

    def test_portfolio(self, spm_files, tmp_path, config_file, capsys):
        pf = tmp_path / "portfolio.txt"
        pf.write_text(f"ue1_burst = {spm_files[0]}\nue2_burst = {spm_files[1]}\n", encoding="utf-8")
        out = tmp_path / "portfolio.csv"
        plot = tmp_path / "portfolio.svg"
        argv = ["portfolio", "--portfolio", str(pf), "--config", config_file,
                "--out", str(out), "--plot", str(plot)]
        assert main(argv) == 0
        rows = _rows(out)
        assert len(rows) == 4
        assert all(r["model"] == r["environment"] for r in rows)
        assert plot.exists()


class TestPipeline:
    def test_train_transform_run(self, tmp_path, config_file, capsys):
        """学習 → 抽出 → 変換 → 実行 → ポリシーマップ を設定ファイル1つで通す"""
        npm = tmp_path / "npm.bin"
        memory = tmp_path / "memory.bin"
        metrics = tmp_path / "train.csv"
        spm = tmp_path / "spm.pl"
        common = ["--config", config_file, "--seed", "1"]

        assert main(["train", "--out", str(npm), "--memory", str(memory), "--metrics", str(metrics), *common]) == 0
        assert len(_rows(metrics)) == 4

        extract_dir = tmp_path / "extract"
        assert main(["extract", "--npm", str(npm), "--memory", str(memory), "--out-dir", str(extract_dir), *common]) == 0
        assert _rows(extract_dir / "edges.csv")
        assert _rows(extract_dir / "vocabularies.csv")

        assert main(["transform", "--npm", str(npm), "--memory", str(memory), "--out", str(spm),
                     "--include-vocabulary", *common]) == 0
        out = capsys.readouterr().out
        assert "SPM/NPM size ratio=" in out
        assert read_spm(str(spm)).provenance["merge_mode"] == "both"

        assert main(["run", "--protocol", "spm", "--model", str(spm), "--episodes", "2", *common]) == 0
        assert main(["run", "--protocol", "npm", "--model", str(npm), *common]) == 0
        out = capsys.readouterr().out
        assert "spm: goodput=" in out and "npm: goodput=" in out

        pm = tmp_path / "pm.csv"
        assert main(["policymap", "--npm", str(npm), "--spm", str(spm), "--out", str(pm), *common]) == 0
        assert "agreement=" in capsys.readouterr().out
        assert len(_rows(pm)) == 4
