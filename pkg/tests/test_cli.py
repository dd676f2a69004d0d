import json
import os

import numpy as np
import pytest

from drophmc import cli
from drophmc.samplefile import read_samples

from conftest import cluster_pair, gaussian_clusters


def write_table(path, dataset):
    rows = np.column_stack([dataset.features, dataset.labels])
    fmt = ["%.10g"] * dataset.feature_count + ["%d"]
    np.savetxt(path, rows, delimiter=",", fmt=fmt)


@pytest.fixture
def tables(tmp_path):
    train, test = cluster_pair(3, 4, train_per_class=30,
                               test_per_class=10, seed=50)
    train_path = tmp_path / "train.csv"
    test_path = tmp_path / "test.csv"
    write_table(train_path, train)
    write_table(test_path, test)
    return str(train_path), str(test_path)


@pytest.fixture
def config_file(tmp_path, tables):
    train_path, test_path = tables
    path = tmp_path / "run.ini"
    path.write_text(f"""
[run]
algorithm = sghmc
chains = 2
seed = 9

[data]
train_table = {train_path}
test_table = {test_path}
class_count = 3

[sampler]
step_size = 0.001
batch_size = 10

[chain]
epochs = 3
warmup = 5

[predict]
samples = 5
""")
    return str(path)


class TestConfigParsing:
    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[mystery]\nx = 1\n")
        assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[sampler]\nlearning_rate = 0.1\n")
        assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_bad_value_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[sampler]\nstep_size = fast\n")
        assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_invalid_numbers_rejected(self, tmp_path, tables):
        bad = tmp_path / "bad.ini"
        bad.write_text(f"[data]\ntrain_table = {tables[0]}\n"
                       "[sampler]\nstep_size = -1\n")
        assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_missing_train_data_is_config_error(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path / "o")]) == \
            cli.EXIT_CONFIG

    def test_unreadable_data_is_data_error(self, tmp_path):
        conf = tmp_path / "run.ini"
        conf.write_text("[data]\ntrain_table = /nonexistent/t.csv\n")
        assert cli.main(["train", "--config", str(conf),
                         "--out", str(tmp_path / "o")]) == cli.EXIT_DATA

    def test_flags_override_file(self, config_file, tmp_path):
        out = str(tmp_path / "flagged")
        code = cli.main(["train", "--config", config_file, "--out", out,
                         "--epochs", "1", "--chains", "1"])
        assert code == cli.EXIT_OK
        samples = read_samples(os.path.join(out, "chain00.samples"))
        assert samples.meta.chain["epochs"] == 1

    def test_env_var_sets_default_out(self, config_file, tmp_path, monkeypatch):
        out = str(tmp_path / "from-env")
        monkeypatch.setenv("DROPHMC_OUT", out)
        monkeypatch.chdir(tmp_path)
        code = cli.main(["train", "--config", config_file,
                         "--epochs", "1", "--chains", "1"])
        assert code == cli.EXIT_OK
        assert os.path.exists(os.path.join(out, "chain00.samples"))


class TestTrain:
    def test_writes_one_file_per_chain(self, config_file, tmp_path):
        out = str(tmp_path / "out")
        assert cli.main(["train", "--config", config_file, "--out", out]) == \
            cli.EXIT_OK
        names = sorted(os.listdir(out))
        assert names == ["chain00.health.txt", "chain00.samples",
                         "chain01.health.txt", "chain01.samples"]
        samples = read_samples(os.path.join(out, "chain01.samples"))
        assert samples.meta.seed == 10  # master 9 + chain index 1
        assert samples.meta.retained_count == 3 * 9  # epochs x batches

    def test_rerun_is_byte_identical(self, config_file, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert cli.main(["train", "--config", config_file, "--out",
                         str(out_a)]) == cli.EXIT_OK
        assert cli.main(["train", "--config", config_file, "--out",
                         str(out_b)]) == cli.EXIT_OK
        for name in ("chain00.samples", "chain01.samples"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_divergence_exit_code(self, config_file, tmp_path):
        out = str(tmp_path / "boom")
        code = cli.main(["train", "--config", config_file, "--out", out,
                         "--step-size", "1e12", "--epochs", "8",
                         "--chains", "1"])
        assert code == cli.EXIT_DIVERGED

    def test_parallel_jobs_match_sequential(self, config_file, tmp_path):
        seq = tmp_path / "seq"
        par = tmp_path / "par"
        assert cli.main(["train", "--config", config_file, "--out",
                         str(seq)]) == cli.EXIT_OK
        assert cli.main(["train", "--config", config_file, "--out",
                         str(par), "--jobs", "2"]) == cli.EXIT_OK
        for name in ("chain00.samples", "chain01.samples"):
            assert (seq / name).read_bytes() == (par / name).read_bytes()


class TestEvaluate:
    @pytest.fixture
    def trained(self, config_file, tmp_path):
        out = str(tmp_path / "trained")
        assert cli.main(["train", "--config", config_file, "--out", out]) == \
            cli.EXIT_OK
        return out

    def test_reports_and_aggregate(self, config_file, trained, tmp_path):
        out = str(tmp_path / "eval")
        code = cli.main([
            "evaluate", "--config", config_file, "--out", out,
            os.path.join(trained, "chain00.samples"),
            os.path.join(trained, "chain01.samples"),
        ])
        assert code == cli.EXIT_OK
        report = json.load(open(os.path.join(out, "chain00.report.json")))
        assert 0.0 <= report["total_accuracy"] <= 1.0
        assert len(report["per_class_accuracy"]) == 3
        agg = json.load(open(os.path.join(out, "aggregate.json")))
        assert agg["chains"] == 2
        confusion = np.loadtxt(os.path.join(out, "chain00.confusion.csv"),
                               delimiter=",", skiprows=1)
        assert confusion.shape == (3, 3)
        lines = open(os.path.join(out, "chain00.examples.csv")).read().splitlines()
        assert lines[0].startswith("index,true,predicted,correct,max_prob,entropy")
        assert len(lines) == 1 + 30

    def test_learns_separable_clusters(self, config_file, trained, tmp_path):
        out = str(tmp_path / "acc")
        assert cli.main([
            "evaluate", "--config", config_file, "--out", out,
            os.path.join(trained, "chain00.samples"),
            os.path.join(trained, "chain01.samples"),
        ]) == cli.EXIT_OK
        agg = json.load(open(os.path.join(out, "aggregate.json")))
        assert agg["mean_accuracy"] > 0.6

    def test_single_draw_smoke_is_fast(self, config_file, trained, tmp_path):
        import time

        start = time.time()
        code = cli.main(["evaluate", "--config", config_file,
                         "--out", str(tmp_path / "smoke"), "--samples", "1",
                         os.path.join(trained, "chain00.samples")])
        assert code == cli.EXIT_OK
        assert time.time() - start < 5.0

    def test_single_chain_reports_zero_std(self, config_file, trained, tmp_path):
        out = str(tmp_path / "eval1")
        code = cli.main(["evaluate", "--config", config_file, "--out", out,
                         os.path.join(trained, "chain00.samples")])
        assert code == cli.EXIT_OK
        agg = json.load(open(os.path.join(out, "aggregate.json")))
        assert agg["std_accuracy"] == 0.0

    def test_insufficient_draws_is_data_error(self, config_file, trained,
                                              tmp_path):
        code = cli.main(["evaluate", "--config", config_file,
                         "--out", str(tmp_path / "e2"), "--samples", "1000",
                         os.path.join(trained, "chain00.samples")])
        assert code == cli.EXIT_DATA

    def test_shape_mismatch_is_data_error(self, trained, tmp_path):
        other = gaussian_clusters(3, 6, per_class=5, seed=52)
        table = tmp_path / "other.csv"
        write_table(table, other)
        conf = tmp_path / "other.ini"
        conf.write_text(f"[data]\ntest_table = {table}\nclass_count = 3\n"
                        "[sampler]\nbatch_size = 5\n")
        code = cli.main(["evaluate", "--config", str(conf),
                         "--out", str(tmp_path / "e3"), "--samples", "2",
                         os.path.join(trained, "chain00.samples")])
        assert code == cli.EXIT_DATA

    def test_corrupt_sample_file_is_data_error(self, config_file, tmp_path):
        junk = tmp_path / "junk.samples"
        junk.write_bytes(b"not a container")
        code = cli.main(["evaluate", "--config", config_file,
                         "--out", str(tmp_path / "e4"), str(junk)])
        assert code == cli.EXIT_DATA


class TestSweep:
    def test_requires_dsghmc(self, config_file, tmp_path):
        code = cli.main(["sweep", "--config", config_file,
                         "--out", str(tmp_path / "s")])
        assert code == cli.EXIT_CONFIG

    def test_one_point_table(self, config_file, tmp_path):
        out = str(tmp_path / "sweep")
        code = cli.main(["sweep", "--config", config_file, "--out", out,
                         "--algorithm", "dsghmc", "--chains", "1",
                         "--q-values", "0.5"])
        assert code == cli.EXIT_OK
        lines = open(os.path.join(out, "sweep.csv")).read().splitlines()
        assert lines[0] == "keep_prob,mean_accuracy,std,chains,error"
        assert len(lines) == 2
        assert lines[1].startswith("0.5,")

    def test_identical_seeds_identical_tables(self, config_file, tmp_path):
        args = ["sweep", "--config", config_file, "--algorithm", "dsghmc",
                "--chains", "1", "--q-values", "0.3,0.8"]
        out_a = str(tmp_path / "sa")
        out_b = str(tmp_path / "sb")
        assert cli.main(args + ["--out", out_a]) == cli.EXIT_OK
        assert cli.main(args + ["--out", out_b]) == cli.EXIT_OK
        assert open(os.path.join(out_a, "sweep.csv")).read() == \
            open(os.path.join(out_b, "sweep.csv")).read()


class TestDiagnose:
    def test_quadratic_all_pass(self, capsys):
        assert cli.main(["diagnose"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") == 3
        assert "FAIL" not in out
        assert "halving ratio" in out

    def test_gaussian_target(self, capsys):
        assert cli.main(["diagnose", "--target", "gaussian"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out

    def test_softmax_target(self, capsys):
        assert cli.main(["diagnose", "--target", "softmax",
                         "--step-size", "0.01"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") == 3

    def test_masked_target_is_informational(self, capsys):
        assert cli.main(["diagnose", "--target", "softmax-masked",
                         "--step-size", "0.01"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "INFO" in out
        assert "PASS" not in out and "FAIL" not in out

    def test_euler_contrast_is_printed(self, capsys):
        cli.main(["diagnose"])
        assert "Euler" in capsys.readouterr().out


class TestUsage:
    def test_unknown_flag(self):
        assert cli.main(["train", "--warp-speed", "9"]) == cli.EXIT_CONFIG

    def test_unknown_algorithm_flag_value(self):
        assert cli.main(["train", "--algorithm", "nuts"]) == cli.EXIT_CONFIG

    def test_evaluate_needs_sample_files(self, config_file):
        assert cli.main(["evaluate", "--config", config_file]) == \
            cli.EXIT_CONFIG
