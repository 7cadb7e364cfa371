"""Tests for the command line interface."""

import csv

import pytest

from memorized_batchnorm import cli
from memorized_batchnorm.bench import BENCH_COLUMNS, ESTIMATORS
from memorized_batchnorm.config import load_config
from memorized_batchnorm.errors import NumericError
from memorized_batchnorm.train import METRICS_COLUMNS

SMALL_RUN = [
    "--set",
    "data.num_classes=3",
    "--set",
    "data.n_per_class=8",
    "--set",
    "data.test_per_class=4",
    "--set",
    "data.dim=4",
    "--set",
    "model.hidden=5",
    "--set",
    "model.depth=2",
    "--set",
    "norm.memory_k=2",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.total_epochs=1",
]


def read_rows(path):
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


class TestParseSeeds:
    """Test the --seeds syntax."""

    def test_forms(self):
        assert cli.parse_seeds("3") == [3]
        assert cli.parse_seeds("1,4") == [1, 4]
        assert cli.parse_seeds("2..4") == [2, 3, 4]

    def test_invalid(self):
        with pytest.raises(Exception, match="seed"):
            cli.parse_seeds("5..1")


class TestExpandRuns:
    """Test the run grid built from --seeds and --sweep."""

    def test_grid(self):
        runs = cli.expand_runs(load_config(), [1, 2], [["train.batch_size", "8", "64"], ["norm.mode", "bn", "mbn"]])
        assert len(runs) == 8
        assert {run.seed for run in runs} == {1, 2}
        assert {run.train.batch_size for run in runs} == {8, 64}
        assert runs[0].tag == "batch_size=8,mode=bn"
        assert runs[0].method == "bn-double[batch_size=8,mode=bn]"

    def test_plain(self):
        runs = cli.expand_runs(load_config())
        assert len(runs) == 1
        assert runs[0].tag == ""

    def test_sweep_without_values(self):
        with pytest.raises(Exception, match="--sweep"):
            cli.expand_runs(load_config(), None, [["seed"]])


class TestCommands:
    """Test subcommands end to end."""

    def test_no_command(self, capsys):
        assert cli.run([]) == cli.EXIT_CONFIG_ERROR
        assert "Usage" in capsys.readouterr().out

    def test_missing_config(self, tmp_path):
        assert cli.run(["train", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG_ERROR

    def test_bad_override(self, tmp_path):
        args = ["train", "--out", str(tmp_path), "--set", "norm.mode=groupnorm"]
        assert cli.run(args) == cli.EXIT_CONFIG_ERROR

    def test_init_and_validate(self, tmp_path, capsys):
        path = tmp_path / "run.cfg"
        assert cli.run(["init", "-o", str(path), "--set", "norm.mode=bn"]) == cli.EXIT_OK
        assert load_config(path).norm.mode.value == "bn"
        assert cli.run(["validate", str(path)]) == cli.EXIT_OK
        assert "✅ Config validation passed" in capsys.readouterr().out

    def test_validate_invalid(self, tmp_path, capsys):
        path = tmp_path / "run.cfg"
        path.write_text("train.lr0 = -1\n", encoding="utf-8")
        assert cli.run(["validate", "-q", str(path)]) == cli.EXIT_CONFIG_ERROR
        assert "train.lr0" in capsys.readouterr().out

    def test_train(self, tmp_path):
        assert cli.run(["train", "--out", str(tmp_path), *SMALL_RUN]) == cli.EXIT_OK
        rows = read_rows(tmp_path / "metrics.csv")
        assert tuple(rows[0]) == METRICS_COLUMNS
        assert len(rows) == 1 + 4
        assert {row[7] for row in rows[1:]} == {"mbn-double"}
        resolved = load_config(tmp_path / "config.resolved")
        assert resolved.data.num_classes == 3
        assert resolved.out == tmp_path
        summary = read_rows(tmp_path / "summary.csv")
        assert summary[0] == ["method", "batch_size", "seed", "test_error"]
        assert summary[-1][2] == "mean"

    def test_rerun_from_resolved_is_identical(self, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        assert cli.run(["train", "--out", str(first), *SMALL_RUN, "--set", "norm.mode=brn"]) == cli.EXIT_OK
        resolved = first / "config.resolved"
        assert cli.run(["train", "--config", str(resolved), "--out", str(second)]) == cli.EXIT_OK
        assert (second / "metrics.csv").read_bytes() == (first / "metrics.csv").read_bytes()
        assert (second / "summary.csv").read_bytes() == (first / "summary.csv").read_bytes()

    def test_train_grid(self, tmp_path):
        args = ["train", "--out", str(tmp_path), *SMALL_RUN, "--seeds", "1..2", "--sweep", "norm.mode", "bn", "mbn"]
        assert cli.run(args) == cli.EXIT_OK
        rows = read_rows(tmp_path / "metrics.csv")
        assert len(rows) == 1 + 4 * 4
        assert len(list((tmp_path / "resolved").iterdir())) == 4
        methods = [row[0] for row in read_rows(tmp_path / "summary.csv")[1:]]
        assert methods.count("bn-double[mode=bn]") == 3

    def test_checkpoint_and_eval(self, tmp_path, capsys):
        assert cli.run(["train", "--out", str(tmp_path), *SMALL_RUN, "--checkpoint"]) == cli.EXIT_OK
        checkpoint = tmp_path / "model.ckpt"
        assert checkpoint.exists()
        capsys.readouterr()
        assert cli.run(["eval", *SMALL_RUN, "--checkpoint", str(checkpoint)]) == cli.EXIT_OK
        assert capsys.readouterr().out.startswith("test loss=")

    def test_eval_missing_checkpoint(self, tmp_path):
        args = ["eval", *SMALL_RUN, "--checkpoint", str(tmp_path / "none.ckpt")]
        assert cli.run(args) == cli.EXIT_CONFIG_ERROR

    def test_numeric_blow_up(self, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NumericError("loss is nan", 3)

        monkeypatch.setattr(cli, "fit", explode)
        assert cli.run(["train", "--out", str(tmp_path), *SMALL_RUN]) == cli.EXIT_NUMERIC_ERROR

    def test_gradcheck_passes(self, capsys):
        assert cli.run(["gradcheck", "mbn", "--instances", "3"]) == cli.EXIT_OK
        assert "✅ Gradient check passed" in capsys.readouterr().out

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck_batch_of_two(self, seed):
        args = ["gradcheck", "bn", "--batch", "2", "--features", "5", "--memory", "0", "--seed", str(seed)]
        assert cli.run(args) == cli.EXIT_OK

    def test_gradcheck_mlp(self):
        assert cli.run(["gradcheck", "mlp"]) == cli.EXIT_OK

    def test_gradcheck_bad_arguments(self):
        assert cli.run(["gradcheck", "bn", "--batch", "0"]) == cli.EXIT_CONFIG_ERROR

    def test_statsbench(self, tmp_path):
        args = [
            "statsbench",
            "--out",
            str(tmp_path),
            "--set",
            "bench.batch_sizes=4",
            "--set",
            "bench.trials=2",
            "--set",
            "bench.num_batches=3",
            "--set",
            "bench.memory_k=2",
            "--set",
            "bench.dim=2",
        ]
        assert cli.run(args) == cli.EXIT_OK
        rows = read_rows(tmp_path / "statsbench.csv")
        assert tuple(rows[0]) == BENCH_COLUMNS
        assert [row[1] for row in rows[1:]] == list(ESTIMATORS)
