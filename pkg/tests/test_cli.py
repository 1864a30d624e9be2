import json

import numpy as np
import pytest
from click.testing import CliRunner

from fedminmax.cli import main
from fedminmax.utils.snapshot import load_dataset, load_partition

TINY = """
version = 1

[dataset.synthetic]
n_samples = 2000

[partition]
setting = "{setting}"
num_clients = {clients}

[model]
hidden_layers = [4]
activation = "tanh"

[algorithm]
rounds = 3

[evaluation]
seeds = [0, 1]
"""


@pytest.fixture(autouse=True)
def isolated_user_config(tmp_path, monkeypatch):
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "xdg"))


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_config(tmp_path):
    def _write(setting="ESG", clients=4, extra=""):
        path = tmp_path / f"tiny-{setting}-{clients}.toml"
        path.write_text(TINY.format(setting=setting, clients=clients) + extra, encoding="utf-8")
        return str(path)

    return _write


# ---------------------------------------------------------------------------
# project
# ---------------------------------------------------------------------------


def test_project_prints_the_projection(runner):
    result = runner.invoke(main, ["project", "--", "0.5", "0.8", "-0.2"])
    assert result.exit_code == 0, result.output
    assert result.output.split() == ["0.35", "0.65", "0"]


def test_project_honours_the_floor(runner):
    result = runner.invoke(main, ["project", "--epsilon", "0.1", "--", "1", "0", "0"])
    assert result.exit_code == 0, result.output
    assert [float(v) for v in result.output.split()] == pytest.approx([0.8, 0.1, 0.1])


def test_project_rejects_an_infeasible_floor(runner):
    result = runner.invoke(main, ["project", "--epsilon", "0.5", "--", "0.1", "0.2", "0.3"])
    assert result.exit_code == 1
    assert "infeasible floor" in result.output


def test_project_rejects_non_finite_values(runner):
    result = runner.invoke(main, ["project", "--", "0.5", "nan"])
    assert result.exit_code == 1
    assert "non-finite" in result.output


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def test_run_writes_per_seed_reports_and_aggregate(runner, tiny_config, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(main, ["run", "--config", tiny_config(), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "Worst-group risk" in result.output

    for seed in (0, 1):
        summary = json.loads((out / "fedminmax" / f"seed-{seed}" / "summary.json").read_text())
        assert summary["seed"] == seed
        assert summary["rounds"] == 3
        assert (out / "fedminmax" / f"seed-{seed}" / "metrics.csv").is_file()
    aggregate = json.loads((out / "fedminmax" / "aggregate.json").read_text())
    assert aggregate["seeds"] == [0, 1]


def test_flags_override_the_file(runner, tiny_config, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(
        main,
        ["run", "--config", tiny_config(), "--out", str(out), "--algorithm", "fedavg", "--seed", "5", "--rounds", "2"],
    )
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "fedavg" / "seed-5" / "summary.json").read_text())
    assert summary["algorithm"] == "fedavg"
    assert summary["output_mode"] == "final_iterate"
    assert summary["rounds"] == 2
    assert not (out / "fedavg" / "seed-0").exists()


def test_output_dir_in_the_file_beats_the_environment(runner, tmp_path, monkeypatch):
    from fedminmax import env

    monkeypatch.setattr(env, "OUTPUT_ROOT", str(tmp_path / "from-env"))
    path = tmp_path / "with-output.toml"
    text = TINY.format(setting="ESG", clients=4)
    path.write_text(text.replace("version = 1\n", f"version = 1\noutput_dir = '{tmp_path / 'from-file'}'\n"))

    result = runner.invoke(main, ["run", "--config", str(path), "--seed", "0", "--rounds", "1"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "from-file" / "fedminmax" / "seed-0" / "summary.json").is_file()
    assert not (tmp_path / "from-env").exists()

    flagged = runner.invoke(
        main, ["run", "--config", str(path), "--seed", "0", "--rounds", "1", "--out", str(tmp_path / "from-flag")]
    )
    assert flagged.exit_code == 0, flagged.output
    assert (tmp_path / "from-flag" / "fedminmax" / "seed-0" / "summary.json").is_file()


def test_unknown_key_exits_with_validation_status(runner, tiny_config, tmp_path):
    path = tiny_config(extra="\n[algorithm.extra]\nwidth = 3\n")
    result = runner.invoke(main, ["run", "--config", path, "--out", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "algorithm.extra" in result.output


def test_missing_config_file_exits_with_validation_status(runner, tmp_path):
    result = runner.invoke(main, ["run", "--config", str(tmp_path / "absent.toml")])
    assert result.exit_code == 1
    assert "absent.toml" in result.output


@pytest.mark.parametrize(
    "flags", [["--algorithm", "bogus"], ["--setting", "XSG"], ["--rounds", "many"]]
)
def test_bad_flag_values_exit_with_validation_status(runner, tiny_config, tmp_path, flags):
    result = runner.invoke(main, ["run", "--config", tiny_config(), "--out", str(tmp_path / "out"), *flags])
    assert result.exit_code == 1
    assert "Invalid value" in result.output
    assert not (tmp_path / "out").exists()


def test_unknown_command_exits_with_validation_status(runner):
    result = runner.invoke(main, ["train"])
    assert result.exit_code == 1
    assert "No such command" in result.output


def test_too_many_clients_is_a_partition_error(runner, tiny_config, tmp_path):
    result = runner.invoke(
        main, ["run", "--config", tiny_config(clients=5000), "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 1


# ---------------------------------------------------------------------------
# compare / analyze-feasibility
# ---------------------------------------------------------------------------


def test_compare_single_client_is_exact(runner, tiny_config, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(main, ["compare", "--config", tiny_config(clients=1), "--out", str(out)])
    assert result.exit_code == 0, result.output
    document = json.loads((out / "compare" / "seed-0" / "comparison.json").read_text())
    assert document["num_clients"] == 1
    assert document["max_param_diff"] == 0.0
    assert document["max_weight_diff"] == 0.0


def test_feasibility_under_ssg(runner, tiny_config, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(main, ["analyze-feasibility", "--config", tiny_config("SSG"), "--out", str(out)])
    assert result.exit_code == 0, result.output
    document = json.loads((out / "feasibility" / "seed-0" / "feasibility.json").read_text())
    assert document["feasible"] is True
    assert document["residual"] <= 1e-6
    assert sum(document["lambda"]) == pytest.approx(1.0)
    assert len(document["mu_star"]) == 2


def test_one_client_cannot_reach_the_minimax_weights(runner, tiny_config, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(
        main, ["analyze-feasibility", "--config", tiny_config(clients=1), "--out", str(out), "--rounds", "50"]
    )
    assert result.exit_code == 0, result.output
    document = json.loads((out / "feasibility" / "seed-0" / "feasibility.json").read_text())
    assert document["feasible"] is False
    assert document["lambda"] == [1.0]
    # with a single client P_A lambda is that client's group prior
    prior = np.array(document["afl_group_weights"])
    gap = np.linalg.norm(prior - np.array(document["mu_star"]))
    assert gap > 1e-6
    assert document["residual"] == pytest.approx(gap, abs=1e-12)


def test_esg_leaves_a_positive_residual(runner, tiny_config, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(
        main, ["analyze-feasibility", "--config", tiny_config("ESG"), "--out", str(out), "--rounds", "100"]
    )
    assert result.exit_code == 0, result.output
    document = json.loads((out / "feasibility" / "seed-0" / "feasibility.json").read_text())
    assert document["residual"] > 0
    assert document["feasible"] is False


# ---------------------------------------------------------------------------
# synth-gen
# ---------------------------------------------------------------------------


def test_synth_gen_writes_dataset_and_partition(runner, tiny_config, tmp_path):
    data_path = tmp_path / "data.npz"
    part_path = tmp_path / "part.npz"
    result = runner.invoke(
        main,
        ["synth-gen", "--config", tiny_config(), "--seed", "3", "--out", str(data_path), "--partition", str(part_path)],
    )
    assert result.exit_code == 0, result.output

    dataset = load_dataset(data_path)
    assert len(dataset) == 2000
    shards = load_partition(part_path)
    assert [s.client_id for s in shards] == [0, 1, 2, 3]
    ids = np.concatenate([s.data.sample_ids for s in shards])
    assert ids.size == np.unique(ids).size
    assert set(ids) <= set(dataset.sample_ids)
