import json

import numpy as np
import pytest

from fedminmax.algorithms import afl_run, fedminmax_run, localfedminmax_run
from fedminmax.analysis import (
    RunReport,
    compare_runs,
    emit_reports,
    induced_group_weights,
    lemma1_feasibility,
    summarize_runs,
)
from fedminmax.data import GroupPriorMatrix, compute_pa_matrix
from fedminmax.errors import ReportError
from fedminmax.optim import SimplexWeights
from fedminmax.utils.log import read_metrics, write_summary


def _random_pa(rng, groups, clients) -> GroupPriorMatrix:
    return GroupPriorMatrix(rng.dirichlet(np.ones(groups), size=clients).T)


# ---------------------------------------------------------------------------
# Induced group weights
# ---------------------------------------------------------------------------


def test_identity_pa_passes_lambda_through():
    lam = SimplexWeights([0.2, 0.5, 0.3])
    assert induced_group_weights(GroupPriorMatrix(np.eye(3)), lam).values == pytest.approx(lam.values)


def test_uniform_lambda_gives_row_means(rng):
    pa = _random_pa(rng, 3, 5)
    mu = induced_group_weights(pa, SimplexWeights.uniform(5))
    assert mu.values == pytest.approx(pa.entries.mean(axis=1))


def test_ssg_weights_are_block_sums(ssg_shards):
    pa = compute_pa_matrix(ssg_shards)
    lam = SimplexWeights([0.1, 0.2, 0.3, 0.4])
    assert induced_group_weights(pa, lam).values == pytest.approx([0.3, 0.7])


def test_induced_weights_stay_on_the_simplex(rng):
    for _ in range(100):
        groups, clients = int(rng.integers(2, 6)), int(rng.integers(1, 8))
        lam = SimplexWeights(rng.dirichlet(np.ones(clients)))
        mu = induced_group_weights(_random_pa(rng, groups, clients), lam)
        assert np.all(mu.values >= 0)
        assert mu.values.sum() == pytest.approx(1.0, abs=1e-12)


def test_induced_weights_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        induced_group_weights(_random_pa(rng, 2, 3), SimplexWeights.uniform(4))


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------


def test_identity_block_makes_every_target_feasible(rng):
    pa = GroupPriorMatrix(np.hstack([np.eye(3), _random_pa(rng, 3, 2).entries]))
    for _ in range(10):
        report = lemma1_feasibility(pa, SimplexWeights(rng.dirichlet(np.ones(3))))
        assert report.feasible
        assert report.residual <= 1e-8


def test_single_client_is_a_single_point():
    column = np.array([0.6, 0.4])
    report = lemma1_feasibility(GroupPriorMatrix(column.reshape(2, 1)), SimplexWeights([0.9, 0.1]))
    assert not report.feasible
    assert report.residual == pytest.approx(np.linalg.norm(column - [0.9, 0.1]))
    assert report.lam.values == pytest.approx([1.0])


def test_reachable_targets_are_recovered(rng):
    for _ in range(100):
        groups, clients = int(rng.integers(2, 4)), int(rng.integers(2, 7))
        pa = _random_pa(rng, groups, clients)
        lam = SimplexWeights(rng.dirichlet(np.ones(clients)))
        report = lemma1_feasibility(pa, induced_group_weights(pa, lam))
        assert report.feasible
        assert report.residual <= 1e-8


def test_residual_never_increases(rng):
    pa = _random_pa(rng, 3, 4)
    report = lemma1_feasibility(pa, SimplexWeights([0.98, 0.01, 0.01]))
    history = report.residual_history
    assert np.all(np.diff(history) <= 1e-12)
    assert report.residual >= 0


def test_feasibility_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        lemma1_feasibility(_random_pa(rng, 3, 4), SimplexWeights.uniform(2))


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------


def test_run_compared_with_itself_is_zero(esg_shards, small_spec, make_cfg):
    trace = fedminmax_run(esg_shards, None, make_cfg(rounds=5), small_spec)
    comparison = compare_runs(trace, trace)
    assert comparison.param_diffs.size == 5
    assert comparison.max_param_diff == 0.0
    assert comparison.max_weight_diff == 0.0


def test_different_seeds_differ_without_error(esg_shards, small_spec, make_cfg):
    a = fedminmax_run(esg_shards, None, make_cfg(rounds=5, seed=0), small_spec)
    b = fedminmax_run(esg_shards, None, make_cfg(rounds=5, seed=1), small_spec)
    assert compare_runs(a, b).max_param_diff > 0


def test_comparison_needs_matching_runs(esg_shards, small_spec, make_cfg):
    a = fedminmax_run(esg_shards, None, make_cfg(rounds=5), small_spec)
    with pytest.raises(ValueError):
        compare_runs(a, fedminmax_run(esg_shards, None, make_cfg(rounds=4), small_spec))
    with pytest.raises(ValueError):
        compare_runs(a, fedminmax_run(esg_shards, None, make_cfg(rounds=5, record_params=False), small_spec))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _report(trace, seed=0):
    return RunReport.from_trace(trace, {"algorithm": {"name": trace.algorithm.value}}, seed)


def test_emit_reports_writes_metrics_and_summary(tmp_path, esg_shards, synthetic, small_spec, make_cfg):
    trace = fedminmax_run(esg_shards, synthetic, make_cfg(rounds=7), small_spec)
    metrics_path, summary_path = emit_reports(trace, _report(trace), tmp_path / "run")

    frame = read_metrics(metrics_path)
    assert len(frame) == 7
    assert list(frame.columns) == [
        "round", "risk_0", "risk_1", "weight_0", "weight_1", "worst_risk", "best_risk", "average_risk",
    ]
    assert frame["round"].tolist() == list(range(1, 8))

    summary = json.loads(summary_path.read_text())
    assert list(summary) == [
        "schema_version", "algorithm", "seed", "output_mode", "rounds", "config", "evaluation",
        "final_group_weights", "final_adversary_weights", "adversary_labels", "wall_clock_seconds", "notes",
    ]
    assert summary["rounds"] == 7
    assert summary["evaluation"]["worst_risk"] >= summary["evaluation"]["best_risk"]


def test_metrics_are_byte_identical_across_reruns(tmp_path, esg_shards, small_spec, make_cfg):
    paths = []
    for name in ("a", "b"):
        trace = fedminmax_run(esg_shards, None, make_cfg(rounds=5), small_spec)
        paths.append(emit_reports(trace, _report(trace), tmp_path / name)[0])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_adversary_columns_for_client_weights(tmp_path, esg_shards, small_spec, make_cfg):
    afl = afl_run(esg_shards, None, make_cfg("afl", rounds=3), small_spec)
    frame = read_metrics(emit_reports(afl, _report(afl), tmp_path / "afl")[0])
    assert ["adv_c0", "adv_c1", "adv_c2", "adv_c3"] == [c for c in frame.columns if c.startswith("adv_")]
    local = localfedminmax_run(esg_shards, None, make_cfg("local_fedminmax", rounds=3), small_spec)
    frame = read_metrics(emit_reports(local, _report(local), tmp_path / "local")[0])
    assert "adv_g1@c3" in frame.columns


def test_unwritable_directory_is_named(tmp_path, esg_shards, small_spec, make_cfg):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    trace = fedminmax_run(esg_shards, None, make_cfg(rounds=2), small_spec)
    with pytest.raises(ReportError, match="blocker"):
        emit_reports(trace, _report(trace), blocker / "run")


def test_summarize_runs_over_seeds(esg_shards, synthetic, small_spec, make_cfg):
    reports = []
    for seed in (0, 1, 2):
        trace = fedminmax_run(esg_shards, synthetic, make_cfg(rounds=3, seed=seed), small_spec)
        reports.append(_report(trace, seed))
    summary = summarize_runs(reports)
    worst = [r.evaluation["worst_risk"] for r in reports]
    assert summary["seeds"] == [0, 1, 2]
    assert summary["worst_risk"]["mean"] == pytest.approx(np.mean(worst))
    assert summary["worst_risk"]["std"] == pytest.approx(np.std(worst))
    assert len(summary["group_risks"]["mean"]) == 2


def test_summarize_rejects_mixed_algorithms(esg_shards, synthetic, small_spec, make_cfg):
    fed = fedminmax_run(esg_shards, synthetic, make_cfg(rounds=2), small_spec)
    afl = afl_run(esg_shards, synthetic, make_cfg("afl", rounds=2), small_spec)
    with pytest.raises(ValueError):
        summarize_runs([_report(fed), _report(afl)])
    with pytest.raises(ValueError):
        summarize_runs([])


def test_summary_writes_non_finite_values_as_null(tmp_path):
    path = write_summary(
        {"worst_risk": float("nan"), "group_risks": [0.25, float("inf")], "nested": {"x": -np.inf}},
        tmp_path / "summary.json",
    )
    text = path.read_text()
    assert "NaN" not in text and "Infinity" not in text
    assert json.loads(text) == {"worst_risk": None, "group_risks": [0.25, None], "nested": {"x": None}}
