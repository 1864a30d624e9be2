"""End-to-end experiment pipelines behind the CLI subcommands.

Each pipeline goes config -> dataset -> partition -> training -> reports.
Per run the seed drives data generation (unless the dataset pins its own),
the train/test split, the partition and model initialization.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedminmax.algorithms import (
    TrainingTrace,
    afl_run,
    centralized_minmax_run,
    fedminmax_run,
    run_algorithm,
)
from fedminmax.analysis import (
    FeasibilityReport,
    RunComparison,
    RunReport,
    compare_runs,
    emit_reports,
    lemma1_feasibility,
    summarize_runs,
)
from fedminmax.data import (
    ClientShard,
    GroupedDataset,
    compute_pa_matrix,
    generate_synthetic,
    load_csv,
    merge_shards,
    partition,
    train_test_split,
)
from fedminmax.model import MlpSpec
from fedminmax.optim import SimplexWeights
from fedminmax.schema import SCHEMA_VERSION, Algorithm, AlgorithmConfig, ExperimentConfig
from fedminmax.utils.log import write_summary

log = logging.getLogger(__name__)

MU_STAR_NOTE = (
    "mu_star is the final adversary weighting of a FedMinMax run on the "
    "training partition, an empirical stand-in for the population minimax weights"
)


def build_dataset(cfg: ExperimentConfig, seed: int) -> tuple[GroupedDataset, GroupedDataset]:
    """Generate or load the dataset and split off the test set."""
    if cfg.dataset.kind == "csv":
        data = load_csv(cfg.dataset.csv.path, cfg.dataset.csv.to_schema())
    else:
        data = generate_synthetic(cfg.dataset.synthetic.spec(seed))
    return train_test_split(data, cfg.evaluation.test_fraction, seed)


def build_shards(cfg: ExperimentConfig, train: GroupedDataset, seed: int) -> list[ClientShard]:
    return partition(train, cfg.partition.plan(seed))


def build_model_spec(cfg: ExperimentConfig, train: GroupedDataset) -> MlpSpec:
    return MlpSpec.build(
        train.num_features, cfg.model.hidden_layers, train.num_classes, cfg.model.activation
    )


def _seeded(algorithm: AlgorithmConfig, seed: int, **changes) -> AlgorithmConfig:
    return algorithm.model_copy(update={"seed": seed, **changes})


@dataclass(frozen=True)
class _Setup:
    train: GroupedDataset
    test: GroupedDataset
    shards: list[ClientShard]
    spec: MlpSpec


def _setup(cfg: ExperimentConfig, seed: int) -> _Setup:
    train, test = build_dataset(cfg, seed)
    shards = build_shards(cfg, train, seed)
    log.info(
        "seed %d: %d train / %d test samples over %d %s clients",
        seed, len(train), len(test), len(shards), cfg.partition.setting.value,
    )
    return _Setup(train, test, shards, build_model_spec(cfg, train))


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def run_once(cfg: ExperimentConfig, seed: int) -> tuple[TrainingTrace, list[ClientShard]]:
    setup = _setup(cfg, seed)
    algorithm = _seeded(cfg.algorithm, seed)
    trace = run_algorithm(setup.shards, setup.test, algorithm, setup.spec)
    return trace, setup.shards


def run_experiment(cfg: ExperimentConfig, out_root: str | Path) -> tuple[list[RunReport], dict]:
    """One run per seed; writes ``<out>/<algorithm>/seed-<s>/`` and ``aggregate.json``."""
    out_dir = Path(out_root) / cfg.algorithm.name.value
    document = cfg.model_dump(mode="json")
    reports = []
    for seed in cfg.evaluation.seeds:
        trace, _ = run_once(cfg, seed)
        notes = []
        if cfg.algorithm.name is Algorithm.AFL:
            notes.append("adversary weights are over clients; group weights are P_A lambda")
        report = RunReport.from_trace(trace, document, seed, notes)
        emit_reports(trace, report, out_dir / f"seed-{seed}")
        reports.append(report)

    aggregate = summarize_runs(reports)
    write_summary(aggregate, out_dir / "aggregate.json")
    return reports, aggregate


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def compare_experiment(cfg: ExperimentConfig, out_root: str | Path) -> RunComparison:
    """Federated minimax on the partition against the centralized baseline on its union."""
    seed = cfg.evaluation.seeds[0]
    setup = _setup(cfg, seed)
    fed_cfg = _seeded(cfg.algorithm, seed, name=Algorithm.FEDMINMAX, record_params=True)
    # compare.* rates are validated equal to the algorithm rates
    central_cfg = _seeded(cfg.algorithm, seed, name=Algorithm.CENTRALIZED_MINMAX, record_params=True)
    federated = fedminmax_run(setup.shards, None, fed_cfg, setup.spec)
    centralized = centralized_minmax_run(merge_shards(setup.shards), central_cfg, setup.spec)
    comparison = compare_runs(federated, centralized)

    document = comparison.to_dict()
    document["seed"] = seed
    document["num_clients"] = len(setup.shards)
    write_summary(document, Path(out_root) / "compare" / f"seed-{seed}" / "comparison.json")
    return comparison


# ---------------------------------------------------------------------------
# analyze-feasibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeasibilityResult:
    report: FeasibilityReport
    mu_star: SimplexWeights
    afl_group_weights: np.ndarray
    seed: int

    @property
    def afl_gap(self) -> float:
        """L1 distance between AFL's induced group weights and ``mu_star``."""
        return float(np.abs(self.afl_group_weights - self.mu_star.values).sum())

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            **self.report.to_dict(),
            "mu_star": self.mu_star.values.tolist(),
            "afl_group_weights": self.afl_group_weights.tolist(),
            "afl_gap_l1": self.afl_gap,
            "notes": [MU_STAR_NOTE],
        }


def feasibility_experiment(cfg: ExperimentConfig, out_root: str | Path) -> FeasibilityResult:
    seed = cfg.evaluation.seeds[0]
    setup = _setup(cfg, seed)
    pa = compute_pa_matrix(setup.shards)

    fed = fedminmax_run(
        setup.shards, None, _seeded(cfg.algorithm, seed, name=Algorithm.FEDMINMAX, record_params=False), setup.spec
    )
    mu_star = SimplexWeights(fed.final_adversary_weights)
    report = lemma1_feasibility(pa, mu_star)

    afl = afl_run(
        setup.shards, None, _seeded(cfg.algorithm, seed, name=Algorithm.AFL, record_params=False), setup.spec
    )
    result = FeasibilityResult(report, mu_star, afl.final_group_weights, seed)
    write_summary(result.to_dict(), Path(out_root) / "feasibility" / f"seed-{seed}" / "feasibility.json")
    return result
