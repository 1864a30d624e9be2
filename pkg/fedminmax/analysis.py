"""Post-hoc analyses of finished runs and the report files they produce."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedminmax.algorithms import TrainingTrace
from fedminmax.data import GroupPriorMatrix
from fedminmax.errors import ReportError
from fedminmax.optim import SimplexWeights, project_simplex
from fedminmax.schema import SCHEMA_VERSION
from fedminmax.utils.log import metrics_frame, write_metrics, write_summary

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-6
STATIONARITY_TOL = 1e-10
MAX_FEASIBILITY_ITERATIONS = 100_000


# ---------------------------------------------------------------------------
# Group weights reachable by client weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeasibilityReport:
    feasible: bool
    lam: SimplexWeights
    residual: float
    tolerance: float
    iterations: int
    residual_history: np.ndarray

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "lambda": self.lam.values.tolist(),
            "residual": self.residual,
            "tolerance": self.tolerance,
            "iterations": self.iterations,
        }


def induced_group_weights(pa: GroupPriorMatrix, lam: SimplexWeights) -> SimplexWeights:
    """Group weights ``P_A lambda`` implied by a weighting of clients."""
    if pa.num_clients != lam.dimension:
        raise ValueError(f"P_A has {pa.num_clients} client columns, lambda has {lam.dimension} entries")
    return SimplexWeights(pa.entries @ lam.values)


def lemma1_feasibility(
    pa: GroupPriorMatrix,
    mu_star: SimplexWeights,
    tol: float = FEASIBILITY_TOL,
    max_iterations: int = MAX_FEASIBILITY_ITERATIONS,
) -> FeasibilityReport:
    """Whether some client weighting induces ``mu_star`` on the groups.

    Minimizes ``||P_A lambda - mu_star||^2`` over the client simplex with
    accelerated projected gradient steps of size ``1/L``, restarting the
    momentum whenever the objective would go up, so the residual never
    increases. The search stops once the gradient mapping falls below
    ``STATIONARITY_TOL``.
    """
    p = pa.entries
    target = mu_star.values
    if p.shape[0] != target.size:
        raise ValueError(f"P_A has {p.shape[0]} group rows, mu has {target.size} entries")

    def objective(lam):
        r = p @ lam - target
        return float(r @ r)

    def gradient(lam):
        return 2.0 * p.T @ (p @ lam - target)

    step = 1.0 / (2.0 * np.linalg.norm(p, 2) ** 2)
    lam = np.full(p.shape[1], 1.0 / p.shape[1])
    y = lam
    momentum = 1.0
    value = objective(lam)
    history = [np.sqrt(value)]
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        mapped = project_simplex(lam - step * gradient(lam)).values
        if np.linalg.norm(lam - mapped) / step <= STATIONARITY_TOL:
            break
        candidate = project_simplex(y - step * gradient(y)).values
        candidate_value = objective(candidate)
        if candidate_value > value:
            # restart from the plain projected step, which cannot increase the objective
            candidate, candidate_value = mapped, objective(mapped)
            y, momentum = mapped, 1.0
        else:
            next_momentum = (1.0 + np.sqrt(1.0 + 4.0 * momentum**2)) / 2.0
            y = candidate + ((momentum - 1.0) / next_momentum) * (candidate - lam)
            momentum = next_momentum
        lam, value = candidate, min(candidate_value, value)
        history.append(np.sqrt(value))
    else:
        log.warning("feasibility search stopped after %d iterations", max_iterations)

    residual = float(np.linalg.norm(p @ lam - target))
    return FeasibilityReport(
        feasible=residual <= tol,
        lam=SimplexWeights(lam),
        residual=residual,
        tolerance=tol,
        iterations=iterations,
        residual_history=np.array(history),
    )


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RunComparison:
    param_diffs: np.ndarray
    weight_diffs: np.ndarray

    @property
    def max_param_diff(self) -> float:
        return float(self.param_diffs.max(initial=0.0))

    @property
    def max_weight_diff(self) -> float:
        return float(self.weight_diffs.max(initial=0.0))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rounds": int(self.param_diffs.size),
            "max_param_diff": self.max_param_diff,
            "max_weight_diff": self.max_weight_diff,
            "param_diffs": self.param_diffs.tolist(),
            "weight_diffs": self.weight_diffs.tolist(),
        }


def compare_runs(a: TrainingTrace, b: TrainingTrace) -> RunComparison:
    """Per-round max-abs difference of the global models and group weights."""
    if a.num_rounds != b.num_rounds:
        raise ValueError(f"runs have {a.num_rounds} and {b.num_rounds} rounds")
    if a.initial_params.spec != b.initial_params.spec:
        raise ValueError("runs trained models of different shapes")
    if a.num_groups != b.num_groups:
        raise ValueError(f"runs have {a.num_groups} and {b.num_groups} groups")

    param_diffs = np.zeros(a.num_rounds)
    weight_diffs = np.zeros(a.num_rounds)
    for i, (ra, rb) in enumerate(zip(a.rounds, b.rounds)):
        if ra.params is None or rb.params is None:
            raise ValueError(f"round {ra.round} has no recorded parameters; enable record_params")
        param_diffs[i] = np.abs(ra.params.values - rb.params.values).max()
        weight_diffs[i] = np.abs(ra.group_weights - rb.group_weights).max()
    return RunComparison(param_diffs, weight_diffs)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RunReport:
    algorithm: str
    seed: int
    output_mode: str
    rounds: int
    config: dict
    evaluation: dict | None
    final_group_weights: list[float]
    final_adversary_weights: list[float]
    adversary_labels: list[str]
    wall_clock_seconds: float
    notes: list[str] = field(default_factory=list)

    @classmethod
    def from_trace(
        cls, trace: TrainingTrace, config: dict, seed: int, notes: Sequence[str] = ()
    ) -> "RunReport":
        return cls(
            algorithm=trace.algorithm.value,
            seed=seed,
            output_mode=trace.output_mode.value,
            rounds=trace.num_rounds,
            config=config,
            evaluation=trace.evaluation.to_dict() if trace.evaluation else None,
            final_group_weights=trace.final_group_weights.tolist(),
            final_adversary_weights=trace.final_adversary_weights.tolist(),
            adversary_labels=list(trace.adversary_labels),
            wall_clock_seconds=trace.wall_clock_seconds,
            notes=list(notes),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "output_mode": self.output_mode,
            "rounds": self.rounds,
            "config": self.config,
            "evaluation": self.evaluation,
            "final_group_weights": self.final_group_weights,
            "final_adversary_weights": self.final_adversary_weights,
            "adversary_labels": self.adversary_labels,
            "wall_clock_seconds": self.wall_clock_seconds,
            "notes": self.notes,
        }


def emit_reports(trace: TrainingTrace, report: RunReport, out_dir: str | Path) -> list[Path]:
    """Write ``metrics.csv`` and ``summary.json`` into *out_dir*."""
    if report.rounds != trace.num_rounds:
        raise ValueError(f"report covers {report.rounds} rounds, trace has {trace.num_rounds}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create report directory {out_dir}: {exc}") from exc

    metrics_path = out_dir / "metrics.csv"
    summary_path = out_dir / "summary.json"
    write_metrics(metrics_frame(trace), metrics_path)
    write_summary(report.to_dict(), summary_path)
    log.info("wrote %s and %s", metrics_path, summary_path)
    return [metrics_path, summary_path]


_SUMMARY_METRICS = (
    "worst_risk",
    "best_risk",
    "average_risk",
    "worst_accuracy",
    "best_accuracy",
    "average_accuracy",
)


def summarize_runs(reports: Sequence[RunReport]) -> dict:
    """Mean and population standard deviation of the test metrics over seeds."""
    evaluated = [r for r in reports if r.evaluation is not None]
    if not evaluated:
        raise ValueError("no evaluated runs to summarize")
    algorithms = {r.algorithm for r in evaluated}
    if len(algorithms) > 1:
        raise ValueError(f"cannot summarize runs of different algorithms: {sorted(algorithms)}")

    summary: dict = {
        "schema_version": SCHEMA_VERSION,
        "algorithm": evaluated[0].algorithm,
        "seeds": [r.seed for r in evaluated],
    }
    for key in _SUMMARY_METRICS:
        values = np.array([r.evaluation[key] for r in evaluated])
        summary[key] = {"mean": float(values.mean()), "std": float(values.std())}
    for key in ("group_risks", "group_accuracies"):
        values = np.array([r.evaluation[key] for r in evaluated])
        summary[key] = {"mean": values.mean(axis=0).tolist(), "std": values.std(axis=0).tolist()}
    weights = np.array([r.final_group_weights for r in evaluated])
    summary["final_group_weights"] = {
        "mean": weights.mean(axis=0).tolist(),
        "std": weights.std(axis=0).tolist(),
    }
    return summary
