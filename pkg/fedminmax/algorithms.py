"""Federated and centralized training procedures.

All minimax procedures share one shape: the server keeps an adversary
weight vector on a simplex, turns it into importance weights, clients take
one full-batch gradient step on their reweighted risk and report per-group
risks measured before the step, and the server averages the client models
and moves the adversary by projected gradient ascent.
"""

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from fedminmax.data import ClientShard, GroupedDataset, compute_pa_matrix, merge_shards
from fedminmax.errors import NumericalError
from fedminmax.model import (
    LossKind,
    MlpSpec,
    ParamVector,
    WeightedBatch,
    backprop,
    forward,
    init_params,
    per_sample_loss,
)
from fedminmax.optim import (
    ImportanceWeights,
    SimplexWeights,
    aggregate_params,
    importance_weights,
    pga_step,
)
from fedminmax.schema import Algorithm, AlgorithmConfig, OutputMode
from fedminmax.utils.runner import create_executor

log = logging.getLogger(__name__)

PROGRESS_EVERY = 100


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClientReport:
    """What a client sends back after one round.

    ``group_risks`` only holds groups the client has samples for; absent
    groups are missing from the mapping rather than reported as zero.
    """

    client_id: int
    updated_params: ParamVector
    group_risks: dict[int, float]
    group_counts: dict[int, int]
    total_risk: float
    num_samples: int

    def has_group(self, group: int) -> bool:
        return group in self.group_risks


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    params: ParamVector | None
    adversary_weights: np.ndarray
    group_weights: np.ndarray
    group_risks: np.ndarray


@dataclass(frozen=True, eq=False)
class Evaluation:
    loss: LossKind
    group_risks: np.ndarray
    group_accuracies: np.ndarray
    group_counts: np.ndarray
    client_risks: dict[int, float] = field(default_factory=dict)
    client_accuracies: dict[int, float] = field(default_factory=dict)

    @property
    def worst_risk(self) -> float:
        return float(self.group_risks.max())

    @property
    def best_risk(self) -> float:
        return float(self.group_risks.min())

    @property
    def average_risk(self) -> float:
        return float(np.dot(self.group_counts, self.group_risks) / self.group_counts.sum())

    @property
    def worst_accuracy(self) -> float:
        return float(self.group_accuracies.min())

    @property
    def best_accuracy(self) -> float:
        return float(self.group_accuracies.max())

    @property
    def average_accuracy(self) -> float:
        return float(np.dot(self.group_counts, self.group_accuracies) / self.group_counts.sum())

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.value,
            "group_risks": self.group_risks.tolist(),
            "group_accuracies": self.group_accuracies.tolist(),
            "group_counts": self.group_counts.tolist(),
            "worst_risk": self.worst_risk,
            "best_risk": self.best_risk,
            "average_risk": self.average_risk,
            "worst_accuracy": self.worst_accuracy,
            "best_accuracy": self.best_accuracy,
            "average_accuracy": self.average_accuracy,
            "client_risks": {str(k): v for k, v in sorted(self.client_risks.items())},
            "client_accuracies": {str(k): v for k, v in sorted(self.client_accuracies.items())},
        }


@dataclass(eq=False)
class TrainingTrace:
    """Per-round history of one run.

    ``adversary_weights`` are indexed by ``adversary_labels`` (groups for
    FedMinMax, clients for AFL, group/client cells for LocalFedMinMax);
    ``group_weights`` is always the induced weighting over groups.
    """

    algorithm: Algorithm
    output_mode: OutputMode
    initial_params: ParamVector
    initial_weights: np.ndarray
    adversary_labels: list[str]
    group_prior: np.ndarray
    rounds: list[RoundRecord] = field(default_factory=list)
    output_params: ParamVector | None = None
    evaluation: Evaluation | None = None
    wall_clock_seconds: float = 0.0

    @property
    def num_rounds(self) -> int:
        return len(self.rounds)

    @property
    def num_groups(self) -> int:
        return self.group_prior.size

    @property
    def final_group_weights(self) -> np.ndarray:
        return self.rounds[-1].group_weights if self.rounds else self.group_prior

    @property
    def final_adversary_weights(self) -> np.ndarray:
        return self.rounds[-1].adversary_weights if self.rounds else self.initial_weights


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _group_risks(losses: np.ndarray, groups: np.ndarray, num_groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean loss per group (NaN where a group is absent) and the group counts."""
    counts = np.bincount(groups, minlength=num_groups)
    risks = np.full(num_groups, np.nan)
    for group in np.flatnonzero(counts):
        risks[group] = losses[groups == group].sum() / counts[group]
    return risks, counts


def _require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{what} is not finite: {np.asarray(values).ravel()[:8].tolist()}")


def _client_report(
    shard: ClientShard, params: ParamVector, losses: np.ndarray, updated: np.ndarray
) -> ClientReport:
    _require_finite(updated, f"parameters on client {shard.client_id}")
    risks, counts = _group_risks(losses, shard.data.groups, shard.data.num_groups)
    present = np.flatnonzero(counts)
    return ClientReport(
        client_id=shard.client_id,
        updated_params=params.replace(updated),
        group_risks={int(a): float(risks[a]) for a in present},
        group_counts={int(a): int(counts[a]) for a in present},
        total_risk=float(losses.sum() / shard.num_samples),
        num_samples=shard.num_samples,
    )


def _combine_group_risks(reports: Sequence[ClientReport], group_counts: np.ndarray) -> np.ndarray:
    """``r_a = sum_k (n_{a,k} / n_a) r_{a,k}``, summed in ascending client order."""
    risks = np.zeros(group_counts.size)
    for report in sorted(reports, key=lambda r: r.client_id):
        for group, risk in sorted(report.group_risks.items()):
            risks[group] += (report.group_counts[group] / group_counts[group]) * risk
    return risks


def _by_client_id(shards: Sequence[ClientShard]) -> list[ClientShard]:
    if not shards:
        raise ValueError("no clients")
    ordered = sorted(shards, key=lambda s: s.client_id)
    ids = [s.client_id for s in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in {ids}")
    return ordered


def _check_groups_nonempty(counts: np.ndarray) -> None:
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"group(s) {empty.tolist()} have no samples in the federation")


def _new_trace(
    cfg: AlgorithmConfig, theta: ParamVector, weights: np.ndarray, labels: list[str], prior: np.ndarray
) -> TrainingTrace:
    return TrainingTrace(
        algorithm=cfg.name,
        output_mode=cfg.resolved_output_mode,
        initial_params=theta,
        initial_weights=np.array(weights),
        adversary_labels=labels,
        group_prior=np.array(prior),
    )


class _OutputTracker:
    """Running iterate sum so the average needs no stored history."""

    def __init__(self, mode: OutputMode, spec: MlpSpec):
        self.mode = mode
        self._sum = np.zeros(spec.num_params)
        self._count = 0
        self._last: ParamVector | None = None

    def add(self, params: ParamVector) -> None:
        self._sum += params.values
        self._count += 1
        self._last = params

    def output(self) -> ParamVector:
        if self.mode is OutputMode.FINAL_ITERATE:
            return self._last
        return self._last.replace(self._sum / self._count)


def _finish(
    trace: TrainingTrace,
    tracker: _OutputTracker,
    test: GroupedDataset | None,
    loss: LossKind,
    started: float,
    shards: Sequence[ClientShard] | None = None,
) -> TrainingTrace:
    trace.output_params = tracker.output()
    if test is not None:
        trace.evaluation = evaluate(trace.output_params, test, loss, shards)
    trace.wall_clock_seconds = time.perf_counter() - started
    log.info(
        "%s finished %d rounds in %.1fs, final group weights %s",
        trace.algorithm.value,
        trace.num_rounds,
        trace.wall_clock_seconds,
        np.round(trace.final_group_weights, 4).tolist(),
    )
    return trace


def _progress(algorithm: Algorithm, t: int, rounds: int, weights: np.ndarray, risks: np.ndarray) -> None:
    if t % PROGRESS_EVERY == 0 or t == rounds:
        log.debug(
            "%s round %d/%d: group risks %s, weights %s",
            algorithm.value,
            t,
            rounds,
            np.round(risks, 4).tolist(),
            np.round(weights, 4).tolist(),
        )


# ---------------------------------------------------------------------------
# Client step
# ---------------------------------------------------------------------------


def client_local_step(
    shard: ClientShard,
    params: ParamVector,
    w: ImportanceWeights,
    lr_theta: float,
    loss: LossKind,
) -> ClientReport:
    """One full-batch gradient step on ``r_k(theta, w) = sum_a (n_{a,k}/n_k) w_a r_{a,k}``.

    Reported risks are evaluated at the parameters received, before the step.
    """
    if shard.num_samples == 0:
        raise ValueError(f"client {shard.client_id} has no samples")
    groups = shard.data.groups
    if groups.max() >= len(w):
        raise ValueError(
            f"client {shard.client_id} holds group {int(groups.max())} "
            f"but only {len(w)} importance weights were broadcast"
        )
    batch = WeightedBatch(shard.data.features, shard.data.targets, w.values[groups])
    losses, grad = backprop(params, batch, loss, divisor=shard.num_samples)
    _require_finite(losses, f"loss on client {shard.client_id}")
    _require_finite(grad, f"gradient on client {shard.client_id}")
    return _client_report(shard, params, losses, params.values - lr_theta * grad)


def _broadcast(executor, fn, shards: Sequence[ClientShard], t: int) -> list[ClientReport]:
    try:
        return executor.map(fn, shards)
    except NumericalError as exc:
        raise NumericalError(f"round {t}: {exc}") from exc


# ---------------------------------------------------------------------------
# Minimax over an arbitrary adversary index
# ---------------------------------------------------------------------------


def _run_weighted_minimax(
    shards: Sequence[ClientShard],
    adversary_shards: Sequence[ClientShard],
    coord_groups: np.ndarray | None,
    labels: list[str],
    test: GroupedDataset | None,
    cfg: AlgorithmConfig,
    spec: MlpSpec,
) -> TrainingTrace:
    """Shared loop of FedMinMax and LocalFedMinMax.

    ``adversary_shards`` carry the same samples as ``shards`` labelled by
    adversary coordinate; ``coord_groups`` gives the group of every
    coordinate (``None`` when coordinates are the groups themselves).
    """
    started = time.perf_counter()
    num_coords = adversary_shards[0].data.num_groups
    num_groups = shards[0].data.num_groups
    n_k = np.array([s.num_samples for s in adversary_shards], dtype=np.float64)
    n = n_k.sum()
    coord_counts = sum(s.per_group_counts for s in adversary_shards)
    group_counts = sum(s.per_group_counts for s in shards)
    _check_groups_nonempty(group_counts)
    _check_groups_nonempty(coord_counts)

    rho = SimplexWeights(coord_counts / n)
    mu = rho
    theta = init_params(spec, cfg.seed)
    trace = _new_trace(cfg, theta, rho.values, labels, group_counts / n)
    tracker = _OutputTracker(cfg.resolved_output_mode, spec)
    client_weights = n_k / n
    log.info(
        "%s: %d clients, %d adversary coordinates, %d rounds",
        cfg.name.value, len(shards), num_coords, cfg.rounds,
    )

    with create_executor(cfg.workers) as executor:
        for t in range(1, cfg.rounds + 1):
            w = importance_weights(mu, rho)
            step = partial(client_local_step, params=theta, w=w, lr_theta=cfg.lr_theta, loss=cfg.loss)
            reports = _broadcast(executor, step, adversary_shards, t)
            next_theta = aggregate_params([r.updated_params for r in reports], client_weights)
            coord_risks = _combine_group_risks(reports, coord_counts)
            _require_finite(coord_risks, f"round {t}: aggregated risk")
            mu = pga_step(mu, coord_risks, cfg.lr_adversary, cfg.epsilon)

            if coord_groups is None:
                group_risks = coord_risks
                group_weights = mu.values
            else:
                group_risks = np.zeros(num_groups)
                for j, a in enumerate(coord_groups):
                    group_risks[a] += (coord_counts[j] / group_counts[a]) * coord_risks[j]
                group_weights = np.bincount(coord_groups, weights=mu.values, minlength=num_groups)
            trace.rounds.append(
                RoundRecord(
                    round=t,
                    params=next_theta if cfg.record_params else None,
                    adversary_weights=mu.values,
                    group_weights=group_weights,
                    group_risks=group_risks,
                )
            )
            tracker.add(next_theta)
            _progress(cfg.name, t, cfg.rounds, group_weights, group_risks)
            theta = next_theta

    return _finish(trace, tracker, test, cfg.loss, started, shards)


def fedminmax_run(
    shards: Sequence[ClientShard],
    test: GroupedDataset | None,
    cfg: AlgorithmConfig,
    spec: MlpSpec,
) -> TrainingTrace:
    """Federated minimax over demographic groups."""
    shards = _by_client_id(shards)
    labels = [f"g{a}" for a in range(shards[0].data.num_groups)]
    return _run_weighted_minimax(shards, shards, None, labels, test, cfg, spec)


def localfedminmax_run(
    shards: Sequence[ClientShard],
    test: GroupedDataset | None,
    cfg: AlgorithmConfig,
    spec: MlpSpec,
) -> TrainingTrace:
    """Minimax over nonempty (group, client) cells, each treated as its own group."""
    shards = _by_client_id(shards)
    num_groups = shards[0].data.num_groups
    cells: list[tuple[int, int]] = [
        (a, s.client_id) for s in shards for a in s.present_groups()
    ]
    index = {cell: j for j, cell in enumerate(cells)}
    cell_shards = []
    for shard in shards:
        lookup = np.full(num_groups, -1, dtype=np.int64)
        for a in shard.present_groups():
            lookup[a] = index[(a, shard.client_id)]
        coords = lookup[shard.data.groups]
        cell_shards.append(ClientShard(shard.client_id, shard.data.relabel(coords, len(cells))))
    coord_groups = np.array([a for a, _ in cells], dtype=np.int64)
    labels = [f"g{a}@c{k}" for a, k in cells]
    return _run_weighted_minimax(shards, cell_shards, coord_groups, labels, test, cfg, spec)


def centralized_minmax_run(
    dataset: GroupedDataset,
    cfg: AlgorithmConfig,
    spec: MlpSpec,
    test: GroupedDataset | None = None,
    shards: Sequence[ClientShard] | None = None,
) -> TrainingTrace:
    """Single-entity minimax baseline.

    ``shards`` only feed the per-client part of the test evaluation.

    The learner's objective ``sum_a mu_a r_a(theta)`` is evaluated as
    ``(1/n) sum_i w_{a_i} loss_i`` with ``w = mu / rho``, the same
    arithmetic a lone federated client performs.
    """
    started = time.perf_counter()
    counts = dataset.group_counts
    _check_groups_nonempty(counts)
    n = len(dataset)
    rho = SimplexWeights(counts / n)
    mu = rho
    theta = init_params(spec, cfg.seed)
    trace = _new_trace(cfg, theta, rho.values, [f"g{a}" for a in range(dataset.num_groups)], rho.values)
    tracker = _OutputTracker(cfg.resolved_output_mode, spec)

    for t in range(1, cfg.rounds + 1):
        w = importance_weights(mu, rho)
        batch = WeightedBatch(dataset.features, dataset.targets, w.values[dataset.groups])
        losses, grad = backprop(theta, batch, cfg.loss, divisor=n)
        _require_finite(losses, f"round {t}: loss")
        _require_finite(grad, f"round {t}: gradient")
        next_theta = theta.replace(theta.values - cfg.lr_theta * grad)
        risks, _ = _group_risks(losses, dataset.groups, dataset.num_groups)
        mu = pga_step(mu, risks, cfg.lr_adversary, cfg.epsilon)
        trace.rounds.append(
            RoundRecord(
                round=t,
                params=next_theta if cfg.record_params else None,
                adversary_weights=mu.values,
                group_weights=mu.values,
                group_risks=risks,
            )
        )
        tracker.add(next_theta)
        _progress(cfg.name, t, cfg.rounds, mu.values, risks)
        theta = next_theta

    return _finish(trace, tracker, test, cfg.loss, started, shards)


def afl_run(
    shards: Sequence[ClientShard],
    test: GroupedDataset | None,
    cfg: AlgorithmConfig,
    spec: MlpSpec,
) -> TrainingTrace:
    """Client-fairness minimax: the adversary weighs clients, not groups.

    Clients take plain full-batch steps; the server combines them with the
    current client weights, which makes the aggregate a gradient step on
    ``sum_k lambda_k r_k``. The induced group weights are ``P_A lambda``.
    """
    shards = _by_client_id(shards)
    started = time.perf_counter()
    num_groups = shards[0].data.num_groups
    n_k = np.array([s.num_samples for s in shards], dtype=np.float64)
    n = n_k.sum()
    group_counts = sum(s.per_group_counts for s in shards)
    _check_groups_nonempty(group_counts)
    pa = compute_pa_matrix(shards, num_groups)

    lam = SimplexWeights(n_k / n)
    theta = init_params(spec, cfg.seed)
    trace = _new_trace(cfg, theta, lam.values, [f"c{s.client_id}" for s in shards], group_counts / n)
    tracker = _OutputTracker(cfg.resolved_output_mode, spec)
    unit = ImportanceWeights(np.ones(num_groups))

    with create_executor(cfg.workers) as executor:
        for t in range(1, cfg.rounds + 1):
            step = partial(client_local_step, params=theta, w=unit, lr_theta=cfg.lr_theta, loss=cfg.loss)
            reports = _broadcast(executor, step, shards, t)
            next_theta = aggregate_params([r.updated_params for r in reports], lam.values)
            client_risks = np.array([r.total_risk for r in reports])
            _require_finite(client_risks, f"round {t}: client risk")
            group_risks = _combine_group_risks(reports, group_counts)
            lam = pga_step(lam, client_risks, cfg.lr_adversary, cfg.epsilon)
            group_weights = pa.entries @ lam.values
            trace.rounds.append(
                RoundRecord(
                    round=t,
                    params=next_theta if cfg.record_params else None,
                    adversary_weights=lam.values,
                    group_weights=group_weights,
                    group_risks=group_risks,
                )
            )
            tracker.add(next_theta)
            _progress(cfg.name, t, cfg.rounds, group_weights, group_risks)
            theta = next_theta

    return _finish(trace, tracker, test, cfg.loss, started, shards)


# ---------------------------------------------------------------------------
# FedAvg
# ---------------------------------------------------------------------------


def _fedavg_client(
    shard: ClientShard, params: ParamVector, cfg: AlgorithmConfig, t: int
) -> ClientReport:
    """``E`` epochs of minibatch SGD, reshuffled every epoch."""
    rng = np.random.default_rng([cfg.seed, t, shard.client_id])
    data = shard.data
    losses = per_sample_loss(forward(params, data.features), data.targets, cfg.loss)
    _require_finite(losses, f"loss on client {shard.client_id}")

    local = params
    for _ in range(cfg.local_epochs):
        order = rng.permutation(shard.num_samples)
        for start in range(0, shard.num_samples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = WeightedBatch.unweighted(data.features[idx], data.targets[idx])
            _, grad = backprop(local, batch, cfg.loss)
            _require_finite(grad, f"gradient on client {shard.client_id}")
            local = local.replace(local.values - cfg.lr_theta * grad)
    return _client_report(shard, params, losses, local.values)


def fedavg_run(
    shards: Sequence[ClientShard],
    test: GroupedDataset | None,
    cfg: AlgorithmConfig,
    spec: MlpSpec,
) -> TrainingTrace:
    shards = _by_client_id(shards)
    started = time.perf_counter()
    n_k = np.array([s.num_samples for s in shards], dtype=np.float64)
    n = n_k.sum()
    group_counts = sum(s.per_group_counts for s in shards)
    _check_groups_nonempty(group_counts)
    prior = group_counts / n

    theta = init_params(spec, cfg.seed)
    trace = _new_trace(cfg, theta, prior, [f"g{a}" for a in range(prior.size)], prior)
    tracker = _OutputTracker(cfg.resolved_output_mode, spec)
    client_weights = n_k / n

    with create_executor(cfg.workers) as executor:
        for t in range(1, cfg.rounds + 1):
            local = partial(_fedavg_client, params=theta, cfg=cfg, t=t)
            reports = _broadcast(executor, local, shards, t)
            next_theta = aggregate_params([r.updated_params for r in reports], client_weights)
            group_risks = _combine_group_risks(reports, group_counts)
            trace.rounds.append(
                RoundRecord(
                    round=t,
                    params=next_theta if cfg.record_params else None,
                    adversary_weights=prior,
                    group_weights=prior,
                    group_risks=group_risks,
                )
            )
            tracker.add(next_theta)
            _progress(cfg.name, t, cfg.rounds, prior, group_risks)
            theta = next_theta

    return _finish(trace, tracker, test, cfg.loss, started, shards)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    params: ParamVector,
    dataset: GroupedDataset,
    loss: LossKind,
    shards: Sequence[ClientShard] | None = None,
) -> Evaluation:
    """Per-group risk and accuracy, plus per-client ones when shards are given."""
    loss = LossKind(loss)
    probs = forward(params, dataset.features)
    losses = per_sample_loss(probs, dataset.targets, loss)
    correct = (probs.argmax(axis=1) == dataset.targets).astype(np.float64)
    risks, counts = _group_risks(losses, dataset.groups, dataset.num_groups)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"evaluation set has no samples for group(s) {empty.tolist()}")
    accuracies, _ = _group_risks(correct, dataset.groups, dataset.num_groups)

    client_risks: dict[int, float] = {}
    client_accuracies: dict[int, float] = {}
    for shard in shards or ():
        shard_probs = forward(params, shard.data.features)
        client_risks[shard.client_id] = float(
            per_sample_loss(shard_probs, shard.data.targets, loss).mean()
        )
        client_accuracies[shard.client_id] = float(
            (shard_probs.argmax(axis=1) == shard.data.targets).mean()
        )
    return Evaluation(loss, risks, accuracies, counts, client_risks, client_accuracies)


RUNNERS = {
    Algorithm.FEDMINMAX: fedminmax_run,
    Algorithm.LOCAL_FEDMINMAX: localfedminmax_run,
    Algorithm.AFL: afl_run,
    Algorithm.FEDAVG: fedavg_run,
}


def run_algorithm(
    shards: Sequence[ClientShard],
    test: GroupedDataset | None,
    cfg: AlgorithmConfig,
    spec: MlpSpec,
    union: GroupedDataset | None = None,
) -> TrainingTrace:
    """Dispatch on ``cfg.name``; the centralized baseline trains on the shard union."""
    if cfg.name is Algorithm.CENTRALIZED_MINMAX:
        if union is None:
            union = merge_shards(shards)
        return centralized_minmax_run(union, cfg, spec, test, shards)
    return RUNNERS[cfg.name](shards, test, cfg, spec)
