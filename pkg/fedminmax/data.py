"""Grouped datasets, the synthetic generator, CSV ingestion and client partitioning.

Samples carry a demographic group alongside features and target. A
partition hands every sample to exactly one client; the group / client
bookkeeping (``n``, ``n_a``, ``n_k``, ``n_{a,k}``) is derived from the
arrays on demand.
"""

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from fedminmax.errors import PartitionError, SchemaError
from fedminmax.model import WeightedBatch
from fedminmax.optim import SimplexWeights

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupedSample:
    features: np.ndarray
    target: int
    group: int


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    """Column-oriented sample store.

    ``sample_ids`` identify samples across splits and partitions so that
    disjointness of shards can be checked against the source dataset.
    """

    features: np.ndarray
    targets: np.ndarray
    groups: np.ndarray
    num_groups: int
    num_classes: int
    sample_ids: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        n = features.shape[0]
        targets = np.array(self.targets, dtype=np.int64).reshape(-1)
        groups = np.array(self.groups, dtype=np.int64).reshape(-1)
        ids = np.arange(n) if self.sample_ids is None else np.array(self.sample_ids, dtype=np.int64)
        if targets.size != n or groups.size != n or ids.size != n:
            raise ValueError("features, targets, groups and sample ids must have equal length")
        if self.num_groups < 1 or self.num_classes < 2:
            raise ValueError("a dataset needs at least one group and two classes")
        if n and (groups.min() < 0 or groups.max() >= self.num_groups):
            raise ValueError(f"group indices must lie in [0, {self.num_groups})")
        if n and (targets.min() < 0 or targets.max() >= self.num_classes):
            raise ValueError(f"targets must lie in [0, {self.num_classes})")
        for array in (features, targets, groups, ids):
            array.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.targets.size

    def __iter__(self) -> Iterator[GroupedSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> GroupedSample:
        return GroupedSample(self.features[i], int(self.targets[i]), int(self.groups[i]))

    @property
    def total(self) -> int:
        return len(self)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def group_counts(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.num_groups)

    def group_prior(self) -> SimplexWeights:
        """Empirical group fractions ``n_a / n``."""
        counts = self.group_counts
        if len(self) == 0:
            raise ValueError("an empty dataset has no group prior")
        return SimplexWeights(counts / len(self))

    def subset(self, indices) -> "GroupedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return GroupedDataset(
            self.features[indices],
            self.targets[indices],
            self.groups[indices],
            self.num_groups,
            self.num_classes,
            self.sample_ids[indices],
            self.feature_names,
        )

    def relabel(self, groups, num_groups: int) -> "GroupedDataset":
        """Same samples under a different group labelling."""
        return GroupedDataset(
            self.features,
            self.targets,
            groups,
            num_groups,
            self.num_classes,
            self.sample_ids,
            self.feature_names,
        )

    def batch(self, weights=None) -> WeightedBatch:
        if weights is None:
            return WeightedBatch.unweighted(self.features, self.targets)
        return WeightedBatch(self.features, self.targets, weights)


@dataclass(frozen=True, eq=False)
class ClientShard:
    """The local dataset ``S_k`` of one client."""

    client_id: int
    data: GroupedDataset

    def __len__(self) -> int:
        return len(self.data)

    @property
    def num_samples(self) -> int:
        return len(self.data)

    @property
    def per_group_counts(self) -> np.ndarray:
        return self.data.group_counts

    @property
    def samples(self) -> list[GroupedSample]:
        return list(self.data)

    def present_groups(self) -> list[int]:
        return np.flatnonzero(self.per_group_counts).tolist()


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-group success probabilities left / right of ``x = 0``.

    Defaults follow the two-group study: group 0 is (0.3, 0.6), group 1
    is (0.1, 0.9).
    """

    u_low: tuple[float, ...] = (0.3, 0.1)
    u_high: tuple[float, ...] = (0.6, 0.9)
    n_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "u_low", tuple(float(u) for u in self.u_low))
        object.__setattr__(self, "u_high", tuple(float(u) for u in self.u_high))
        if len(self.u_low) != len(self.u_high) or not self.u_low:
            raise ValueError("u_low and u_high need one entry per group")
        if any(not 0.0 <= u <= 1.0 for u in self.u_low + self.u_high):
            raise ValueError("u values must lie in [0, 1]")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")

    @property
    def num_groups(self) -> int:
        return len(self.u_low)


class PartitionSetting(str, Enum):
    ESG = "ESG"
    PSG = "PSG"
    SSG = "SSG"


@dataclass(frozen=True)
class PartitionPlan:
    setting: PartitionSetting
    num_clients: int
    seed: int = 0
    psg_group_split: tuple[tuple[int, ...], tuple[int, ...]] | None = None
    dirichlet_alpha: float = 5.0
    min_cell_size: int = 10

    def __post_init__(self):
        object.__setattr__(self, "setting", PartitionSetting(self.setting))
        if self.num_clients <= 0:
            raise PartitionError("num_clients must be positive")
        if self.dirichlet_alpha <= 0:
            raise PartitionError("dirichlet_alpha must be positive")
        if self.psg_group_split is not None:
            split = tuple(tuple(int(g) for g in half) for half in self.psg_group_split)
            if len(split) != 2:
                raise PartitionError("psg_group_split needs exactly two client halves")
            object.__setattr__(self, "psg_group_split", split)


@dataclass(frozen=True, eq=False)
class GroupPriorMatrix:
    """``|A| x |K|`` matrix with entry ``(a, k) = p(A=a | K=k)``."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2 or 0 in entries.shape:
            raise ValueError("a group prior matrix must be a nonempty 2-D array")
        if np.any(entries < 0) or not np.all(np.isfinite(entries)):
            raise ValueError("group prior entries must be finite and nonnegative")
        if np.any(np.abs(entries.sum(axis=0) - 1.0) > 1e-12):
            raise ValueError("every column of a group prior matrix must sum to 1")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def num_groups(self) -> int:
        return self.entries.shape[0]

    @property
    def num_clients(self) -> int:
        return self.entries.shape[1]


# ---------------------------------------------------------------------------
# Generation and ingestion
# ---------------------------------------------------------------------------


def generate_synthetic(spec: SyntheticSpec) -> GroupedDataset:
    """Draw ``A`` uniformly over groups, ``X ~ N(0, 1)`` and ``Y | X, A`` Bernoulli."""
    rng = np.random.default_rng(spec.seed)
    groups = rng.integers(0, spec.num_groups, size=spec.n_samples)
    x = rng.standard_normal(spec.n_samples)
    u_low = np.asarray(spec.u_low)
    u_high = np.asarray(spec.u_high)
    p = np.where(x <= 0, u_low[groups], u_high[groups])
    targets = (rng.random(spec.n_samples) < p).astype(np.int64)
    return GroupedDataset(
        x.reshape(-1, 1), targets, groups, spec.num_groups, 2, feature_names=("x",)
    )


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of a tabular file.

    ``target_classes`` / ``group_values`` pin the category encodings; any
    value outside them is rejected. Without them categories are sorted
    lexicographically.
    """

    features: tuple[str, ...]
    target: str
    group: str
    categorical: tuple[str, ...] = ()
    standardize: bool = True
    target_classes: tuple[str, ...] | None = None
    group_values: tuple[str, ...] | None = None


def _encode_categories(
    column: pd.Series, name: str, allowed: Sequence[str] | None
) -> tuple[np.ndarray, list[str]]:
    categories = list(allowed) if allowed is not None else sorted(column.unique())
    lookup = {value: i for i, value in enumerate(categories)}
    unseen = sorted(set(column.unique()) - lookup.keys())
    if unseen:
        raise SchemaError(f"column '{name}' has values outside its declared categories: {unseen}")
    return column.map(lookup).to_numpy(dtype=np.int64), categories


def load_csv(path: str | Path, schema: CsvSchema) -> GroupedDataset:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as exc:
        raise SchemaError(f"CSV file not found: {path}") from exc
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SchemaError(f"failed to parse {path}: {exc}") from exc

    wanted = [*schema.features, schema.target, schema.group]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    if len(frame) == 0:
        raise SchemaError(f"{path}: no data rows")

    targets, classes = _encode_categories(frame[schema.target], schema.target, schema.target_classes)
    groups, group_values = _encode_categories(frame[schema.group], schema.group, schema.group_values)
    if len(classes) < 2:
        raise SchemaError(f"{path}: target column '{schema.target}' needs at least two classes")

    blocks: list[np.ndarray] = []
    names: list[str] = []
    for column in schema.features:
        if column in schema.categorical:
            codes, categories = _encode_categories(frame[column], column, None)
            blocks.append(np.eye(len(categories))[codes])
            names.extend(f"{column}={c}" for c in categories)
            continue
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = values.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise SchemaError(
                f"{path}:{row}: non-numeric value {frame[column].iloc[row - 2]!r} in column '{column}'"
            )
        column_values = values.to_numpy(dtype=np.float64)
        if schema.standardize:
            column_values = (column_values - column_values.mean()) / np.sqrt(
                max(column_values.var(), VARIANCE_FLOOR)
            )
        blocks.append(column_values.reshape(-1, 1))
        names.append(column)

    features = np.hstack(blocks) if blocks else np.zeros((len(frame), 0))
    log.info(
        "Loaded %d rows from %s (%d features, groups %s)", len(frame), path, features.shape[1], group_values
    )
    return GroupedDataset(
        features, targets, groups, len(group_values), len(classes), feature_names=tuple(names)
    )


def train_test_split(
    dataset: GroupedDataset, test_fraction: float, seed: int
) -> tuple[GroupedDataset, GroupedDataset]:
    """Hold out ``test_fraction`` of every group."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for group in range(dataset.num_groups):
        members = rng.permutation(np.flatnonzero(dataset.groups == group))
        n_test = int(round(test_fraction * members.size))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    return (
        dataset.subset(np.sort(np.concatenate(train_idx))),
        dataset.subset(np.sort(np.concatenate(test_idx))),
    )


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def _dirichlet_sizes(
    n_items: int, n_bins: int, alpha: float, floor: int, rng: np.random.Generator
) -> np.ndarray:
    """Unequal bin sizes summing to ``n_items``, each at least ``floor`` when possible."""
    floor = min(floor, n_items // n_bins)
    spare = n_items - floor * n_bins
    proportions = rng.dirichlet(np.full(n_bins, alpha))
    raw = proportions * spare
    sizes = np.floor(raw).astype(np.int64)
    # largest remainders first, index order on ties
    leftover = spare - int(sizes.sum())
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:leftover]] += 1
    return sizes + floor


def _psg_halves(plan: PartitionPlan, num_groups: int) -> list[tuple[int, ...]]:
    split = plan.psg_group_split
    if split is None:
        cut = (num_groups + 1) // 2
        split = (tuple(range(cut)), tuple(range(cut, num_groups)))
    covered = set(split[0]) | set(split[1])
    if covered != set(range(num_groups)):
        raise PartitionError(
            f"psg_group_split {list(map(list, split))} must cover groups 0..{num_groups - 1}"
        )
    if plan.num_clients < 2:
        raise PartitionError("PSG needs at least two clients")
    return list(split)


def _eligible_clients(plan: PartitionPlan, num_groups: int) -> list[np.ndarray]:
    """For every group, the clients allowed to hold it."""
    k = plan.num_clients
    if plan.setting is PartitionSetting.ESG:
        return [np.arange(k) for _ in range(num_groups)]
    if plan.setting is PartitionSetting.SSG:
        if k < num_groups:
            raise PartitionError(f"SSG needs at least {num_groups} clients, got {k}")
        return np.array_split(np.arange(k), num_groups)
    halves = _psg_halves(plan, num_groups)
    client_halves = np.array_split(np.arange(k), 2)
    return [
        np.concatenate([client_halves[h] for h in (0, 1) if group in halves[h]])
        for group in range(num_groups)
    ]


def partition(dataset: GroupedDataset, plan: PartitionPlan) -> list[ClientShard]:
    """Split ``dataset`` into disjoint client shards according to ``plan``.

    ESG deals every group evenly across clients. PSG and SSG restrict
    each group to its eligible clients and draw unequal cell sizes from a
    symmetric Dirichlet with a per-cell floor.
    """
    counts = dataset.group_counts
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise PartitionError(f"group(s) {empty.tolist()} have no samples")

    rng = np.random.default_rng(plan.seed)
    eligible = _eligible_clients(plan, dataset.num_groups)
    assigned: list[list[np.ndarray]] = [[] for _ in range(plan.num_clients)]
    for group in range(dataset.num_groups):
        members = rng.permutation(np.flatnonzero(dataset.groups == group))
        clients = eligible[group]
        if plan.setting is PartitionSetting.ESG:
            pieces = np.array_split(members, clients.size)
        else:
            sizes = _dirichlet_sizes(
                members.size, clients.size, plan.dirichlet_alpha, plan.min_cell_size, rng
            )
            pieces = np.split(members, np.cumsum(sizes)[:-1])
        for client, piece in zip(clients, pieces):
            assigned[client].append(piece)

    shards = []
    for client_id, pieces in enumerate(assigned):
        indices = np.sort(np.concatenate(pieces)) if pieces else np.zeros(0, dtype=np.int64)
        if indices.size == 0:
            raise PartitionError(
                f"client {client_id} received no samples; lower num_clients for this dataset"
            )
        shards.append(ClientShard(client_id, dataset.subset(indices)))
    log.debug("Partitioned %d samples into %d %s shards", len(dataset), len(shards), plan.setting.value)
    return shards


def merge_shards(shards: Sequence[ClientShard]) -> GroupedDataset:
    """The union of all client datasets, concatenated in client order."""
    if not shards:
        raise ValueError("no shards to merge")
    first = shards[0].data
    return GroupedDataset(
        np.concatenate([s.data.features for s in shards]),
        np.concatenate([s.data.targets for s in shards]),
        np.concatenate([s.data.groups for s in shards]),
        first.num_groups,
        first.num_classes,
        np.concatenate([s.data.sample_ids for s in shards]),
        first.feature_names,
    )


def singleton_group_shards(shards: Sequence[ClientShard]) -> list[ClientShard]:
    """Relabel every sample with its client id, one group per client."""
    return [
        ClientShard(
            s.client_id,
            s.data.relabel(np.full(s.num_samples, s.client_id), len(shards)),
        )
        for s in shards
    ]


def compute_pa_matrix(shards: Sequence[ClientShard], num_groups: int | None = None) -> GroupPriorMatrix:
    if not shards:
        raise ValueError("no shards")
    num_groups = num_groups or shards[0].data.num_groups
    columns = []
    for shard in shards:
        if shard.num_samples == 0:
            raise ValueError(f"client {shard.client_id} has an empty shard")
        counts = np.bincount(shard.data.groups, minlength=num_groups)
        columns.append(counts / shard.num_samples)
    return GroupPriorMatrix(np.stack(columns, axis=1))
