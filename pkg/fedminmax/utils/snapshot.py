"""Dataset and partition snapshots in ``.npz`` form.

A snapshot stores the exact arrays a run consumed, so a dataset generated
once can be reloaded bit for bit.
"""

from collections.abc import Sequence
from pathlib import Path

import numpy as np

from fedminmax.data import ClientShard, GroupedDataset
from fedminmax.errors import ReportError, SchemaError

SNAPSHOT_VERSION = 1


def _save(path: Path, **arrays) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as f:
            np.savez(f, schema_version=np.int64(SNAPSHOT_VERSION), **arrays)
    except OSError as exc:
        raise ReportError(f"failed to write snapshot {path}: {exc}") from exc
    return path


def _load(path: Path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {key: npz[key] for key in npz.files}
    except (OSError, ValueError) as exc:
        raise SchemaError(f"cannot read snapshot {path}: {exc}") from exc
    version = int(arrays.get("schema_version", -1))
    if version != SNAPSHOT_VERSION:
        raise SchemaError(f"{path}: unsupported snapshot version {version}")
    return arrays


def _dataset_arrays(dataset: GroupedDataset) -> dict[str, np.ndarray]:
    return {
        "features": dataset.features,
        "targets": dataset.targets,
        "groups": dataset.groups,
        "sample_ids": dataset.sample_ids,
        "num_groups": np.int64(dataset.num_groups),
        "num_classes": np.int64(dataset.num_classes),
        "feature_names": np.array(dataset.feature_names, dtype=np.str_),
    }


def _dataset_from(arrays: dict[str, np.ndarray], path: Path) -> GroupedDataset:
    missing = sorted({"features", "targets", "groups", "num_groups", "num_classes"} - arrays.keys())
    if missing:
        raise SchemaError(f"{path}: snapshot lacks {missing}")
    return GroupedDataset(
        features=arrays["features"],
        targets=arrays["targets"],
        groups=arrays["groups"],
        num_groups=int(arrays["num_groups"]),
        num_classes=int(arrays["num_classes"]),
        sample_ids=arrays.get("sample_ids"),
        feature_names=tuple(str(name) for name in arrays.get("feature_names", ())),
    )


def save_dataset(dataset: GroupedDataset, path: str | Path) -> Path:
    return _save(Path(path), **_dataset_arrays(dataset))


def load_dataset(path: str | Path) -> GroupedDataset:
    path = Path(path)
    return _dataset_from(_load(path), path)


def save_partition(shards: Sequence[ClientShard], path: str | Path) -> Path:
    """Store the shards as one concatenated dataset plus a client-id column."""
    if not shards:
        raise ValueError("no shards to save")
    order = sorted(shards, key=lambda s: s.client_id)
    first = order[0].data
    arrays = {
        "features": np.concatenate([s.data.features for s in order]),
        "targets": np.concatenate([s.data.targets for s in order]),
        "groups": np.concatenate([s.data.groups for s in order]),
        "sample_ids": np.concatenate([s.data.sample_ids for s in order]),
        "client_ids": np.concatenate(
            [np.full(s.num_samples, s.client_id, dtype=np.int64) for s in order]
        ),
        "num_groups": np.int64(first.num_groups),
        "num_classes": np.int64(first.num_classes),
        "feature_names": np.array(first.feature_names, dtype=np.str_),
    }
    return _save(Path(path), **arrays)


def load_partition(path: str | Path) -> list[ClientShard]:
    path = Path(path)
    arrays = _load(path)
    if "client_ids" not in arrays:
        raise SchemaError(f"{path}: not a partition snapshot (no client_ids)")
    union = _dataset_from(arrays, path)
    client_ids = arrays["client_ids"]
    return [
        ClientShard(int(k), union.subset(np.flatnonzero(client_ids == k)))
        for k in np.unique(client_ids)
    ]
