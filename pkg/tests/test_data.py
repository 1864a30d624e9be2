import numpy as np
import pytest

from fedminmax.data import (
    ClientShard,
    CsvSchema,
    GroupedDataset,
    GroupPriorMatrix,
    PartitionPlan,
    PartitionSetting,
    SyntheticSpec,
    compute_pa_matrix,
    generate_synthetic,
    load_csv,
    merge_shards,
    partition,
    singleton_group_shards,
    train_test_split,
)
from fedminmax.errors import PartitionError, SchemaError
from fedminmax.utils.snapshot import load_dataset, load_partition, save_dataset, save_partition


def _ids(shards):
    return np.sort(np.concatenate([s.data.sample_ids for s in shards]))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def test_synthetic_is_seeded():
    a = generate_synthetic(SyntheticSpec(n_samples=500, seed=1))
    b = generate_synthetic(SyntheticSpec(n_samples=500, seed=1))
    c = generate_synthetic(SyntheticSpec(n_samples=500, seed=2))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.targets, b.targets)
    assert not np.array_equal(a.features, c.features)


def test_synthetic_follows_the_group_conditionals():
    spec = SyntheticSpec(n_samples=40_000, seed=0)
    data = generate_synthetic(spec)
    assert data.num_groups == 2 and data.num_classes == 2 and data.num_features == 1
    assert data.group_counts / len(data) == pytest.approx([0.5, 0.5], abs=0.02)
    x = data.features[:, 0]
    for a in range(2):
        left = (data.groups == a) & (x <= 0)
        right = (data.groups == a) & (x > 0)
        assert data.targets[left].mean() == pytest.approx(spec.u_low[a], abs=0.02)
        assert data.targets[right].mean() == pytest.approx(spec.u_high[a], abs=0.02)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(u_low=(0.3,), u_high=(0.6, 0.9))
    with pytest.raises(ValueError):
        SyntheticSpec(u_low=(1.3, 0.1))


def test_dataset_arrays_are_read_only(synthetic):
    with pytest.raises(ValueError):
        synthetic.groups[0] = 1


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def test_esg_deals_every_group_evenly(synthetic, esg_shards):
    assert [s.client_id for s in esg_shards] == [0, 1, 2, 3]
    assert np.array_equal(_ids(esg_shards), np.sort(synthetic.sample_ids))
    counts = np.array([s.per_group_counts for s in esg_shards])
    assert np.all(counts.max(axis=0) - counts.min(axis=0) <= 1)


def test_ssg_gives_each_client_a_single_group(synthetic, ssg_shards):
    assert np.array_equal(_ids(ssg_shards), np.sort(synthetic.sample_ids))
    assert [s.present_groups() for s in ssg_shards] == [[0], [0], [1], [1]]
    assert all(s.num_samples >= 10 for s in ssg_shards)


@pytest.mark.parametrize("setting", [PartitionSetting.PSG, PartitionSetting.SSG])
@pytest.mark.parametrize("min_cell_size", [10, 100])
def test_dirichlet_settings_draw_unequal_sizes_above_the_cell_floor(synthetic, setting, min_cell_size):
    plan = PartitionPlan(setting, num_clients=8, seed=4, min_cell_size=min_cell_size)
    shards = partition(synthetic, plan)
    assert np.array_equal(_ids(shards), np.sort(synthetic.sample_ids))
    assert len({s.num_samples for s in shards}) > 1
    cells = np.array([s.per_group_counts for s in shards])
    assert np.all(cells[cells > 0] >= min_cell_size)


def test_partition_is_seeded(synthetic):
    plan = PartitionPlan(PartitionSetting.SSG, num_clients=6, seed=9)
    a = partition(synthetic, plan)
    b = partition(synthetic, plan)
    assert all(np.array_equal(x.data.sample_ids, y.data.sample_ids) for x, y in zip(a, b))


def test_psg_default_split_puts_group_halves_on_client_halves(rng, random_dataset):
    data = random_dataset(rng, n=400, num_groups=4)
    shards = partition(data, PartitionPlan(PartitionSetting.PSG, num_clients=6, seed=0))
    assert np.array_equal(_ids(shards), np.sort(data.sample_ids))
    for shard in shards[:3]:
        assert set(shard.present_groups()) <= {0, 1}
    for shard in shards[3:]:
        assert set(shard.present_groups()) <= {2, 3}


def test_psg_custom_split(rng, random_dataset):
    data = random_dataset(rng, n=400, num_groups=4)
    plan = PartitionPlan(PartitionSetting.PSG, num_clients=4, seed=0, psg_group_split=((0, 3), (1, 2)))
    shards = partition(data, plan)
    assert all(set(s.present_groups()) <= {0, 3} for s in shards[:2])
    assert all(set(s.present_groups()) <= {1, 2} for s in shards[2:])
    with pytest.raises(PartitionError):
        partition(data, PartitionPlan(PartitionSetting.PSG, 4, psg_group_split=((0,), (1,))))


def test_partition_rejects_empty_group_and_empty_client():
    data = GroupedDataset(np.zeros((5, 1)), np.zeros(5), np.zeros(5), num_groups=2, num_classes=2)
    with pytest.raises(PartitionError):
        partition(data, PartitionPlan(PartitionSetting.ESG, num_clients=2))
    data = GroupedDataset(np.zeros((4, 1)), np.zeros(4), [0, 1, 0, 1], num_groups=2, num_classes=2)
    with pytest.raises(PartitionError):
        partition(data, PartitionPlan(PartitionSetting.ESG, num_clients=3))
    with pytest.raises(PartitionError):
        partition(data, PartitionPlan(PartitionSetting.SSG, num_clients=1))


def test_pa_matrix_columns_are_client_group_priors(esg_shards, ssg_shards):
    pa = compute_pa_matrix(esg_shards)
    assert pa.entries.shape == (2, 4)
    assert pa.entries.sum(axis=0) == pytest.approx(np.ones(4))
    ssg = compute_pa_matrix(ssg_shards)
    assert np.array_equal(ssg.entries, [[1, 1, 0, 0], [0, 0, 1, 1]])
    with pytest.raises(ValueError):
        GroupPriorMatrix([[0.5, 0.2], [0.4, 0.8]])


def test_merge_and_singleton_shards(esg_shards):
    union = merge_shards(esg_shards)
    assert len(union) == sum(s.num_samples for s in esg_shards)
    assert np.array_equal(np.sort(union.sample_ids), _ids(esg_shards))
    singles = singleton_group_shards(esg_shards)
    assert [s.present_groups() for s in singles] == [[0], [1], [2], [3]]
    assert all(s.data.num_groups == 4 for s in singles)


def test_train_test_split_is_stratified(synthetic):
    train, test = train_test_split(synthetic, 0.25, seed=4)
    assert len(train) + len(test) == len(synthetic)
    assert not set(train.sample_ids) & set(test.sample_ids)
    assert test.group_counts == pytest.approx(np.round(0.25 * synthetic.group_counts), abs=1)
    with pytest.raises(ValueError):
        train_test_split(synthetic, 1.0, seed=0)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


CSV = """age,job,income,sex
30,clerk,<=50K,F
40,eng,>50K,M
50,eng,>50K,F
20,clerk,<=50K,M
"""


def _schema(**changes):
    fields = dict(features=("age", "job"), target="income", group="sex", categorical=("job",))
    fields.update(changes)
    return CsvSchema(**fields)


def test_load_csv_encodes_and_standardizes(tmp_path):
    path = tmp_path / "people.csv"
    path.write_text(CSV, encoding="utf-8")
    data = load_csv(path, _schema())
    assert data.feature_names == ("age", "job=clerk", "job=eng")
    assert data.features[:, 0].mean() == pytest.approx(0.0)
    assert data.features[:, 0].std() == pytest.approx(1.0)
    assert data.features[:, 1:].tolist() == [[1, 0], [0, 1], [0, 1], [1, 0]]
    # lexicographic: "<=50K" < ">50K", "F" < "M"
    assert data.targets.tolist() == [0, 1, 1, 0]
    assert data.groups.tolist() == [0, 1, 0, 1]


def test_load_csv_honours_declared_categories(tmp_path):
    path = tmp_path / "people.csv"
    path.write_text(CSV, encoding="utf-8")
    data = load_csv(path, _schema(group_values=("M", "F"), standardize=False))
    assert data.groups.tolist() == [1, 0, 1, 0]
    assert data.features[:, 0].tolist() == [30, 40, 50, 20]
    with pytest.raises(SchemaError, match="sex"):
        load_csv(path, _schema(group_values=("M",)))


def test_load_csv_errors_name_the_problem(tmp_path):
    path = tmp_path / "people.csv"
    path.write_text(CSV.replace("40,eng", "forty,eng"), encoding="utf-8")
    with pytest.raises(SchemaError, match=r"people.csv:3"):
        load_csv(path, _schema())
    with pytest.raises(SchemaError, match="height"):
        load_csv(path, _schema(features=("height",), categorical=()))
    with pytest.raises(SchemaError):
        load_csv(tmp_path / "missing.csv", _schema())


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def test_dataset_snapshot_is_bit_exact(tmp_path, synthetic):
    path = save_dataset(synthetic, tmp_path / "data.npz")
    loaded = load_dataset(path)
    assert np.array_equal(loaded.features, synthetic.features)
    assert np.array_equal(loaded.targets, synthetic.targets)
    assert np.array_equal(loaded.groups, synthetic.groups)
    assert np.array_equal(loaded.sample_ids, synthetic.sample_ids)
    assert loaded.feature_names == synthetic.feature_names


def test_partition_snapshot_restores_shards(tmp_path, ssg_shards):
    loaded = load_partition(save_partition(ssg_shards, tmp_path / "part.npz"))
    assert [s.client_id for s in loaded] == [s.client_id for s in ssg_shards]
    for a, b in zip(loaded, ssg_shards):
        assert np.array_equal(a.data.sample_ids, b.data.sample_ids)
        assert np.array_equal(a.data.features, b.data.features)


def test_dataset_snapshot_is_not_a_partition(tmp_path, synthetic):
    path = save_dataset(synthetic, tmp_path / "data.npz")
    with pytest.raises(SchemaError):
        load_partition(path)
