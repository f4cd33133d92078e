import numpy as np
import pytest

from chmerge import (
    ChannelMerger,
    Checkpoint,
    ClusterSpec,
    MergeSpec,
    PruneSpec,
    make_delta_set,
    merge,
    reconstruct,
    storage_report,
)
from chmerge.cluster import AssignmentTable
from chmerge.exceptions import CorruptBundleError, InvalidParameterError, ShapeMismatchError
from chmerge.merge import identity_assignments
from chmerge.synthetic import make_experts
from chmerge.tensor_io import checkpoint_to_bytes

from oracles import direct_task_arithmetic, gather


def _model_table(deltas, labels, k):
    table = AssignmentTable("model", k, deltas.experts)
    table.table[None] = np.asarray(labels, dtype=np.int64)
    return table


def _channel_table(deltas, layer, matrix, k):
    table = AssignmentTable("channel", k, deltas.experts)
    table.table[layer] = np.asarray(matrix, dtype=np.int64)
    return table


def test_single_row_arithmetic():
    base = Checkpoint({"w": [[1.0, 0.0]]})
    experts = {"a": Checkpoint({"w": [[3.0, 2.0]]}), "b": Checkpoint({"w": [[3.0, 2.0]]})}
    deltas = make_delta_set(base, experts)
    bundle = merge(deltas, _model_table(deltas, [0, 0], 1), MergeSpec(lambda_=0.5))
    assert bundle.groups[0]["w"].tolist() == [[3.0, 2.0]]


def test_zero_deltas_give_base(small_family):
    base, _ = small_family
    deltas = make_delta_set(base, {"a": base, "b": base, "c": base})
    bundle = merge(deltas, _model_table(deltas, [0, 1, 1], 2))
    for group in bundle.groups:
        assert group.like(group.layers, name=base.name) == base


def test_identity_reconstruction_bitwise():
    base, experts = make_experts(3, 5, (64, 64), seed=11)
    deltas = make_delta_set(base, experts)
    bundle = merge(deltas, identity_assignments(deltas), MergeSpec(lambda_=1.0))
    for name, expert in experts.items():
        assert reconstruct(bundle, name) == expert


def test_single_group_matches_direct_sum():
    base, experts = make_experts(4, 3, (16, 24), seed=5)
    deltas = make_delta_set(base, experts)
    bundle = merge(deltas, _model_table(deltas, [0, 0, 0, 0], 1), MergeSpec(lambda_=0.5))
    for layer in base.names:
        expect = direct_task_arithmetic(base[layer], [e[layer] for e in experts.values()], 0.5)
        assert np.array_equal(bundle.groups[0][layer].view(np.uint32), expect.view(np.uint32))
    outs = [reconstruct(bundle, name) for name in experts]
    for ckpt in outs[1:]:
        assert checkpoint_to_bytes(ckpt.like(ckpt.layers, name="")) == checkpoint_to_bytes(
            outs[0].like(outs[0].layers, name="")
        )


def test_hand_gather():
    rng = np.random.default_rng(3)
    base = Checkpoint({"w": rng.standard_normal((3, 4))})
    experts = {
        "a": Checkpoint({"w": rng.standard_normal((3, 4))}),
        "b": Checkpoint({"w": rng.standard_normal((3, 4))}),
    }
    deltas = make_delta_set(base, experts)
    assign = [[0, 1], [1, 1], [0, 0]]
    bundle = merge(deltas, _channel_table(deltas, "w", assign, 2))
    groups = [g["w"] for g in bundle.groups]
    for e, name in enumerate(["a", "b"]):
        index = [row[e] for row in assign]
        assert np.array_equal(reconstruct(bundle, name)["w"], gather(groups, index))


def test_empty_group_rows_equal_base():
    rng = np.random.default_rng(8)
    base = Checkpoint({"w": rng.standard_normal((3, 4))})
    experts = {n: Checkpoint({"w": rng.standard_normal((3, 4))}) for n in "ab"}
    deltas = make_delta_set(base, experts)
    # channel 0: both experts in group 0, so group 1 row 0 is empty
    bundle = merge(deltas, _channel_table(deltas, "w", [[0, 0], [0, 1], [1, 0]], 2))
    assert np.array_equal(bundle.groups[1]["w"][0], base["w"][0])


def test_copy_count_equals_params(small_family):
    base, experts = small_family
    deltas = make_delta_set(base, experts)
    bundle = merge(deltas, _model_table(deltas, [0, 1, 0], 2))
    ckpt, stats = reconstruct(bundle, "expert1", return_stats=True)
    assert stats.element_copies == ckpt.num_params == base.num_params
    assert stats.weight_flops == 0
    line = stats.format_line()
    assert line.startswith("lookup_seconds=") and f"param_count={base.num_params}" in line


def test_unknown_expert(small_family):
    base, experts = small_family
    deltas = make_delta_set(base, experts)
    bundle = merge(deltas, identity_assignments(deltas))
    with pytest.raises(KeyError, match="nobody"):
        reconstruct(bundle, "nobody")


def test_out_of_range_index_rejected(small_family):
    base, experts = small_family
    deltas = make_delta_set(base, experts)
    bundle = merge(deltas, _model_table(deltas, [0, 1, 0], 2))
    layer = base.names[0]
    bundle.indices["expert0"][layer] = bundle.indices["expert0"][layer].copy()
    bundle.indices["expert0"][layer][0] = 7
    with pytest.raises(CorruptBundleError):
        reconstruct(bundle, "expert0")


def test_assignment_errors(small_family):
    base, experts = small_family
    deltas = make_delta_set(base, experts)
    with pytest.raises(InvalidParameterError):
        merge(deltas, _model_table(deltas, [0, 2, 0], 2))
    wrong = AssignmentTable("model", 2, ["x", "y", "z"])
    wrong.table[None] = np.zeros(3, dtype=np.int64)
    with pytest.raises(ShapeMismatchError):
        merge(deltas, wrong)


def test_storage_arithmetic():
    base = Checkpoint({"w": np.zeros((10, 100))})
    experts = {n: base for n in "abcd"}
    deltas = make_delta_set(base, experts)
    report = storage_report(merge(deltas, _model_table(deltas, [0, 0, 1, 1], 2)))
    assert report.weight_params == 2000
    assert report.ensemble_params == 4000
    assert report.weight_ratio == 0.5
    assert report.index_entries == 40
    assert report.index_bytes == 160
    assert report.total_ratio == pytest.approx((2000 * 4 + 160) / (4000 * 4))


def test_storage_full_rank(small_family):
    base, experts = small_family
    deltas = make_delta_set(base, experts)
    assert storage_report(merge(deltas, identity_assignments(deltas))).weight_ratio == 1.0


def test_normalize_divides_by_cluster_size():
    base = Checkpoint({"w": [[0.0, 0.0]]})
    experts = {"a": Checkpoint({"w": [[2.0, 4.0]]}), "b": Checkpoint({"w": [[4.0, 0.0]]})}
    deltas = make_delta_set(base, experts)
    table = _model_table(deltas, [0, 0], 1)
    plain = merge(deltas, table, MergeSpec(lambda_=1.0))
    norm = merge(deltas, table, MergeSpec(lambda_=1.0, normalize=True))
    assert plain.groups[0]["w"].tolist() == [[6.0, 4.0]]
    assert norm.groups[0]["w"].tolist() == [[3.0, 2.0]]
    assert norm.manifest.normalize is True


def test_merge_deterministic_across_threads():
    base, experts = make_experts(4, 6, (12, 10), seed=2)
    spec = MergeSpec(cluster=ClusterSpec(k=2, seed=9), prune=PruneSpec("dare", 0.3))
    from chmerge import apply_prune, build_assignments

    outs = []
    for jobs in (1, 4):
        deltas = apply_prune(make_delta_set(base, experts), spec.prune, 9)
        table = build_assignments(deltas, spec.cluster, n_jobs=jobs)
        bundle = merge(deltas, table, spec, n_jobs=jobs)
        outs.append([checkpoint_to_bytes(g) for g in bundle.groups])
    assert outs[0] == outs[1]


def test_estimator_pipeline(small_family):
    base, experts = small_family
    est = ChannelMerger(k=2, prune="ties", prune_ratio=0.5, seed=1).fit(experts, base=base)
    assert est.bundle_.manifest.k == 2
    assert est.bundle_.manifest.prune == {"kind": "ties", "ratio": 0.5, "rescale": True}
    (ckpt,) = est.transform("expert2")
    assert ckpt.names == base.names
    with pytest.raises(InvalidParameterError):
        ChannelMerger(k=5).fit(experts, base=base)
