import json

import numpy as np
import pytest

import partialupdates.slicing as slicing
from partialupdates.errors import ConfigurationError
from partialupdates.model import ModelConfig, ParamSpace


@pytest.fixture
def small_config():
    return ModelConfig(num_layers=6, hidden_dim=16, num_heads=4, head_dim=4, ffn_dim=64, vocab_size=13, seq_len=8)


def test_nodes_must_be_multiple_of_slices(small_config):
    with pytest.raises(ConfigurationError) as exc_info:
        slicing.SlicePlan(small_config, 5, 2)
    assert exc_info.type == ConfigurationError
    assert exc_info.value.args[0] == "Rule 'K is a multiple of N' violated: K=5, N=2."


def test_invalid_strategy(small_config):
    with pytest.raises(ConfigurationError) as exc_info:
        slicing.SlicePlan(small_config, 4, 2, "mondongo")
    assert exc_info.value.args[0] == "Choose a valid slicing strategy: %s" % list(slicing.STRATEGIES)


def test_heads_must_divide(small_config):
    with pytest.raises(ConfigurationError) as exc_info:
        slicing.SlicePlan(small_config, 8, 8, "mlp-and-heads")
    assert exc_info.value.args[0] == "Rule 'h is divisible by N' violated: h=4, N=8."


def test_by_layers_needs_divisible_layers(small_config):
    with pytest.raises(ConfigurationError) as exc_info:
        slicing.SlicePlan(small_config, 4, 4, "by-layers")
    assert exc_info.value.args[0] == "Rule 'L is divisible by N' violated: L=6, N=4."


@pytest.mark.parametrize("n, expected", [(0, [0, 1]), (1, [2, 3])])
def test_head_group(n, expected):
    assert slicing.head_group(n, 4, 2) == expected


def test_slice_block_numel(small_config):
    space = ParamSpace(small_config)
    assert slicing.SliceBlock("layers.0.mlp.w", 0, 16, 32).numel(space) == 16 * 16
    assert slicing.SliceBlock("layers.0.mlp.v", 1, 0, 32).numel(space) == 16 * 32
    assert slicing.SliceBlock("tok_emb").numel(space) == 13 * 16


def test_node_slice_assignment(small_config):
    plan = slicing.SlicePlan(small_config, 8, 4)
    assert [plan.slice_index(k) for k in range(8)] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert plan.train_mask(1) == plan.train_mask(5)
    with pytest.raises(IndexError):
        plan.slice_index(8)


def test_mlp_only_masks(small_config):
    plan = slicing.SlicePlan(small_config, 4, 4, "mlp-only")
    mask = plan.train_mask(2)
    w, v = mask["layers.3.mlp.w"], mask["layers.3.mlp.v"]
    assert np.all(w[32:48]) and not np.any(w[:32]) and not np.any(w[48:])
    assert np.all(v[:, 32:48]) and not np.any(v[:, :32]) and not np.any(v[:, 48:])
    for name in ("tok_emb", "pos_emb", "layers.3.attn.wq", "layers.3.ln1.gain", "ln_f.bias"):
        assert np.all(mask[name])


def test_mlp_heads_and_wo_masks(small_config):
    plan = slicing.SlicePlan(small_config, 2, 2, "mlp-heads-and-wo")
    mask = plan.train_mask(1)
    assert np.all(mask["layers.0.attn.wk"][:, 8:]) and not np.any(mask["layers.0.attn.wk"][:, :8])
    assert np.all(mask["layers.0.attn.wo"][8:]) and not np.any(mask["layers.0.attn.wo"][:8])


def test_by_layers_masks(small_config):
    plan = slicing.SlicePlan(small_config, 3, 3, "by-layers")
    mask = plan.train_mask(1)
    assert np.all(mask["layers.2.mlp.w"]) and np.all(mask["layers.3.mlp.v"])
    assert not np.any(mask["layers.0.mlp.w"]) and not np.any(mask["layers.5.mlp.v"])
    assert np.all(mask["layers.0.attn.wq"])


@pytest.mark.parametrize(
    "num_nodes, num_slices, strategy",
    [
        (1, 1, "mlp-only"),
        (4, 1, "mlp-only"),
        (4, 2, "mlp-only"),
        (8, 4, "mlp-only"),
        (4, 4, "mlp-and-heads"),
        (6, 2, "mlp-heads-and-wo"),
        (6, 3, "by-layers"),
    ],
)
def test_count_vector_matches_closed_form(small_config, num_nodes, num_slices, strategy):
    plan = slicing.SlicePlan(small_config, num_nodes, num_slices, strategy)
    counts = plan.count_vector()
    expected = plan.closed_form_counts()
    for name in plan.space.names:
        assert np.array_equal(counts[name], expected[name]), name
        assert counts[name].min() >= 1
    plan.check_partition()
    assert plan.trainable_count() == plan.train_mask(0).count()


def test_single_slice_trains_everything(small_config):
    plan = slicing.SlicePlan(small_config, 4, 1)
    assert plan.trainable_count() == plan.space.size
    assert plan.sliced_names() == []


def test_trainable_fraction(small_config):
    rho, rho_attn, count = slicing.trainable_fraction(slicing.SlicePlan(small_config, 4, 4, "mlp-and-heads"))
    assert rho == 0.25
    assert rho_attn == 0.25
    rho, rho_attn, _ = slicing.trainable_fraction(slicing.SlicePlan(small_config, 4, 2, "mlp-only"))
    assert (rho, rho_attn) == (0.5, 1.0)


def test_experimental_strategy_warning(small_config):
    with pytest.warns(UserWarning) as warn_record:
        slicing.build_slice_plan(small_config, 2, 2, "by-layers")
    assert isinstance(warn_record.list[0].message, UserWarning)
    expected = "Slicing strategy by-layers is experimental and known to degrade or diverge."
    assert warn_record.list[0].message.args[0] == expected


def test_plan_to_json(small_config):
    described = json.loads(slicing.SlicePlan(small_config, 2, 2).to_json())
    assert described["num_slices"] == 2
    assert described["nodes"]["1"]["slice"] == 1
    assert {"name": "layers.0.mlp.w", "axis": 0, "start": 32, "stop": 64} in described["nodes"]["1"]["blocks"]


def test_all_at_once_schedule(small_config):
    schedule = slicing.SyncSchedule(small_config, "all-at-once", period=10)
    assert schedule.num_groups == 1
    assert schedule.groups_due(0) == []
    assert schedule.groups_due(9) == []
    assert schedule.groups_due(10) == [0]
    assert schedule.groups_due(20) == [0]
    schedule.check_partition()


def test_by_layers_schedule_offsets(small_config):
    schedule = slicing.SyncSchedule(small_config, "by-layers", period=9, layer_group_size=3)
    assert schedule.labels == ["layers 0-2", "layers 3-5", "embeddings and final norm"]
    assert schedule.offsets == [0, 3, 6]
    assert schedule.groups_due(3) == [1]
    assert schedule.groups_due(6) == [2]
    assert schedule.groups_due(9) == [0]
    assert schedule.groups_due(12) == [1]
    schedule.check_partition()
    assert sum(schedule.group_numel(g) for g in range(3)) == schedule.space.size


def test_unstaggered_schedule(small_config):
    schedule = slicing.SyncSchedule(small_config, "by-layers", period=9, layer_group_size=2, stagger=False)
    assert schedule.offsets == [0, 0, 0, 0]
    assert schedule.groups_due(9) == [0, 1, 2, 3]


def test_by_slices_schedule(small_config):
    schedule = slicing.SyncSchedule(small_config, "by-slices", period=8, num_slices=2)
    assert schedule.labels == ["mlp slice 0", "mlp slice 1", "embeddings", "attention and norms"]
    assert schedule.offsets == [0, 2, 4, 6]
    schedule.check_partition()
    mask = schedule.group_mask(1)
    assert np.all(mask["layers.4.mlp.w"][32:]) and not np.any(mask["layers.4.mlp.w"][:32])


def test_layer_group_size_must_divide(small_config):
    with pytest.raises(ConfigurationError) as exc_info:
        slicing.SyncSchedule(small_config, "by-layers", period=9, layer_group_size=4)
    expected = "Rule 'L is divisible by the layer group size' violated: L=6, group size=4."
    assert exc_info.value.args[0] == expected


def test_short_period_warning(small_config):
    with pytest.warns(UserWarning) as warn_record:
        slicing.build_sync_schedule(small_config, "by-layers", period=2, layer_group_size=2)
    expected = "Sync period H=2 is shorter than the 4 groups; some groups share an offset."
    assert warn_record.list[0].message.args[0] == expected
