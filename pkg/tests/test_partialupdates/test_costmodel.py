import numpy as np
import pytest

import partialupdates.costmodel as costmodel
from partialupdates.errors import ConfigurationError
from partialupdates.model import ModelConfig, Transformer
from partialupdates.slicing import SlicePlan


@pytest.fixture
def reference():
    return costmodel.reference_model_config()


def three_sig(value):
    return float("%.3g" % value)


def test_reference_parameter_count(reference):
    assert costmodel.parameter_count(reference) == 1_275_793_408


@pytest.mark.parametrize("method", list(costmodel.REFERENCE_VARIANTS))
def test_reference_trainable_counts(reference, method):
    variant = costmodel.REFERENCE_VARIANTS[method]
    plan = SlicePlan(reference, 32, variant["num_slices"], variant["strategy"])
    computed = costmodel.trainable_parameter_count(plan) / 1e9
    assert computed == pytest.approx(variant["trainable_b"], rel=0.02)


def test_reference_table_within_tolerance():
    table = costmodel.reference_table()
    assert list(table["method"]) == list(costmodel.REFERENCE_VARIANTS)
    assert (table["memory_rel_error"] < 0.05).all()
    assert (table["trainable_rel_error"] < 0.02).all()


def test_streaming_memory_breakdown(reference):
    P = costmodel.parameter_count(reference)
    estimate = costmodel.memory_estimate(costmodel.MemoryConfig(total_params=P, trainable_params=P, num_groups=9))
    assert estimate["weights"] == 4 * P
    assert estimate["grads"] == 2 * P
    assert estimate["inner_opt"] == 8 * P
    assert estimate["outer_state"] == pytest.approx(4 * P / 9)
    assert estimate["total_gb"] == pytest.approx(19.36, rel=0.05)
    ddp = costmodel.memory_estimate(costmodel.MemoryConfig(total_params=P, trainable_params=P, outer_policy="none"))
    assert ddp["total_gb"] == pytest.approx(18.0, rel=0.05)
    assert ddp["outer_state"] == 0.0


def test_memory_config_rules():
    with pytest.raises(ConfigurationError) as exc_info:
        costmodel.memory_estimate(costmodel.MemoryConfig(num_groups=0))
    assert exc_info.value.args[0] == "Rule 'G is at least 1' violated: G=0."
    with pytest.raises(ConfigurationError) as exc_info:
        costmodel.memory_estimate(costmodel.MemoryConfig(total_params=10, trainable_params=11))
    assert exc_info.value.args[0] == "Rule 'P_t <= P' violated: P_t=11, P=10."


def test_backward_mha_is_twice_forward_when_heads_train():
    cfg = costmodel.FlopsConfig(batch_size=16)
    assert costmodel.backward_flops(cfg)["mha"] == 2 * costmodel.forward_flops(cfg)["mha"]
    # Input Jacobian terms remain when nothing in the MLP trains
    sliced = costmodel.FlopsConfig(batch_size=16, rho_mlp=0.25)
    assert costmodel.backward_flops(sliced)["ffn"] == pytest.approx(1.25 * costmodel.forward_flops(sliced)["ffn"])


def test_forward_flops_terms():
    flops = costmodel.forward_flops(costmodel.FlopsConfig(batch_size=2, seq_len=3, hidden_dim=4, num_layers=5, ffn_dim=16, vocab_size=7))
    assert flops["emb"] == 2 * 3 * 4
    assert flops["proj"] == 6 * 2 * 3 * 16
    assert flops["attn"] == 4 * 2 * 9 * 4
    assert flops["ffn"] == 4 * 2 * 3 * 4 * 16
    assert flops["head"] == 2 * 2 * 3 * 4 * 7 + 3 * 2 * 3 * 7
    assert flops["total"] == flops["emb"] + 5 * flops["mha"] + 5 * flops["ffn"] + flops["head"]


def test_flops_match_executed_matmuls():
    config = ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, head_dim=4, ffn_dim=32, vocab_size=11, seq_len=6)
    transformer = Transformer(config)
    tokens = np.random.default_rng(0).integers(11, size=(3, 6))
    _, cache = transformer.forward(transformer.init_params(), tokens)
    analytic = costmodel.forward_flops(costmodel.FlopsConfig.from_model_config(config, batch_size=3))
    executed = cache["flops"]
    for term in ("proj", "attn", "out_proj", "ffn"):
        assert executed[term] == 2 * analytic[term]
    assert executed["head"] == analytic["head"] - 3 * 3 * 6 * 11


def test_flops_ratio_half_mlps(reference):
    ours = costmodel.FlopsConfig.from_model_config(reference, batch_size=16, rho_mlp=0.5)
    base = costmodel.FlopsConfig.from_model_config(reference, batch_size=16)
    ratio = costmodel.training_flops_ratio(ours, 26e9, base, 28e9)
    assert 0.82 <= ratio <= 0.88


def test_flops_ratio_quarter_mlps_and_heads(reference):
    ours = costmodel.FlopsConfig.from_model_config(reference, batch_size=16, rho_mlp=0.25, rho_attn=0.25)
    base = costmodel.FlopsConfig.from_model_config(reference, batch_size=16)
    ratio = costmodel.training_flops_ratio(ours, 28e9, base, 26e9)
    assert 0.82 <= ratio <= 0.88


def test_flops_config_rules():
    with pytest.raises(ConfigurationError) as exc_info:
        costmodel.forward_flops(costmodel.FlopsConfig(rho_mlp=0.0))
    assert exc_info.value.args[0] == "Rule '0 < rho <= 1' violated: rho_mlp=0.0."


DIMENSIONS = ("batch_size", "seq_len", "hidden_dim", "num_layers", "ffn_dim", "vocab_size")


def random_flops_configs(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        dims = {name: int(rng.integers(1, 4097)) for name in DIMENSIONS}
        dims["num_layers"] = int(rng.integers(1, 65))
        yield costmodel.FlopsConfig(rho_mlp=float(rng.uniform(0.01, 1.0)), rho_attn=float(rng.uniform(0.01, 1.0)), **dims)


def test_flops_closed_forms_on_random_configs():
    for cfg in random_flops_configs(1000):
        B, S, H, L, D, V = (getattr(cfg, name) for name in DIMENSIONS)
        forward = B * S * H + L * (8 * B * S * H * H + 4 * B * S * S * H + 4 * B * S * H * D) + 2 * B * S * H * V + 3 * B * S * V
        backward = (
            2 * B * S * H
            + L * (8 * B * S * S * H + (10 + 6 * cfg.rho_attn) * B * S * H * H + 4 * (1 + cfg.rho_mlp) * B * S * H * D)
            + 4 * B * S * H * V + 6 * B * S * V
        )
        assert costmodel.forward_flops(cfg)["total"] == forward
        assert costmodel.backward_flops(cfg)["total"] == pytest.approx(backward, rel=1e-12)
        assert costmodel.step_flops(cfg) == pytest.approx(forward + backward, rel=1e-12)


@pytest.mark.parametrize("name", DIMENSIONS)
def test_flops_grow_with_every_dimension(name):
    for cfg in random_flops_configs(200, seed=1):
        larger = costmodel.FlopsConfig(**{**cfg.__dict__, name: getattr(cfg, name) + 1})
        assert costmodel.forward_flops(larger)["total"] > costmodel.forward_flops(cfg)["total"]
        assert costmodel.step_flops(larger) > costmodel.step_flops(cfg)


@pytest.mark.parametrize("name", ["rho_mlp", "rho_attn"])
def test_flops_shrink_with_rho(name):
    for cfg in random_flops_configs(200, seed=2):
        smaller = costmodel.FlopsConfig(**{**cfg.__dict__, name: getattr(cfg, name) / 2})
        assert costmodel.step_flops(smaller) < costmodel.step_flops(cfg)
        assert costmodel.forward_flops(smaller)["total"] == costmodel.forward_flops(cfg)["total"]


def test_memory_limit_of_many_groups():
    P = 1_000_000
    previous = None
    for G in (1, 10, 1000, 10**6, 10**12):
        total = costmodel.memory_estimate(costmodel.MemoryConfig(total_params=P, trainable_params=P, num_groups=G))["total"]
        if previous is not None:
            assert total < previous
        previous = total
    # Weights, gradients and two moments remain when no outer state is resident
    assert previous == pytest.approx(4 * P + 2 * P + 8 * P, rel=1e-9)


def test_comm_time_falls_with_bandwidth():
    for num_nodes in (2, 8, 32):
        times = [
            costmodel.comm_time(costmodel.CommConfig(num_nodes=num_nodes, bandwidth=bandwidth))
            for bandwidth in np.geomspace(1e8, 1e12, 25)
        ]
        assert all(a > b for a, b in zip(times, times[1:]))


def test_comm_time_reference_setting():
    comm = costmodel.CommConfig(payload_bytes=2.6e9, num_nodes=32, bandwidth=2.875e9, period=100)
    assert three_sig(costmodel.comm_time(comm)) == 1.75
    assert three_sig(costmodel.comm_time(comm, amortized=True)) == 0.0175


def test_comm_time_single_node_is_free():
    assert costmodel.comm_time(costmodel.CommConfig(num_nodes=1)) == 0.0


def test_comm_config_rules():
    with pytest.raises(ConfigurationError) as exc_info:
        costmodel.comm_time(costmodel.CommConfig(bandwidth=0))
    assert exc_info.value.args[0] == "Rule 'M > 0 and B_w > 0' violated: M=2600000000.0, B_w=0."


def test_ddp_step_is_communication_bound():
    comm = costmodel.CommConfig()
    assert costmodel.wallclock_simulate(comm, 1, "ddp") == pytest.approx(costmodel.comm_time(comm))


def test_low_communication_wallclock():
    comm = costmodel.CommConfig(num_groups=9)
    ddp_steps = 1000
    ours = costmodel.wallclock_simulate(comm, 1.7 * ddp_steps, "partial-updates")
    ddp = costmodel.wallclock_simulate(comm, ddp_steps, "ddp")
    assert ours <= 2.0 / 3.0 * ddp
    # Streaming splits the payload but not the total traffic
    single = costmodel.wallclock_simulate(costmodel.CommConfig(num_groups=1), 1.7 * ddp_steps, "partial-updates")
    assert ours == pytest.approx(single)


def test_time_to_tokens():
    comm = costmodel.CommConfig(compute_time=1.0, payload_bytes=1.0, bandwidth=1e12)
    seconds = costmodel.time_to_tokens(comm, 1001, 100, "ddp")
    assert seconds == pytest.approx(11.0)


def test_cost_config_rules():
    with pytest.raises(ConfigurationError) as exc_info:
        costmodel.CostConfig(algorithm="ddp").validate()
    expected = "Rule 'N == 1 unless the algorithm is partial-updates' violated: algorithm=ddp, N=2."
    assert exc_info.value.args[0] == expected
    cost = costmodel.CostConfig(model={"num_layers": 2, "hidden_dim": 8, "num_heads": 2, "head_dim": 4}, num_nodes=4).validate()
    assert isinstance(cost.model, ModelConfig)
    assert cost.tokens_per_step == 4 * 16 * 33


def test_cost_report(capsys):
    report = costmodel.cost_report(costmodel.CostConfig())
    assert report["parameters"]["total"] == 1_275_793_408
    assert report["parameters"]["rho_mlp"] == 0.5
    assert three_sig(report["communication"]["all_reduce_s"]) == 1.75
    assert report["memory"]["total_gb"] == pytest.approx(14.87, rel=0.05)
    assert 0.82 <= report["flops"]["ratio_vs_full_training"] <= 0.88
    assert report["wallclock"]["seconds"] < report["wallclock"]["ddp_seconds"]
    captured = capsys.readouterr()
    assert "Memory:" in captured.out


def test_bandwidth_sweep():
    df = costmodel.bandwidth_sweep(costmodel.CostConfig(), [1e9, 100e9])
    assert list(df["bandwidth"]) == [1e9, 100e9]
    assert df["all_reduce_s"].iloc[0] == pytest.approx(100 * df["all_reduce_s"].iloc[1])
    assert df["speedup"].iloc[0] > df["speedup"].iloc[1]


def test_rho_sweep():
    df = costmodel.rho_sweep(costmodel.CostConfig(), [1, 2, 4])
    assert list(df["num_slices"]) == [1, 2, 4]
    assert list(df["rho_mlp"]) == [1.0, 0.5, 0.25]
    assert df["trainable_params"].is_monotonic_decreasing
    assert df["memory_gb"].iloc[1] == pytest.approx(14.87, rel=0.05)
    heads = costmodel.rho_sweep(costmodel.CostConfig(), [4], heads=True)
    assert heads["memory_gb"].iloc[0] == pytest.approx(10.41, rel=0.05)
