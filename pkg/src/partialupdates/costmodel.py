"""Implement the analytic cost models.

Used in the partialupdates project to estimate training FLOPs with partially
trained MLPs and heads, per-device peak memory, all-reduce time and the
wall-clock time of DDP against low-communication training.

Classes:
--------
FlopsConfig - dimensions and trained fractions for the FLOPs model.
MemoryConfig - parameter counts and bytes per component for the memory model.
CommConfig - payload, bandwidth and timing for the communication model.
CostConfig - everything a cost report needs, with 1.3B-parameter defaults.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from partialupdates.errors import ConfigurationError
from partialupdates.model import ModelConfig, ParamSpace
from partialupdates.slicing import SlicePlan, trainable_fraction

GB = 1e9
ALGORITHMS = ("ddp", "diloco", "partial-updates")
OUTER_POLICIES = ("none", "streaming", "full")


def reference_model_config():
    """The 1.3B-parameter decoder: 24 layers, d=2048, 16 heads, V=32000, S=1024, tied head."""
    return ModelConfig(
        num_layers=24, hidden_dim=2048, num_heads=16, head_dim=128, ffn_dim=8192, vocab_size=32000, seq_len=1024
    )


# Published memory (GB) and trainable parameters (billions) of the reference variants.
REFERENCE_VARIANTS = {
    "DDP": {"algorithm": "ddp", "strategy": "mlp-only", "num_slices": 1, "memory_gb": 18.0, "trainable_b": 1.3},
    "Streaming DiLoCo": {"algorithm": "diloco", "strategy": "mlp-only", "num_slices": 1, "memory_gb": 19.36, "trainable_b": 1.3},
    "1/2 mlps": {"algorithm": "partial-updates", "strategy": "mlp-only", "num_slices": 2, "memory_gb": 14.87, "trainable_b": 0.87},
    "1/4 mlps": {"algorithm": "partial-updates", "strategy": "mlp-only", "num_slices": 4, "memory_gb": 12.77, "trainable_b": 0.67},
    "1/8 mlps": {"algorithm": "partial-updates", "strategy": "mlp-only", "num_slices": 8, "memory_gb": 11.72, "trainable_b": 0.57},
    "1/16 mlps": {"algorithm": "partial-updates", "strategy": "mlp-only", "num_slices": 16, "memory_gb": 11.19, "trainable_b": 0.52},
    "1/2 mlps + 1/2 heads": {
        "algorithm": "partial-updates", "strategy": "mlp-and-heads", "num_slices": 2, "memory_gb": 13.29, "trainable_b": 0.72
    },
    "1/4 mlps + 1/4 heads": {
        "algorithm": "partial-updates", "strategy": "mlp-and-heads", "num_slices": 4, "memory_gb": 10.41, "trainable_b": 0.44
    },
}


@dataclass
class FlopsConfig:

    """Inputs of the FLOPs model.

    Parameters
    -----------
    batch_size: B
    seq_len: S
    hidden_dim: H
    num_layers: L
    ffn_dim: D_ff
    vocab_size: V
    rho_mlp: trained fraction of MLP hidden units
    rho_attn: trained fraction of attention heads
    """

    batch_size: int = 1
    seq_len: int = 1024
    hidden_dim: int = 2048
    num_layers: int = 24
    ffn_dim: int = 8192
    vocab_size: int = 32000
    rho_mlp: float = 1.0
    rho_attn: float = 1.0

    def validate(self):
        for name in ("batch_size", "seq_len", "hidden_dim", "num_layers", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError("Rule 'all dimensions are at least 1' violated: %s=%s." % (name, getattr(self, name)))
        for name in ("rho_mlp", "rho_attn"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigurationError("Rule '0 < rho <= 1' violated: %s=%s." % (name, getattr(self, name)))
        return self

    @classmethod
    def from_model_config(cls, model_config, batch_size=1, rho_mlp=1.0, rho_attn=1.0, seq_len=None):
        return cls(
            batch_size=batch_size,
            seq_len=model_config.seq_len if seq_len is None else seq_len,
            hidden_dim=model_config.hidden_dim,
            num_layers=model_config.num_layers,
            ffn_dim=model_config.ffn_dim,
            vocab_size=model_config.vocab_size,
            rho_mlp=rho_mlp,
            rho_attn=rho_attn,
        )


def forward_flops(cfg):
    """Forward FLOPs of one step, term by term (one multiply-accumulate = 2 FLOPs)."""

    cfg.validate()
    B, S, H, L, D, V = cfg.batch_size, cfg.seq_len, cfg.hidden_dim, cfg.num_layers, cfg.ffn_dim, cfg.vocab_size
    out = {
        "emb": B * S * H,
        "proj": 6 * B * S * H * H,
        "attn": 4 * B * S * S * H,
        "out_proj": 2 * B * S * H * H,
        "ffn": 4 * B * S * H * D,
        "head": 2 * B * S * H * V + 3 * B * S * V,
    }
    out["mha"] = out["proj"] + out["attn"] + out["out_proj"]
    out["layers"] = L * (out["mha"] + out["ffn"])
    out["total"] = out["emb"] + out["layers"] + out["head"]
    return out


def backward_flops(cfg):
    """Backward FLOPs of one step; parameter gradients scale with rho, input Jacobians do not."""

    fwd = forward_flops(cfg)
    B, S, H, L, D = cfg.batch_size, cfg.seq_len, cfg.hidden_dim, cfg.num_layers, cfg.ffn_dim
    out = {
        "emb": 2 * fwd["emb"],
        "mha": 8 * B * S * S * H + (10 + 6 * cfg.rho_attn) * B * S * H * H,
        "ffn": 4 * B * S * H * D + 4 * cfg.rho_mlp * B * S * H * D,
        "head": 2 * fwd["head"],
    }
    out["layers"] = L * (out["mha"] + out["ffn"])
    out["total"] = out["emb"] + out["layers"] + out["head"]
    return out


def step_flops(cfg):
    return forward_flops(cfg)["total"] + backward_flops(cfg)["total"]


def flops_per_token(cfg):
    return step_flops(cfg) / (cfg.batch_size * cfg.seq_len)


def training_flops_ratio(cfg_ours, tokens_ours, cfg_base, tokens_base):
    """Total training FLOPs of a run relative to a baseline run."""
    return flops_per_token(cfg_ours) * tokens_ours / (flops_per_token(cfg_base) * tokens_base)


@dataclass
class MemoryConfig:

    """Inputs of the per-device memory model.

    Parameters
    -----------
    total_params: P
    trainable_params: P_t
    weight_bytes: bytes per master weight (fp32)
    grad_bytes: bytes per gradient entry (bf16)
    optimizer_bytes: bytes of inner optimizer state per trainable entry (two fp32 moments)
    outer_bytes: bytes of outer optimizer state per parameter of the active group
    offload_bytes: bytes of the global parameter copy per parameter of the active group
    num_groups: streaming groups G; only one group's outer state is resident
    outer_policy: 'none' (DDP), 'streaming' (P/G resident) or 'full' (P resident)
    """

    total_params: int = 1_300_000_000
    trainable_params: int = 1_300_000_000
    weight_bytes: float = 4
    grad_bytes: float = 2
    optimizer_bytes: float = 8
    outer_bytes: float = 4
    offload_bytes: float = 4
    num_groups: int = 9
    outer_policy: str = "streaming"

    def validate(self):
        if self.num_groups < 1:
            raise ConfigurationError("Rule 'G is at least 1' violated: G=%d." % self.num_groups)
        if not 0 <= self.trainable_params <= self.total_params:
            raise ConfigurationError(
                "Rule 'P_t <= P' violated: P_t=%d, P=%d." % (self.trainable_params, self.total_params)
            )
        if self.outer_policy not in OUTER_POLICIES:
            raise ConfigurationError("Choose a valid outer-state policy: %s" % list(OUTER_POLICIES))
        return self


def memory_estimate(mem):
    """Peak memory breakdown in bytes, plus the total in GB (1e9 bytes)."""

    mem.validate()
    P, Pt = mem.total_params, mem.trainable_params
    resident = {"none": 0.0, "streaming": P / mem.num_groups, "full": P}[mem.outer_policy]
    out = {
        "weights": mem.weight_bytes * P,
        "grads": mem.grad_bytes * Pt,
        "inner_opt": mem.optimizer_bytes * Pt,
        "outer_state": mem.outer_bytes * resident,
        "offloaded": mem.offload_bytes * resident,
    }
    out["total"] = sum(out.values())
    out["total_gb"] = out["total"] / GB
    return out


@dataclass
class CommConfig:

    """Inputs of the communication and wall-clock model.

    Parameters
    -----------
    payload_bytes: bytes M exchanged per full synchronization
    num_nodes: K
    bandwidth: per-link bandwidth B_w in bytes/s
    period: sync period H of low-communication methods
    compute_time: per-step compute time T_comp in seconds
    num_groups: streaming groups G sharing the payload of one window
    """

    payload_bytes: float = 2.6e9
    num_nodes: int = 32
    bandwidth: float = 2.875e9
    period: int = 100
    compute_time: float = 0.44
    num_groups: int = 1

    def validate(self):
        if self.payload_bytes <= 0 or self.bandwidth <= 0:
            raise ConfigurationError(
                "Rule 'M > 0 and B_w > 0' violated: M=%s, B_w=%s." % (self.payload_bytes, self.bandwidth)
            )
        if self.num_nodes < 1 or self.period < 1 or self.num_groups < 1:
            raise ConfigurationError(
                "Rule 'K, H and G are at least 1' violated: K=%d, H=%d, G=%d." % (self.num_nodes, self.period, self.num_groups)
            )
        return self


def comm_time(comm, amortized=False, payload_bytes=None):
    """Ring all-reduce time 2(K-1)/K * M / B_w, optionally amortized over H steps."""

    comm.validate()
    M = comm.payload_bytes if payload_bytes is None else payload_bytes
    K = comm.num_nodes
    seconds = 2.0 * (K - 1) / K * M / comm.bandwidth
    return seconds / comm.period if amortized else seconds


def wallclock_simulate(comm, total_steps, algorithm):
    """Total simulated seconds of a run.

    DDP overlaps communication with compute every step; low-communication
    methods add one all-reduce of M (split across the G streaming events) per
    H-step window to the compute time."""

    if algorithm not in ALGORITHMS:
        raise ConfigurationError("Choose a valid algorithm: %s" % list(ALGORITHMS))
    t_comm = comm_time(comm)
    if algorithm == "ddp":
        return total_steps * max(t_comm, comm.compute_time)
    per_event = comm_time(comm, payload_bytes=comm.payload_bytes / comm.num_groups)
    events = total_steps / comm.period * comm.num_groups
    return total_steps * comm.compute_time + events * per_event


def time_to_tokens(comm, tokens, tokens_per_step, algorithm):
    """Simulated seconds to consume a token budget."""
    return wallclock_simulate(comm, math.ceil(tokens / tokens_per_step), algorithm)


def parameter_count(model_config):
    return ParamSpace(model_config.validate()).size


def trainable_parameter_count(plan):
    return plan.trainable_count()


@dataclass
class CostConfig:

    """Inputs of a cost report; defaults describe the 1.3B-parameter setting.

    Parameters
    -----------
    model: ModelConfig of the costed architecture
    algorithm: 'ddp', 'diloco' or 'partial-updates'
    strategy: slicing strategy of partial-updates
    num_nodes: K
    num_slices: N
    batch_size: per-node batch size B
    period: sync period H
    num_groups: streaming groups G
    bandwidth: bytes/s per link
    bytes_per_param: bytes per communicated parameter (bf16)
    compute_time: per-step compute seconds
    tokens: token budget of the costed run
    baseline_tokens: token budget of the full-training baseline
    sweep_bandwidths: grid of the bandwidth sweep in bytes/s
    sweep_slices: grid of slice counts of the rho sweep
    """

    model: ModelConfig = field(default_factory=reference_model_config)
    algorithm: str = "partial-updates"
    strategy: str = "mlp-only"
    num_nodes: int = 32
    num_slices: int = 2
    batch_size: int = 16
    period: int = 100
    num_groups: int = 9
    bandwidth: float = 2.875e9
    bytes_per_param: float = 2
    compute_time: float = 0.44
    tokens: float = 26e9
    baseline_tokens: float = 28e9
    weight_bytes: float = 4
    grad_bytes: float = 2
    optimizer_bytes: float = 8
    outer_bytes: float = 4
    offload_bytes: float = 4
    sweep_bandwidths: list = field(default_factory=lambda: [0.5e9, 1e9, 2.875e9, 5e9, 10e9, 25e9, 50e9, 100e9])
    sweep_slices: list = field(default_factory=lambda: [1, 2, 4, 8, 16])

    def validate(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.model.validate()
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError("Choose a valid algorithm: %s" % list(ALGORITHMS))
        if self.algorithm != "partial-updates" and self.num_slices != 1:
            raise ConfigurationError(
                "Rule 'N == 1 unless the algorithm is partial-updates' violated: algorithm=%s, N=%d." % (self.algorithm, self.num_slices)
            )
        self.plan()
        self.comm_config().validate()
        self.memory_config().validate()
        return self

    def plan(self, num_slices=None, strategy=None):
        return SlicePlan(self.model, self.num_nodes, self.num_slices if num_slices is None else num_slices,
                         self.strategy if strategy is None else strategy)

    def flops_config(self, plan=None):
        rho_mlp, rho_attn, _ = trainable_fraction(plan or self.plan())
        return FlopsConfig.from_model_config(self.model, self.batch_size, rho_mlp, rho_attn)

    def memory_config(self, plan=None, algorithm=None):
        algorithm = algorithm or self.algorithm
        policy = "none" if algorithm == "ddp" else "streaming"
        return MemoryConfig(
            total_params=parameter_count(self.model),
            trainable_params=(plan or self.plan()).trainable_count(),
            weight_bytes=self.weight_bytes,
            grad_bytes=self.grad_bytes,
            optimizer_bytes=self.optimizer_bytes,
            outer_bytes=self.outer_bytes,
            offload_bytes=self.offload_bytes,
            num_groups=self.num_groups,
            outer_policy=policy,
        )

    def comm_config(self, bandwidth=None):
        return CommConfig(
            payload_bytes=parameter_count(self.model) * self.bytes_per_param,
            num_nodes=self.num_nodes,
            bandwidth=self.bandwidth if bandwidth is None else bandwidth,
            period=self.period,
            compute_time=self.compute_time,
            num_groups=self.num_groups if self.algorithm != "ddp" else 1,
        )

    @property
    def tokens_per_step(self):
        return self.num_nodes * self.batch_size * self.model.seq_len

    def to_dict(self):
        return asdict(self)


def cost_report(cost):
    """Nested JSON-ready report in base units (FLOPs, bytes, seconds)."""

    cost.validate()
    plan = cost.plan()
    rho_mlp, rho_attn, trainable = trainable_fraction(plan)
    flops = cost.flops_config(plan)
    base = FlopsConfig.from_model_config(cost.model, cost.batch_size)
    memory = memory_estimate(cost.memory_config(plan))
    comm = cost.comm_config()
    ours_steps = math.ceil(cost.tokens / cost.tokens_per_step)
    ddp_steps = math.ceil(cost.baseline_tokens / cost.tokens_per_step)

    report = {
        "parameters": {
            "total": parameter_count(cost.model),
            "trainable": trainable,
            "rho_mlp": rho_mlp,
            "rho_attn": rho_attn,
        },
        "flops": {
            "forward": forward_flops(flops),
            "backward": backward_flops(flops),
            "step": step_flops(flops),
            "per_token": flops_per_token(flops),
            "ratio_vs_full_training": training_flops_ratio(flops, cost.tokens, base, cost.baseline_tokens),
        },
        "memory": memory,
        "communication": {
            "payload_bytes": comm.payload_bytes,
            "all_reduce_s": comm_time(comm),
            "amortized_s": comm_time(comm, amortized=True),
            "per_event_s": comm_time(comm, payload_bytes=comm.payload_bytes / comm.num_groups),
        },
        "wallclock": {
            "steps": ours_steps,
            "seconds": wallclock_simulate(comm, ours_steps, cost.algorithm),
            "ddp_steps": ddp_steps,
            "ddp_seconds": wallclock_simulate(comm, ddp_steps, "ddp"),
        },
    }
    print("Parameters: %.3fB total, %.3fB trainable per node" % (report["parameters"]["total"] / 1e9, trainable / 1e9))
    print("Memory: %.2f GB per node" % memory["total_gb"])
    print("All-reduce: %.4f s (%.4f s amortized over H=%d)" % (
        report["communication"]["all_reduce_s"], report["communication"]["amortized_s"], cost.period))
    print("Training FLOPs vs full training: %.3f" % report["flops"]["ratio_vs_full_training"])
    return report


def bandwidth_sweep(cost, bandwidths=None):
    """One row per bandwidth: all-reduce time and wall-clock of DDP vs the costed algorithm."""

    cost.validate()
    bandwidths = cost.sweep_bandwidths if bandwidths is None else bandwidths
    ours_steps = math.ceil(cost.tokens / cost.tokens_per_step)
    ddp_steps = math.ceil(cost.baseline_tokens / cost.tokens_per_step)
    rows = []
    for bandwidth in bandwidths:
        comm = cost.comm_config(bandwidth)
        ddp_comm = CommConfig(comm.payload_bytes, comm.num_nodes, bandwidth, comm.period, comm.compute_time, 1)
        ours = wallclock_simulate(comm, ours_steps, cost.algorithm)
        ddp = wallclock_simulate(ddp_comm, ddp_steps, "ddp")
        rows.append({
            "bandwidth": float(bandwidth),
            "all_reduce_s": comm_time(comm),
            "amortized_s": comm_time(comm, amortized=True),
            "ddp_seconds": ddp,
            "seconds": ours,
            "speedup": ddp / ours,
        })
    return pd.DataFrame(rows)


def rho_sweep(cost, slices=None, heads=False):
    """One row per slice count: trained fractions, counts, memory and FLOPs ratio."""

    cost.validate()
    slices = cost.sweep_slices if slices is None else slices
    strategy = "mlp-and-heads" if heads else "mlp-only"
    base = FlopsConfig.from_model_config(cost.model, cost.batch_size)
    rows = []
    for N in slices:
        plan = cost.plan(N, strategy)
        rho_mlp, rho_attn, trainable = trainable_fraction(plan)
        flops = FlopsConfig.from_model_config(cost.model, cost.batch_size, rho_mlp, rho_attn)
        rows.append({
            "num_slices": N,
            "rho_mlp": rho_mlp,
            "rho_attn": rho_attn,
            "trainable_params": trainable,
            "memory_gb": memory_estimate(cost.memory_config(plan, "partial-updates"))["total_gb"],
            "step_flops": step_flops(flops),
            "flops_ratio": training_flops_ratio(flops, cost.tokens, base, cost.baseline_tokens),
        })
    return pd.DataFrame(rows)


def reference_table(cost=None):
    """Memory and trainable counts of the reference variants next to the published values."""

    cost = cost or CostConfig()
    rows = []
    for name, variant in REFERENCE_VARIANTS.items():
        plan = cost.plan(variant["num_slices"], variant["strategy"])
        memory = memory_estimate(cost.memory_config(plan, variant["algorithm"]))["total_gb"]
        trainable = plan.trainable_count()
        rows.append({
            "method": name,
            "memory_gb": memory,
            "published_memory_gb": variant["memory_gb"],
            "trainable_b": trainable / 1e9,
            "published_trainable_b": variant["trainable_b"],
        })
    df = pd.DataFrame(rows)
    df["memory_rel_error"] = np.abs(df["memory_gb"] / df["published_memory_gb"] - 1)
    df["trainable_rel_error"] = np.abs(df["trainable_b"] / df["published_trainable_b"] - 1)
    return df
