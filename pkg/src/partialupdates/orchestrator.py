"""Implement the training orchestrator.

Used in the partialupdates project to run low-communication training with
partial parameter updates on K simulated nodes inside one process, together
with the DDP and DiLoCo baselines.

Classes:
--------
RunConfig - number of nodes, slices, rounds and optimizer settings of a run.
NodeState - local replica, optimizer state, data cursor and RNG of one node.
RunMetrics - per-step and per-round records.
Trainer - owns the global parameters and drives rounds.
"""

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from partialupdates import checkpoint
from partialupdates.costmodel import CommConfig, FlopsConfig, comm_time, step_flops
from partialupdates.datasets import ShardCursor, eval_batches, next_batch, shard
from partialupdates.errors import ConfigurationError, ContractError, DivergenceError, NumericalOverflowError
from partialupdates.model import (BACKWARD_MODES, GradientBuffer, ModelConfig, ParamMask, Transformer,
                                  copy_params, cross_entropy_loss)
from partialupdates.optim import InnerOptState, OuterOptState, dense_inner_step, inner_step, lr_schedule, outer_step
from partialupdates.slicing import build_slice_plan, build_sync_schedule, trainable_fraction
from partialupdates.utils import write_csv_atomic

ALGORITHMS = ("ddp", "diloco", "partial-updates")
DIVERGENCE_THRESHOLD = 1e4
RESUMABLE_FIELDS = ("threads", "rounds")
STEP_COLUMNS = ["round", "step", "node", "loss", "tokens", "sim_comm_s", "sim_comp_s"]
ROUND_COLUMNS = [
    "round", "step", "train_loss", "eval_loss", "eval_perplexity", "tokens", "sim_comm_s", "sim_comp_s", "sim_wallclock_s",
]


@dataclass
class RunConfig:

    """Settings of one training run.

    Parameters
    -----------
    num_nodes: K
    num_slices: N; K must be a multiple of N
    period: local steps per round H
    rounds: number of rounds T
    algorithm: 'ddp', 'diloco' or 'partial-updates'
    strategy: slicing strategy
    backward_mode: one of BACKWARD_MODES
    sync_grouping: 'all-at-once', 'by-layers' or 'by-slices'
    layer_group_size: layers per sync group with by-layers grouping
    stagger: spread sync groups over the H-step window
    node_batch_size: sequences per node and step
    global_batch_size: K * node_batch_size; derived when None
    seed: seed of initialization, data order and node generators
    inner_*: inner optimizer settings; warmup_fraction of the total steps
    outer_*: outer optimizer settings
    reset_inner_state: drop inner optimizer moments at the start of each round
    threads: worker threads for node loops; all cores when None
    device_flops: simulated device FLOP rate used for compute seconds
    bandwidth: simulated per-link bandwidth in bytes/s
    bytes_per_param: bytes per communicated parameter
    """

    num_nodes: int = 4
    num_slices: int = 1
    period: int = 10
    rounds: int = 10
    algorithm: str = "partial-updates"
    strategy: str = "mlp-only"
    backward_mode: str = "full-jacobian"
    sync_grouping: str = "all-at-once"
    layer_group_size: int = 3
    stagger: bool = True
    node_batch_size: int = 8
    global_batch_size: int = None
    seed: int = 0
    init_scale: float = 0.02
    inner_optimizer: str = "adamw"
    inner_lr: float = 3e-3
    inner_lr_schedule: str = "warmup-cosine"
    warmup_fraction: float = 0.05
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.1
    outer_optimizer: str = "nesterov"
    outer_lr: float = 0.4
    outer_momentum: float = 0.9
    reset_inner_state: bool = False
    eval_batch_size: int = 32
    threads: int = None
    device_flops: float = 1e12
    bandwidth: float = 2.875e9
    bytes_per_param: float = 2

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError("Choose a valid algorithm: %s" % list(ALGORITHMS))
        if self.backward_mode not in BACKWARD_MODES:
            raise ConfigurationError("Choose a valid backward mode: %s" % list(BACKWARD_MODES))
        for name in ("num_nodes", "num_slices", "period", "rounds", "node_batch_size", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError("Rule '%s is at least 1' violated: %s=%s." % (name, name, getattr(self, name)))
        if self.num_nodes % self.num_slices != 0:
            raise ConfigurationError("Rule 'K is a multiple of N' violated: K=%d, N=%d." % (self.num_nodes, self.num_slices))
        if self.global_batch_size is None:
            self.global_batch_size = self.num_nodes * self.node_batch_size
        if self.global_batch_size != self.num_nodes * self.node_batch_size:
            raise ConfigurationError(
                "Rule 'global batch = K x per-node batch' violated: global=%d, K=%d, per-node=%d."
                % (self.global_batch_size, self.num_nodes, self.node_batch_size)
            )
        if self.algorithm != "partial-updates" and self.num_slices != 1:
            raise ConfigurationError(
                "Rule 'N == 1 unless the algorithm is partial-updates' violated: algorithm=%s, N=%d." % (self.algorithm, self.num_slices)
            )
        if self.backward_mode != "full-jacobian" and self.num_slices < 2:
            raise ConfigurationError("Rule 'detach modes need N >= 2' violated: mode=%s, N=%d." % (self.backward_mode, self.num_slices))
        if self.algorithm == "ddp" and self.sync_grouping != "all-at-once":
            raise ConfigurationError("Rule 'DDP synchronizes all parameters every step' violated: grouping=%s." % self.sync_grouping)
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("Rule '0 <= warmup_fraction < 1' violated: warmup_fraction=%s." % self.warmup_fraction)
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError("Rule 'threads is at least 1' violated: threads=%d." % self.threads)
        return self

    @property
    def total_steps(self):
        return self.rounds * self.period

    @property
    def warmup_steps(self):
        return max(1, int(round(self.warmup_fraction * self.total_steps))) if self.warmup_fraction > 0 else 0

    def to_dict(self):
        return asdict(self)


@dataclass
class NodeState:
    """One simulated node. Used by a single worker thread at a time."""

    node: int
    slice_index: int
    params: dict
    train_mask: ParamMask
    opt_state: InnerOptState
    view: object
    cursor: ShardCursor
    rng: np.random.Generator


class RunMetrics:

    """Per-step node losses and per-round summaries.

    Public methods:
    ---------------
    to_frame(self): Step records with STEP_COLUMNS.

    rounds_frame(self): Round records with ROUND_COLUMNS.

    write_csv(self, path, rounds_path=None): Atomic CSV export.

    summary(self): Final values of the run.
    """

    def __init__(self, steps=None, rounds=None):
        """Initialise variables."""

        self.steps = list(steps or [])
        self.rounds = list(rounds or [])

    def add_steps(self, rows):
        for row in rows:
            for key in ("loss", "sim_comm_s", "sim_comp_s"):
                if not math.isfinite(row[key]):
                    raise ContractError("Metric %s is not finite at step %d." % (key, row["step"]))
            if self.steps and row["tokens"] < self.steps[-1]["tokens"]:
                raise ContractError("Token counter decreased at step %d." % row["step"])
            self.steps.append(row)

    def add_round(self, record):
        self.rounds.append(record)

    def to_frame(self):
        return pd.DataFrame(self.steps, columns=STEP_COLUMNS)

    def rounds_frame(self):
        return pd.DataFrame(self.rounds, columns=ROUND_COLUMNS)

    def write_csv(self, path, rounds_path=None):
        write_csv_atomic(path, self.to_frame())
        if rounds_path is not None:
            write_csv_atomic(rounds_path, self.rounds_frame())

    def summary(self):
        if not self.rounds:
            return {"rounds": 0, "steps": 0, "tokens": 0}
        last = self.rounds[-1]
        return {
            "rounds": last["round"],
            "steps": last["step"],
            "tokens": last["tokens"],
            "final_train_loss": last["train_loss"],
            "final_eval_loss": last["eval_loss"],
            "final_eval_perplexity": last["eval_perplexity"],
            "sim_wallclock_s": last["sim_wallclock_s"],
        }


def simulated_all_reduce(deltas, counts, supports=None):
    """Sum per-node deltas in node order and divide elementwise by the count vector.

    Parameters
    ----------
    deltas: list of {name: array} per node; missing names are zero
    counts: {name: int array} count vector m
    supports: optional list of ParamMask; a nonzero delta outside a node's support is rejected"""

    total = {name: np.zeros(m.shape) for name, m in counts.items()}
    for k, delta in enumerate(deltas):
        for name, block in delta.items():
            if supports is not None:
                outside = (block != 0) & ~supports[k][name]
                if outside.any():
                    raise ContractError(
                        "Delta of node %d has %d entries of %s outside its trainable set." % (k, int(outside.sum()), name)
                    )
            total[name] += block
    return {
        name: np.divide(total[name], counts[name], out=np.zeros(counts[name].shape), where=counts[name] > 0)
        for name in counts
    }


def evaluate(model, params, store, batch_size=32):
    """Mean token NLL and perplexity over the held-out sequences."""

    nll, count = 0.0, 0
    for batch in eval_batches(store, batch_size):
        logits, _ = model.forward(params, batch.inputs)
        loss, _ = cross_entropy_loss(logits, batch.targets)
        nll += loss * batch.num_tokens
        count += batch.num_tokens
    if count == 0:
        raise ConfigurationError("Rule 'eval_sequences is at least 1' violated: eval_sequences=0.")
    loss = nll / count
    return loss, math.exp(loss)


class Trainer:

    """Runs a training algorithm on K simulated nodes.

    Parameters
    -----------
    model_config: ModelConfig
    run_config: RunConfig
    store: SequenceStore the node shards and the eval set come from

    Public methods:
    ---------------
    run_round(self): One round of H local steps with its synchronizations.

    run(self, rounds=None): Remaining rounds; returns RunMetrics.

    evaluate(self): Eval loss and perplexity of the global parameters.

    save(self, path) / load(cls, path, store): Full run state in the checkpoint format.
    """

    def __init__(self, model_config, run_config, store):
        """Initialise variables."""

        self.model_config = model_config
        self.config = run_config.validate()
        self.store = store
        self.model = Transformer(model_config)
        cfg = self.config

        if store.spec.vocab_size != model_config.vocab_size:
            raise ConfigurationError(
                "Rule 'corpus V == model V' violated: corpus V=%d, model V=%d." % (store.spec.vocab_size, model_config.vocab_size)
            )
        if store.spec.seq_len - 1 > model_config.seq_len:
            raise ConfigurationError(
                "Rule 'corpus seq_len - 1 <= model S' violated: corpus seq_len=%d, model S=%d." % (store.spec.seq_len, model_config.seq_len)
            )
        if cfg.backward_mode != "full-jacobian" and cfg.strategy == "by-layers":
            warn_message = "Backward mode %s detaches MLP slices, not layer bands." % cfg.backward_mode
            print(warn_message)
            warnings.warn(warn_message, category=UserWarning)

        self.plan = build_slice_plan(model_config, cfg.num_nodes, cfg.num_slices, cfg.strategy)
        self.schedule = build_sync_schedule(
            model_config, cfg.sync_grouping, cfg.period, cfg.layer_group_size, cfg.num_slices, cfg.stagger
        )
        self.space = self.model.space
        self.counts = self.plan.count_vector()
        self.group_masks = [self.schedule.group_mask(g) for g in range(self.schedule.num_groups)]

        self.params = self.model.init_params(cfg.seed, cfg.init_scale)
        self.outer_state = OuterOptState(self.space, cfg.outer_optimizer, cfg.outer_lr, cfg.outer_momentum)
        self.ddp_state = self._inner_state(ParamMask.full(self.space)) if cfg.algorithm == "ddp" else None
        self.nodes = [
            NodeState(
                node=k,
                slice_index=self.plan.slice_index(k),
                params=copy_params(self.params),
                train_mask=self.plan.train_mask(k),
                opt_state=self._inner_state(self.plan.train_mask(k)),
                view=shard(store, cfg.num_nodes, k, cfg.seed),
                cursor=ShardCursor(),
                rng=np.random.default_rng([cfg.seed, 3, k]),
            )
            for k in range(cfg.num_nodes)
        ]

        self.round = 0
        self.step = 0
        self.tokens = 0
        self.sim_wallclock_s = 0.0
        self.metrics = RunMetrics()
        self.tokens_per_batch = cfg.node_batch_size * (store.spec.seq_len - 1)

        rho_mlp, rho_attn, _ = trainable_fraction(self.plan)
        flops = FlopsConfig.from_model_config(model_config, cfg.node_batch_size, rho_mlp, rho_attn, seq_len=store.spec.seq_len - 1)
        self.step_compute_s = step_flops(flops) / cfg.device_flops
        group_sizes = [self.schedule.group_numel(g) for g in range(self.schedule.num_groups)]
        self.group_comm_s = [self._comm_seconds(size) for size in group_sizes]
        self.full_comm_s = self._comm_seconds(self.space.size)

    def _inner_state(self, mask):
        cfg = self.config
        return InnerOptState(mask, cfg.inner_optimizer, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def _comm_seconds(self, num_params):
        comm = CommConfig(
            payload_bytes=num_params * self.config.bytes_per_param,
            num_nodes=self.config.num_nodes,
            bandwidth=self.config.bandwidth,
        )
        return comm_time(comm)

    def _lr(self, step):
        cfg = self.config
        return lr_schedule(step, cfg.total_steps, cfg.inner_lr, cfg.warmup_steps, cfg.min_lr, cfg.inner_lr_schedule)

    def _check_loss(self, loss, step, node):
        if not math.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
            raise DivergenceError(
                "Training diverged in round %d, step %d, node %d: loss=%s." % (self.round + 1, step + 1, node, loss)
            )

    def _node_loss_and_gradients(self, node, params, batch, step):
        cfg = self.config
        try:
            return self.model.loss_and_gradients(
                params, batch, node.train_mask, cfg.backward_mode, cfg.num_slices, node.slice_index, node.rng
            )
        except NumericalOverflowError as e:
            raise DivergenceError(
                "Training diverged in round %d, step %d, node %d: %s" % (self.round + 1, step + 1, node.node, e)
            ) from e

    def _local_steps(self, node, first, stop):
        """Inner steps [first, stop) of one node; returns (step, node, loss) tuples."""

        out = []
        for step in range(first, stop):
            batch = next_batch(node.view, self.config.node_batch_size, node.cursor)
            loss, grads = self._node_loss_and_gradients(node, node.params, batch, step)
            self._check_loss(loss, step, node.node)
            inner_step(node.params, grads, node.opt_state, self._lr(step))
            out.append((step, node.node, loss))
        return out

    def _ddp_gradients(self, node, step):
        batch = next_batch(node.view, self.config.node_batch_size, node.cursor)
        loss, grads = self._node_loss_and_gradients(node, self.params, batch, step)
        self._check_loss(loss, step, node.node)
        return loss, grads

    def _parallel(self, fn, *args):
        threads = self.config.threads or os.cpu_count() or 1
        if threads == 1 or len(self.nodes) == 1:
            return [fn(node, *args) for node in self.nodes]
        with ThreadPoolExecutor(max_workers=min(threads, len(self.nodes))) as pool:
            return list(pool.map(lambda node: fn(node, *args), self.nodes))

    def _step_row(self, step, node, loss, comm_s):
        return {
            "round": self.round + 1,
            "step": step + 1,
            "node": node,
            "loss": float(loss),
            "tokens": (step + 1) * self.config.num_nodes * self.tokens_per_batch,
            "sim_comm_s": comm_s,
            "sim_comp_s": self.step_compute_s,
        }

    def sync_group(self, g):
        """Reduce the deltas of group g, apply the outer step and reset every replica on the group."""

        gmask = self.group_masks[g]
        supports, deltas = [], []
        for node in self.nodes:
            support = node.train_mask & gmask
            supports.append(support)
            deltas.append({
                name: np.where(support[name], node.params[name] - self.params[name], 0.0) for name in support.names()
            })
        delta = simulated_all_reduce(deltas, self.counts, supports)
        outer_step(self.params, delta, self.outer_state, mask=gmask)
        for node in self.nodes:
            for name in gmask.names():
                node.params[name][gmask[name]] = self.params[name][gmask[name]]

    def _diloco_local_steps(self, node, first, stop):
        """Inner steps [first, stop) of a replica that trains every parameter."""

        out = []
        for step in range(first, stop):
            batch = next_batch(node.view, self.config.node_batch_size, node.cursor)
            loss, grads = self._node_loss_and_gradients(node, node.params, batch, step)
            self._check_loss(loss, step, node.node)
            dense_inner_step(node.params, grads, node.opt_state, self._lr(step))
            out.append((step, node.node, loss))
        return out

    def sync_group_diloco(self, g):
        """Average the replica deltas of group g over all K nodes, apply the outer step and reset replicas."""

        gmask = self.group_masks[g]
        delta = {}
        for name in gmask.names():
            total = np.zeros(self.space.shapes[name])
            for node in self.nodes:
                total += node.params[name] - self.params[name]
            delta[name] = total / self.config.num_nodes
        outer_step(self.params, delta, self.outer_state, mask=gmask)
        for node in self.nodes:
            for name in gmask.names():
                node.params[name][gmask[name]] = self.params[name][gmask[name]]

    def _run_lowcomm_round(self, local_steps=None, sync=None):
        cfg = self.config
        local_steps = local_steps or self._local_steps
        sync = sync or self.sync_group
        if cfg.reset_inner_state:
            for node in self.nodes:
                node.opt_state.reset()

        start, end = self.step, self.step + cfg.period
        rows, comm_total = [], 0.0
        current = start
        while current < end:
            stop = next((c for c in range(current + 1, end + 1) if self.schedule.groups_due(c)), end)
            results = self._parallel(local_steps, current, stop)
            due = self.schedule.groups_due(stop)
            for g in due:
                sync(g)
            comm_s = sum(self.group_comm_s[g] for g in due)
            comm_total += comm_s
            for step, node, loss in sorted(r for result in results for r in result):
                rows.append(self._step_row(step, node, loss, comm_s if step == stop - 1 else 0.0))
            current = stop
        wallclock = cfg.period * self.step_compute_s + comm_total
        return rows, comm_total, wallclock

    def _run_ddp_round(self):
        cfg = self.config
        rows = []
        for step in range(self.step, self.step + cfg.period):
            results = self._parallel(self._ddp_gradients, step)
            total = GradientBuffer(self.ddp_state.mask)
            for name in self.space.names:
                summed = np.zeros(self.space.shapes[name])
                for _, grads in results:
                    summed += grads[name]
                total[name] = summed / cfg.num_nodes
            inner_step(self.params, total, self.ddp_state, self._lr(step))
            for node, (loss, _) in zip(self.nodes, results):
                rows.append(self._step_row(step, node.node, loss, self.full_comm_s))
        wallclock = cfg.period * max(self.full_comm_s, self.step_compute_s)
        return rows, cfg.period * self.full_comm_s, wallclock

    def run_round(self):
        """Run one round and return its record."""

        if self.round >= self.config.rounds:
            raise ValueError("All %d rounds have already been run." % self.config.rounds)
        if self.config.algorithm == "ddp":
            rows, comm_s, wallclock = self._run_ddp_round()
        elif self.config.algorithm == "diloco":
            rows, comm_s, wallclock = self._run_lowcomm_round(self._diloco_local_steps, self.sync_group_diloco)
        else:
            rows, comm_s, wallclock = self._run_lowcomm_round()

        self.metrics.add_steps(rows)
        self.step += self.config.period
        self.round += 1
        self.tokens = self.step * self.config.num_nodes * self.tokens_per_batch
        self.sim_wallclock_s += wallclock

        eval_loss, eval_ppl = self.evaluate()
        record = {
            "round": self.round,
            "step": self.step,
            "train_loss": float(np.mean([row["loss"] for row in rows])),
            "eval_loss": eval_loss,
            "eval_perplexity": eval_ppl,
            "tokens": self.tokens,
            "sim_comm_s": comm_s,
            "sim_comp_s": self.config.period * self.step_compute_s,
            "sim_wallclock_s": self.sim_wallclock_s,
        }
        self.metrics.add_round(record)
        print("Round %d/%d | step %d | train loss %.4f | eval loss %.4f | perplexity %.3f | tokens %d" % (
            self.round, self.config.rounds, self.step, record["train_loss"], eval_loss, eval_ppl, self.tokens))
        return record

    def run(self, rounds=None):
        """Run the remaining rounds (or the next rounds rounds)."""

        remaining = self.config.rounds - self.round
        rounds = remaining if rounds is None else min(rounds, remaining)
        for _ in range(rounds):
            self.run_round()
        return self.metrics

    def evaluate(self):
        return evaluate(self.model, self.params, self.store, self.config.eval_batch_size)

    def replicas_identical(self):
        """True when every node replica equals the global parameters bitwise."""
        return all(np.array_equal(node.params[name], self.params[name]) for node in self.nodes for name in self.space.names)

    def save(self, path):
        """Write the full run state to a checkpoint."""

        arrays = {"global/" + name: value for name, value in self.params.items()}
        arrays.update({"outer/" + key: value for key, value in self.outer_state.state_arrays().items()})
        if self.ddp_state is not None:
            arrays.update({"ddp/" + key: value for key, value in self.ddp_state.state_arrays().items()})
        nodes = []
        for node in self.nodes:
            prefix = "node%d/" % node.node
            arrays.update({prefix + "param/" + name: value for name, value in node.params.items()})
            arrays.update({prefix + key: value for key, value in node.opt_state.state_arrays().items()})
            nodes.append({
                "node": node.node,
                "opt_step": node.opt_state.step,
                "epoch": node.cursor.epoch,
                "position": node.cursor.position,
                "rng": node.rng.bit_generator.state,
            })
        metadata = {
            "model": self.model_config.to_dict(),
            "run": self.config.to_dict(),
            "corpus": self.store.spec.to_dict(),
            "counters": {
                "round": self.round,
                "step": self.step,
                "tokens": self.tokens,
                "sim_wallclock_s": self.sim_wallclock_s,
                "ddp_opt_step": self.ddp_state.step if self.ddp_state is not None else 0,
            },
            "nodes": nodes,
            "metrics": {"steps": self.metrics.steps, "rounds": self.metrics.rounds},
        }
        checkpoint.save_checkpoint(path, metadata, arrays)

    @classmethod
    def load(cls, path, store, run_config=None):
        """Rebuild a Trainer from a checkpoint.

        run_config may change the fields in RESUMABLE_FIELDS (extend the number
        of rounds, change the thread count); any other difference from the
        saved run, or a corpus that differs from the saved one, is rejected."""

        metadata, arrays = checkpoint.load_checkpoint(path)
        model_config = ModelConfig(**metadata["model"])
        saved = RunConfig(**metadata["run"])
        if run_config is not None:
            requested = RunConfig(**run_config.to_dict()).validate().to_dict()
            for name, value in saved.to_dict().items():
                if name in RESUMABLE_FIELDS:
                    setattr(saved, name, requested[name])
                elif requested[name] != value:
                    raise ConfigurationError(
                        "Rule 'resumed run matches the checkpoint' violated: run.%s=%r, checkpoint has %r."
                        % (name, requested[name], value)
                    )
        corpus = store.spec.to_dict()
        for name, value in metadata["corpus"].items():
            if corpus.get(name) != value:
                raise ConfigurationError(
                    "Rule 'resumed corpus matches the checkpoint' violated: corpus.%s=%r, checkpoint has %r."
                    % (name, corpus.get(name), value)
                )
        trainer = cls(model_config, saved, store)

        def restore(target, prefix):
            for name in trainer.space.names:
                key = prefix + name
                if key not in arrays:
                    raise ContractError("Checkpoint is missing %s." % key)
                target[name] = arrays[key].reshape(trainer.space.shapes[name]).copy()

        restore(trainer.params, "global/")
        trainer.outer_state.load_state_arrays({k[len("outer/"):]: v for k, v in arrays.items() if k.startswith("outer/")})
        counters = metadata["counters"]
        if trainer.ddp_state is not None:
            trainer.ddp_state.load_state_arrays(
                {k[len("ddp/"):]: v for k, v in arrays.items() if k.startswith("ddp/")}, counters["ddp_opt_step"]
            )
        for node, saved_node in zip(trainer.nodes, metadata["nodes"]):
            prefix = "node%d/" % node.node
            restore(node.params, prefix + "param/")
            node.opt_state.load_state_arrays(
                {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix) and not k.startswith(prefix + "param/")},
                saved_node["opt_step"],
            )
            node.cursor = ShardCursor(saved_node["epoch"], saved_node["position"])
            node.rng.bit_generator.state = saved_node["rng"]

        trainer.round = counters["round"]
        trainer.step = counters["step"]
        trainer.tokens = counters["tokens"]
        trainer.sim_wallclock_s = counters["sim_wallclock_s"]
        trainer.metrics = RunMetrics(metadata["metrics"]["steps"], metadata["metrics"]["rounds"])
        return trainer


def run_ddp_baseline(model_config, run_config, store):
    """Train with per-step gradient averaging; returns RunMetrics."""

    config = RunConfig(**{**run_config.to_dict(), "algorithm": "ddp", "num_slices": 1, "sync_grouping": "all-at-once"})
    trainer = Trainer(model_config, config, store)
    return trainer.run()
