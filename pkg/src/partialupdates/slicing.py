"""Implement the slice assignment and the synchronization schedule.

Used in the partialupdates project to decide which parameters every node
trains, how many nodes train each parameter (the count vector) and in which
groups parameters are synchronized during a round.

Classes:
--------
SliceBlock - a trainable row or column range of one parameter.
SlicePlan - per-node trainable index sets and the count vector.
SyncSchedule - parameter groups and the step offsets at which they sync.
"""

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from partialupdates.errors import ConfigurationError, ContractError
from partialupdates.model import ParamMask, ParamSpace

STRATEGIES = ("mlp-only", "mlp-and-heads", "mlp-heads-and-wo", "by-layers")
EXPERIMENT_STRATEGIES = ("mlp-heads-and-wo", "by-layers")
GROUPINGS = ("all-at-once", "by-layers", "by-slices")


@dataclass(frozen=True)
class SliceBlock:

    """Rows (axis 0), columns (axis 1) or the whole (axis None) of a parameter."""

    name: str
    axis: int = None
    start: int = 0
    stop: int = None

    def apply(self, mask):
        mask.select(self.name, self.axis, self.start, self.stop)
        return mask

    def numel(self, space):
        shape = space.shapes[self.name]
        if self.axis is None:
            return space.numel(self.name)
        other = int(np.prod([s for i, s in enumerate(shape) if i != self.axis], dtype=np.int64))
        return (self.stop - self.start) * other

    def to_dict(self):
        return asdict(self)


def head_group(n, num_heads, num_slices):
    """Heads trained by slice n: {n*(h/N), ..., (n+1)*(h/N) - 1}."""
    per_slice = num_heads // num_slices
    return list(range(n * per_slice, (n + 1) * per_slice))


def blocks_to_mask(blocks, space):
    mask = ParamMask.empty(space)
    for block in blocks:
        block.apply(mask)
    return mask


class SlicePlan:

    """Per-node trainable index sets.

    Node k trains slice n = k mod N. Parameters outside the sliced blocks
    (embeddings, norms and the attention matrices that the strategy leaves
    whole) are trained on every node.

    Parameters
    -----------
    model_config: ModelConfig
    num_nodes: number of nodes K
    num_slices: number of slices N; K must be a multiple of N
    strategy: one of STRATEGIES

    Public methods:
    ---------------
    slice_index(self, k): Slice trained by node k.

    trainable_blocks(self, k): SliceBlocks node k trains.

    train_mask(self, k) / frozen_mask(self, k): Index sets of node k.

    count_vector(self): Number of nodes training each scalar, from indicators.

    closed_form_counts(self): K/N on sliced parameters, K elsewhere.

    trainable_count(self): Scalars trained per node, without allocating masks.

    to_json(self): Node to trainable block description.
    """

    def __init__(self, model_config, num_nodes, num_slices, strategy="mlp-only"):
        """Initialise variables."""

        if strategy not in STRATEGIES:
            raise ConfigurationError("Choose a valid slicing strategy: %s" % list(STRATEGIES))
        if num_nodes < 1:
            raise ConfigurationError("Rule 'K is at least 1' violated: K=%d." % num_nodes)
        if num_slices < 1:
            raise ConfigurationError("Rule 'N is at least 1' violated: N=%d." % num_slices)
        if num_nodes % num_slices != 0:
            raise ConfigurationError("Rule 'K is a multiple of N' violated: K=%d, N=%d." % (num_nodes, num_slices))

        model_config.validate()
        if strategy == "by-layers":
            if model_config.num_layers % num_slices != 0:
                raise ConfigurationError(
                    "Rule 'L is divisible by N' violated: L=%d, N=%d." % (model_config.num_layers, num_slices)
                )
        else:
            model_config.check_slices(num_slices, heads=strategy != "mlp-only")

        self.model_config = model_config
        self.num_nodes = num_nodes
        self.num_slices = num_slices
        self.strategy = strategy
        self.space = ParamSpace(model_config)
        self._masks = {}

    def slice_index(self, k):
        if not 0 <= k < self.num_nodes:
            raise IndexError("Node %d outside [0, %d)." % (k, self.num_nodes))
        return k % self.num_slices

    def sliced_names(self):
        """Parameters that are split between slices."""

        if self.num_slices == 1:
            return []
        cfg = self.model_config
        matrices = ["mlp.w", "mlp.v"]
        if self.strategy in ("mlp-and-heads", "mlp-heads-and-wo"):
            matrices += ["attn.wq", "attn.wk", "attn.wv"]
        if self.strategy == "mlp-heads-and-wo":
            matrices.append("attn.wo")
        return ["layers.%d.%s" % (layer, matrix) for layer in range(cfg.num_layers) for matrix in matrices]

    def _slice_blocks(self, n):
        cfg = self.model_config
        N = self.num_slices

        if self.strategy == "by-layers":
            band = cfg.num_layers // N
            blocks = []
            for layer in range(n * band, (n + 1) * band):
                blocks += [SliceBlock("layers.%d.mlp.w" % layer), SliceBlock("layers.%d.mlp.v" % layer)]
            return blocks

        width = cfg.ffn_dim // N
        cols = (n * width, (n + 1) * width)
        heads = head_group(n, cfg.num_heads, N)
        head_cols = (heads[0] * cfg.head_dim, (heads[-1] + 1) * cfg.head_dim)

        blocks = []
        for layer in range(cfg.num_layers):
            p = "layers.%d." % layer
            blocks += [SliceBlock(p + "mlp.w", 0, *cols), SliceBlock(p + "mlp.v", 1, *cols)]
            if self.strategy in ("mlp-and-heads", "mlp-heads-and-wo"):
                blocks += [SliceBlock(p + "attn." + m, 1, *head_cols) for m in ("wq", "wk", "wv")]
            if self.strategy == "mlp-heads-and-wo":
                blocks.append(SliceBlock(p + "attn.wo", 0, *head_cols))
        return blocks

    def trainable_blocks(self, k):
        """SliceBlocks trained by node k, whole parameters first."""

        n = self.slice_index(k)
        sliced = set(self.sliced_names())
        shared = [SliceBlock(name) for name in self.space.names if name not in sliced]
        if self.num_slices == 1:
            return shared
        return shared + self._slice_blocks(n)

    def train_mask(self, k):
        n = self.slice_index(k)
        if n not in self._masks:
            self._masks[n] = blocks_to_mask(self.trainable_blocks(k), self.space)
        return self._masks[n].copy()

    def frozen_mask(self, k):
        return ~self.train_mask(k)

    def count_vector(self):
        """m[i] = number of nodes whose trainable set contains i."""

        counts = {name: np.zeros(shape, dtype=np.int64) for name, shape in self.space.shapes.items()}
        for k in range(self.num_nodes):
            mask = self.train_mask(k)
            for name in self.space.names:
                counts[name] += mask[name]
        return counts

    def closed_form_counts(self):
        sliced = set(self.sliced_names())
        per_slice = self.num_nodes // self.num_slices
        return {
            name: np.full(shape, per_slice if name in sliced else self.num_nodes, dtype=np.int64)
            for name, shape in self.space.shapes.items()
        }

    def trainable_count(self):
        """|I_k^train|, identical for every node."""
        return int(sum(block.numel(self.space) for block in self.trainable_blocks(0)))

    def check_partition(self):
        """Check that train/frozen sets partition the space and every scalar is trained somewhere."""

        covered = ParamMask.empty(self.space)
        for k in range(self.num_nodes):
            train, frozen = self.train_mask(k), self.frozen_mask(k)
            if not train.isdisjoint(frozen) or (train | frozen).count() != self.space.size:
                raise ContractError("Trainable and frozen sets of node %d do not partition the parameter space." % k)
            covered = covered | train
        if covered.count() != self.space.size:
            raise ContractError("%d parameters are not trained by any node." % (self.space.size - covered.count()))

    def describe(self):
        return {
            "num_nodes": self.num_nodes,
            "num_slices": self.num_slices,
            "strategy": self.strategy,
            "trainable_count": self.trainable_count(),
            "nodes": {
                str(k): {"slice": self.slice_index(k), "blocks": [b.to_dict() for b in self.trainable_blocks(k)]}
                for k in range(self.num_nodes)
            },
        }

    def to_json(self):
        return json.dumps(self.describe(), sort_keys=True, indent=2)


def build_slice_plan(model_config, num_nodes, num_slices, strategy="mlp-only"):
    plan = SlicePlan(model_config, num_nodes, num_slices, strategy)
    if strategy in EXPERIMENT_STRATEGIES and num_slices > 1:
        warn_message = "Slicing strategy %s is experimental and known to degrade or diverge." % strategy
        print(warn_message)
        warnings.warn(warn_message, category=UserWarning)
    return plan


def trainable_fraction(plan):
    """Return (rho_mlp, rho_attn, trainable parameter count) of a plan."""

    rho = 1.0 / plan.num_slices
    rho_attn = rho if plan.strategy in ("mlp-and-heads", "mlp-heads-and-wo") else 1.0
    return rho, rho_attn, plan.trainable_count()


class SyncSchedule:

    """Parameter groups synchronized at staggered offsets of an H-step window.

    A group with offset o is synchronized after local step c (counted from 1
    over the whole run) whenever c mod H == o mod H, so offset 0 syncs at the
    end of each window.

    Parameters
    -----------
    model_config: ModelConfig
    grouping: one of GROUPINGS
    period: sync period H in local steps
    layer_group_size: layers per group for by-layers
    num_slices: MLP slices for by-slices
    stagger: spread group offsets uniformly; False syncs every group at the window end

    Public methods:
    ---------------
    groups_due(self, step): Groups synchronized after completed step count step.

    group_mask(self, g): Index set of group g.

    check_partition(self): Groups partition the parameter space.
    """

    def __init__(self, model_config, grouping="all-at-once", period=1, layer_group_size=3, num_slices=1, stagger=True):
        """Initialise variables."""

        if grouping not in GROUPINGS:
            raise ConfigurationError("Choose a valid sync grouping: %s" % list(GROUPINGS))
        if period < 1:
            raise ConfigurationError("Rule 'H is at least 1' violated: H=%d." % period)

        self.model_config = model_config.validate()
        self.grouping = grouping
        self.period = period
        self.layer_group_size = layer_group_size
        self.num_slices = num_slices
        self.stagger = stagger
        self.space = ParamSpace(model_config)
        self.labels, self.groups = self._build_groups()
        G = len(self.groups)
        self.offsets = [(g * period) // G if stagger else 0 for g in range(G)]

    def _build_groups(self):
        cfg = self.model_config
        space = self.space

        if self.grouping == "all-at-once":
            return ["all"], [[SliceBlock(name) for name in space.names]]

        if self.grouping == "by-layers":
            size = self.layer_group_size
            if size < 1 or cfg.num_layers % size != 0:
                raise ConfigurationError(
                    "Rule 'L is divisible by the layer group size' violated: L=%d, group size=%d." % (cfg.num_layers, size)
                )
            labels, groups = [], []
            for first in range(0, cfg.num_layers, size):
                labels.append("layers %d-%d" % (first, first + size - 1))
                groups.append([SliceBlock(name) for layer in range(first, first + size) for name in space.layer_names(layer)])
            labels.append("embeddings and final norm")
            groups.append([SliceBlock(name) for name in ("tok_emb", "pos_emb", "ln_f.gain", "ln_f.bias")])
            return labels, groups

        N = self.num_slices
        cfg.check_slices(N)
        width = cfg.ffn_dim // N
        labels, groups = [], []
        for n in range(N):
            labels.append("mlp slice %d" % n)
            group = []
            for layer in range(cfg.num_layers):
                p = "layers.%d." % layer
                group += [SliceBlock(p + "mlp.w", 0, n * width, (n + 1) * width), SliceBlock(p + "mlp.v", 1, n * width, (n + 1) * width)]
            groups.append(group)
        labels.append("embeddings")
        groups.append([SliceBlock("tok_emb"), SliceBlock("pos_emb")])
        labels.append("attention and norms")
        groups.append([SliceBlock(name) for name in space.names if ".attn." in name or ".ln" in name or name.startswith("ln_f")])
        return labels, groups

    @property
    def num_groups(self):
        return len(self.groups)

    def group_mask(self, g):
        return blocks_to_mask(self.groups[g], self.space)

    def group_numel(self, g):
        return int(sum(block.numel(self.space) for block in self.groups[g]))

    def groups_due(self, step):
        """Groups synchronized right after the step-th local step (step >= 1)."""

        if step < 1:
            return []
        return [g for g, offset in enumerate(self.offsets) if step % self.period == offset % self.period]

    def check_partition(self):
        covered = ParamMask.empty(self.space)
        for g in range(self.num_groups):
            mask = self.group_mask(g)
            if not covered.isdisjoint(mask):
                raise ContractError("Sync group %s overlaps an earlier group." % self.labels[g])
            covered = covered | mask
        if covered.count() != self.space.size:
            raise ContractError("Sync groups leave %d parameters unsynchronized." % (self.space.size - covered.count()))

    def describe(self):
        return {
            "grouping": self.grouping,
            "period": self.period,
            "stagger": self.stagger,
            "groups": [
                {"label": label, "offset": offset, "blocks": [b.to_dict() for b in blocks]}
                for label, offset, blocks in zip(self.labels, self.offsets, self.groups)
            ],
        }

    def to_json(self):
        return json.dumps(self.describe(), sort_keys=True, indent=2)


def build_sync_schedule(model_config, grouping, period, layer_group_size=3, num_slices=1, stagger=True):
    schedule = SyncSchedule(model_config, grouping, period, layer_group_size, num_slices, stagger)
    if grouping != "all-at-once" and schedule.num_groups > period and stagger:
        warn_message = "Sync period H=%d is shorter than the %d groups; some groups share an offset." % (
            period, schedule.num_groups)
        print(warn_message)
        warnings.warn(warn_message, category=UserWarning)
    return schedule
