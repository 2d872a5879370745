import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from partialupdates.errors import CheckpointError, ConfigurationError

GENERATORS = ("order-2-markov", "copy-task", "random-uniform")


@dataclass
class SyntheticCorpusSpec:
    """Recipe of a synthetic token corpus.

    Sequences hold exactly seq_len tokens, so a model configured with
    S = seq_len - 1 sees every input position once.
    """

    vocab_size: int = 64
    seq_len: int = 33
    generator: str = "order-2-markov"
    seed: int = 0
    num_sequences: int = 2048
    eval_sequences: int = 64
    concentration: float = 0.1

    def validate(self):
        if self.generator not in GENERATORS:
            raise ConfigurationError("Choose a valid corpus generator: %s" % list(GENERATORS))
        for name in ("vocab_size", "num_sequences"):
            if getattr(self, name) < 1:
                raise ConfigurationError("Rule '%s is at least 1' violated: %s=%s." % (name, name, getattr(self, name)))
        if self.seq_len < 3:
            raise ConfigurationError("Rule 'seq_len is at least 3' violated: seq_len=%d." % self.seq_len)
        if self.eval_sequences < 0:
            raise ConfigurationError("Rule 'eval_sequences is not negative' violated: eval_sequences=%d." % self.eval_sequences)
        if self.generator == "copy-task" and self.seq_len % 2 != 0:
            raise ConfigurationError("Rule 'copy-task seq_len is even' violated: seq_len=%d." % self.seq_len)
        if self.concentration <= 0:
            raise ConfigurationError("Rule 'concentration is positive' violated: concentration=%s." % self.concentration)
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TokenBatch:
    """A batch of sequences; targets are the inputs shifted by one position."""

    tokens: np.ndarray

    @property
    def inputs(self):
        return self.tokens[:, :-1]

    @property
    def targets(self):
        return self.tokens[:, 1:]

    @property
    def num_tokens(self):
        """Number of predicted positions."""
        return int(self.targets.size)


@dataclass(frozen=True)
class SequenceStore:
    """Generated training and held-out sequences. Arrays are read-only."""

    train: np.ndarray
    eval: np.ndarray
    spec: SyntheticCorpusSpec
    transition: np.ndarray = None


@dataclass
class ShardCursor:
    """Position of a node inside its shard."""

    epoch: int = 0
    position: int = 0


@dataclass(frozen=True)
class ShardView:
    """Contiguous, equally sized block of the training sequences owned by node k of K."""

    tokens: np.ndarray
    node: int
    num_nodes: int
    seed: int

    def __len__(self):
        return self.tokens.shape[0]

    def epoch_order(self, epoch):
        rng = np.random.default_rng([self.seed, self.num_nodes, self.node, epoch])
        return rng.permutation(len(self))


def transition_tensor(spec):
    """Order-2 transition tensor P[a, b, c] = p(c | a, b) drawn from a symmetric Dirichlet."""

    rng = np.random.default_rng([spec.seed, 0])
    V = spec.vocab_size
    return rng.dirichlet(np.full(V, spec.concentration), size=(V, V))


def _sample_markov(transition, num_sequences, seq_len, rng):
    V = transition.shape[0]
    cdf = np.cumsum(transition, axis=-1)
    tokens = np.empty((num_sequences, seq_len), dtype=np.int64)
    tokens[:, :2] = rng.integers(V, size=(num_sequences, 2))
    for t in range(2, seq_len):
        u = rng.random(num_sequences)
        rows = cdf[tokens[:, t - 2], tokens[:, t - 1]]
        tokens[:, t] = np.minimum((rows < u[:, None]).sum(axis=1), V - 1)
    return tokens


def _sample(spec, num_sequences, rng, transition):
    V, S = spec.vocab_size, spec.seq_len
    if spec.generator == "order-2-markov":
        return _sample_markov(transition, num_sequences, S, rng)
    if spec.generator == "copy-task":
        half = rng.integers(V, size=(num_sequences, S // 2))
        return np.concatenate([half, half], axis=1)
    return rng.integers(V, size=(num_sequences, S))


def generate_corpus(spec):
    """Generate the training and held-out sequences of a corpus.

    Args:
        spec (SyntheticCorpusSpec): Corpus recipe. The same spec always yields the same store.

    Returns:
        SequenceStore: Read-only train and eval token arrays.
    """
    spec.validate()
    transition = transition_tensor(spec) if spec.generator == "order-2-markov" else None
    train = _sample(spec, spec.num_sequences, np.random.default_rng([spec.seed, 1]), transition)
    held_out = _sample(spec, spec.eval_sequences, np.random.default_rng([spec.seed, 2]), transition)
    for array in (train, held_out):
        array.setflags(write=False)
    return SequenceStore(train=train, eval=held_out, spec=spec, transition=transition)


def shard(store, num_nodes, node, seed=None):
    """Contiguous block of the training sequences for node k; the remainder is dropped.

    Args:
        store (SequenceStore): Corpus to split.
        num_nodes (int): Number of nodes K.
        node (int): Node index k in [0, K).
        seed (int, optional): Seed of the per-epoch shuffles. Defaults to the corpus seed.
    """
    if not 0 <= node < num_nodes:
        raise IndexError("Node %d outside [0, %d)." % (node, num_nodes))
    per_node = store.train.shape[0] // num_nodes
    if per_node == 0:
        raise ConfigurationError(
            "Rule 'every shard holds a sequence' violated: %d sequences, K=%d." % (store.train.shape[0], num_nodes)
        )
    seed = store.spec.seed if seed is None else seed
    return ShardView(tokens=store.train[node * per_node: (node + 1) * per_node], node=node, num_nodes=num_nodes, seed=seed)


def next_batch(view, batch_size, cursor):
    """Next batch of a shard, advancing cursor in place.

    Sequences are visited in a seeded per-epoch permutation; a partial batch at
    the end of an epoch is skipped and the next epoch starts.
    """
    if not 1 <= batch_size <= len(view):
        raise ConfigurationError(
            "Rule 'batch size fits in a shard' violated: batch size=%d, shard size=%d." % (batch_size, len(view))
        )
    if cursor.position + batch_size > len(view):
        cursor.epoch += 1
        cursor.position = 0
    order = view.epoch_order(cursor.epoch)
    indices = order[cursor.position: cursor.position + batch_size]
    cursor.position += batch_size
    return TokenBatch(tokens=view.tokens[indices])


def eval_batches(store, batch_size):
    """Held-out sequences in fixed order, in batches of at most batch_size."""
    for start in range(0, store.eval.shape[0], batch_size):
        yield TokenBatch(tokens=store.eval[start: start + batch_size])


def bigram_counts(tokens, vocab_size):
    """Counts of consecutive token pairs; shape=(V, V)."""
    counts = np.zeros((vocab_size, vocab_size), dtype=np.int64)
    np.add.at(counts, (tokens[:, :-1].ravel(), tokens[:, 1:].ravel()), 1)
    return counts


def trigram_counts(tokens, vocab_size):
    """Counts of next tokens per two-token context; shape=(V, V, V)."""
    counts = np.zeros((vocab_size,) * 3, dtype=np.int64)
    np.add.at(counts, (tokens[:, :-2].ravel(), tokens[:, 1:-1].ravel(), tokens[:, 2:].ravel()), 1)
    return counts


def markov_nll(tokens, transition):
    """Mean negative log-likelihood of the sampled positions under the true transition tensor."""
    probs = transition[tokens[:, :-2], tokens[:, 1:-1], tokens[:, 2:]]
    return float(-np.log(probs).mean())


def true_conditional_entropy(store):
    """Held-out NLL of the generating order-2 model, a floor for any learned model."""
    if store.transition is None:
        raise ConfigurationError("Only order-2-markov corpora have a transition tensor.")
    return markov_nll(store.eval, store.transition)


def context_chisquare(store, min_count=200):
    """Chi-square test of the most frequent context's next-token counts against the transition row.

    Returns:
        tuple: (context, scipy chi-square result). Categories with an expected count below 5 are pooled.
    """
    counts = trigram_counts(store.train, store.spec.vocab_size)
    totals = counts.sum(axis=-1)
    a, b = np.unravel_index(int(np.argmax(totals)), totals.shape)
    n = int(totals[a, b])
    if n < min_count:
        raise ValueError("Most frequent context has only %d samples; generate more sequences." % n)

    expected = store.transition[a, b] * n
    observed = counts[a, b].astype(np.float64)
    keep = expected >= 5
    pooled_expected = np.append(expected[keep], expected[~keep].sum())
    pooled_observed = np.append(observed[keep], observed[~keep].sum())
    if pooled_expected[-1] == 0:
        pooled_expected, pooled_observed = pooled_expected[:-1], pooled_observed[:-1]
    return (int(a), int(b)), stats.chisquare(pooled_observed, pooled_expected)


_HEADER = np.dtype("<u4")
_BODY = np.dtype("<i4")


def save_corpus(path, tokens, vocab_size):
    """Write sequences as a flat binary file: '<u4' V, S, count, then '<i4' tokens row by row."""
    tokens = np.asarray(tokens)
    header = np.array([vocab_size, tokens.shape[1], tokens.shape[0]], dtype=_HEADER)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(tokens.astype(_BODY).tobytes())


def load_corpus(path):
    """Read a file written by save_corpus.

    Returns:
        tuple: (tokens with shape (count, S), vocab size V)
    """
    if not os.path.exists(path):
        raise FileNotFoundError("File %s not found." % path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 3 * _HEADER.itemsize:
        raise CheckpointError("Corpus file %s is truncated: missing header." % path)
    vocab_size, seq_len, count = (int(x) for x in np.frombuffer(raw[: 3 * _HEADER.itemsize], dtype=_HEADER))
    body = raw[3 * _HEADER.itemsize:]
    if len(body) != seq_len * count * _BODY.itemsize:
        raise CheckpointError(
            "Corpus file %s is truncated: expected %d tokens, found %d bytes." % (path, seq_len * count, len(body))
        )
    tokens = np.frombuffer(body, dtype=_BODY).astype(np.int64).reshape(count, seq_len)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise CheckpointError("Corpus file %s holds token ids outside [0, %d)." % (path, vocab_size))
    return tokens, vocab_size
