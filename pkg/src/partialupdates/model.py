"""Implement the sliced transformer.

Used in the partialupdates project to run the forward pass and the partial
backward pass of a small decoder-only transformer. Parameter gradients are
only formed for a trainable index set, while the gradient with respect to
every layer input always flows through all slices and heads unless one of the
detach modes is requested.

Classes:
--------
ModelConfig - dimensions of the transformer.
ParamSpace - dense enumeration of every scalar parameter.
ParamMask - index set over the parameter space.
GradientBuffer - gradients restricted to an index set.
Transformer - forward pass, loss and partial backward pass.
"""

import bisect
import copy
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from partialupdates.errors import ConfigurationError, ContractError, NumericalOverflowError

BACKWARD_MODES = ("full-jacobian", "detach-all-but-k", "detach-k-plus-random")
POSITIONAL_ENCODINGS = ("learned-absolute",)

# Matrices that receive decoupled weight decay
DECAYED_MATRICES = ("wq", "wk", "wv", "wo", "w", "v")


@dataclass
class ModelConfig:

    """Dimensions of the transformer.

    Parameters
    -----------
    num_layers: number of transformer layers L
    hidden_dim: model width d
    num_heads: number of attention heads h
    head_dim: per-head width d_h; d == h * d_h
    ffn_dim: hidden width of the MLP D_ff (default 4d)
    vocab_size: vocabulary size V
    seq_len: maximum sequence length S
    positional_encoding: only learned-absolute embeddings are available
    layernorm_eps: epsilon inside every layer normalisation
    """

    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = None
    vocab_size: int = 64
    seq_len: int = 33
    positional_encoding: str = "learned-absolute"
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim

    @property
    def attn_dim(self):
        return self.num_heads * self.head_dim

    def validate(self):
        """Check dimensions and return self."""

        dims = {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
        }
        for name, value in dims.items():
            if int(value) != value or value < 1:
                raise ConfigurationError("Rule 'all dimensions are at least 1' violated: %s=%s." % (name, value))
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigurationError(
                "Rule 'd == h * d_h' violated: d=%d, h=%d, d_h=%d." % (self.hidden_dim, self.num_heads, self.head_dim)
            )
        if self.positional_encoding not in POSITIONAL_ENCODINGS:
            raise ConfigurationError("Choose a valid positional encoding: %s" % list(POSITIONAL_ENCODINGS))
        return self

    def check_slices(self, num_slices, heads=False):
        """Check that MLPs (and optionally heads) split evenly into num_slices."""

        if num_slices < 1:
            raise ConfigurationError("Rule 'N is at least 1' violated: N=%d." % num_slices)
        if self.ffn_dim % num_slices != 0:
            raise ConfigurationError("Rule 'D_ff is divisible by N' violated: D_ff=%d, N=%d." % (self.ffn_dim, num_slices))
        if heads and self.num_heads % num_slices != 0:
            raise ConfigurationError("Rule 'h is divisible by N' violated: h=%d, N=%d." % (self.num_heads, num_slices))

    def to_dict(self):
        return asdict(self)


class ParamSpace:

    """Dense enumeration of every scalar parameter.

    Parameters are addressed by name (``layers.<l>.<block>.<matrix>``) and an
    index inside the tensor; ``param_id`` flattens both into one integer and
    ``locate`` inverts it. Only shapes are stored, so full-size spaces can be
    counted without allocating tensors.

    Public methods:
    ---------------
    numel(self, name): Number of scalars in one parameter.

    param_id(self, name, index): Flat id of one scalar.

    locate(self, pid): Name and index of a flat id.

    describe(self, name): Layer, block and matrix of a parameter.

    layer_names(self, layer): Names of the parameters of one layer.

    zeros(self): Zero tensors for every parameter.
    """

    def __init__(self, config):
        """Initialise variables."""

        self.config = config
        d, V, S = config.hidden_dim, config.vocab_size, config.seq_len
        hd, ff = config.attn_dim, config.ffn_dim

        shapes = {"tok_emb": (V, d), "pos_emb": (S, d)}
        for layer in range(config.num_layers):
            prefix = "layers.%d." % layer
            shapes[prefix + "ln1.gain"] = (d,)
            shapes[prefix + "ln1.bias"] = (d,)
            shapes[prefix + "attn.wq"] = (d, hd)
            shapes[prefix + "attn.wk"] = (d, hd)
            shapes[prefix + "attn.wv"] = (d, hd)
            shapes[prefix + "attn.wo"] = (hd, d)
            shapes[prefix + "ln2.gain"] = (d,)
            shapes[prefix + "ln2.bias"] = (d,)
            shapes[prefix + "mlp.w"] = (ff, d)
            shapes[prefix + "mlp.v"] = (d, ff)
        shapes["ln_f.gain"] = (d,)
        shapes["ln_f.bias"] = (d,)

        self.shapes = shapes
        self.names = list(shapes)
        self.offsets = []
        total = 0
        for name in self.names:
            self.offsets.append(total)
            total += self.numel(name)
        self.size = total

    def __eq__(self, other):
        return isinstance(other, ParamSpace) and self.shapes == other.shapes

    def numel(self, name):
        return int(np.prod(self.shapes[name], dtype=np.int64))

    def param_id(self, name, index):
        """Flat id of the scalar at index inside parameter name."""

        offset = self.offsets[self.names.index(name)]
        return offset + int(np.ravel_multi_index(tuple(np.atleast_1d(index)), self.shapes[name]))

    def locate(self, pid):
        """Return (name, index) for a flat parameter id."""

        if not 0 <= pid < self.size:
            raise IndexError("Parameter id %d outside [0, %d)." % (pid, self.size))
        position = bisect.bisect_right(self.offsets, pid) - 1
        name = self.names[position]
        index = np.unravel_index(pid - self.offsets[position], self.shapes[name])
        return name, tuple(int(i) for i in index)

    def describe(self, name):
        """Return the structured coordinates of a parameter."""

        parts = name.split(".")
        if parts[0] == "layers":
            block = parts[2]
            return {"layer": int(parts[1]), "block": "norm" if block.startswith("ln") else block, "matrix": parts[3]}
        if parts[0] == "ln_f":
            return {"layer": None, "block": "norm", "matrix": parts[1]}
        return {"layer": None, "block": "embedding", "matrix": parts[0]}

    def layer_names(self, layer):
        prefix = "layers.%d." % layer
        return [name for name in self.names if name.startswith(prefix)]

    def zeros(self):
        return {name: np.zeros(shape) for name, shape in self.shapes.items()}


class ParamMask:

    """Index set over a parameter space, stored as one boolean mask per parameter.

    Public methods:
    ---------------
    full(space) / empty(space): Whole space or nothing.

    select(self, name, axis=None, start=0, stop=None): Add a row/column range.

    names(self): Parameters with at least one selected entry.

    count(self): Number of selected scalars.

    isdisjoint(self, other): True if no scalar is selected by both.
    """

    def __init__(self, space, masks=None):
        """Initialise variables."""

        self.space = space
        if masks is None:
            masks = {name: np.zeros(shape, dtype=bool) for name, shape in space.shapes.items()}
        self.masks = masks

    @classmethod
    def full(cls, space):
        return cls(space, {name: np.ones(shape, dtype=bool) for name, shape in space.shapes.items()})

    @classmethod
    def empty(cls, space):
        return cls(space)

    def select(self, name, axis=None, start=0, stop=None):
        """Mark the whole parameter, or rows (axis 0) / columns (axis 1) [start, stop)."""

        mask = self.masks[name]
        if axis is None:
            mask[...] = True
        elif axis == 0:
            mask[start:stop] = True
        else:
            mask[:, start:stop] = True
        return self

    def __getitem__(self, name):
        return self.masks[name]

    def any(self, name):
        return bool(self.masks[name].any())

    def names(self):
        return [name for name in self.space.names if self.masks[name].any()]

    def count(self):
        return int(sum(mask.sum() for mask in self.masks.values()))

    def copy(self):
        return ParamMask(self.space, {name: mask.copy() for name, mask in self.masks.items()})

    def _combine(self, other, op):
        if self.space != other.space:
            raise ContractError("Index sets belong to different parameter spaces.")
        return ParamMask(self.space, {name: op(self.masks[name], other.masks[name]) for name in self.space.names})

    def __or__(self, other):
        return self._combine(other, np.logical_or)

    def __and__(self, other):
        return self._combine(other, np.logical_and)

    def __sub__(self, other):
        return self._combine(other, lambda a, b: a & ~b)

    def __invert__(self):
        return ParamMask(self.space, {name: ~mask for name, mask in self.masks.items()})

    def __eq__(self, other):
        if not isinstance(other, ParamMask) or self.space != other.space:
            return False
        return all(np.array_equal(self.masks[name], other.masks[name]) for name in self.space.names)

    __hash__ = None

    def isdisjoint(self, other):
        return (self & other).count() == 0


class GradientBuffer:

    """Gradients restricted to a coverage index set.

    Blocks are only stored for parameters that the coverage touches, and every
    entry outside the coverage reads as an exact zero.
    """

    def __init__(self, coverage):
        """Initialise variables."""

        self.coverage = coverage
        self.blocks = {}

    def __setitem__(self, name, grad):
        mask = self.coverage[name]
        if not mask.any():
            raise ContractError("Parameter %s is not in the gradient coverage." % name)
        self.blocks[name] = np.where(mask, grad, 0.0)

    def __getitem__(self, name):
        if name in self.blocks:
            return self.blocks[name]
        return np.zeros(self.coverage.space.shapes[name])

    def __contains__(self, name):
        return name in self.blocks

    def names(self):
        return list(self.blocks)

    def entries(self, name):
        """Gradient values at the covered indices of one parameter."""
        return self[name][self.coverage[name]]

    def num_entries(self):
        return int(sum(self.coverage[name].sum() for name in self.blocks))


def cross_entropy_loss(logits, targets):
    """Mean next-token negative log-likelihood and its gradient.

    Parameters
    ----------
    logits: Array with unnormalised scores; shape=(B, T, V)
    targets: Integer array of next-token ids; shape=(B, T)"""

    if logits.shape[:-1] != targets.shape:
        raise ConfigurationError("Logits shape %s does not match targets shape %s." % (logits.shape, targets.shape))

    log_probs = special.log_softmax(logits, axis=-1)
    count = targets.size
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = -picked.sum() / count

    dlogits = np.exp(log_probs)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits /= count
    return float(loss), dlogits


def split_mlp(w, v, num_slices):
    """Split W row-wise and V column-wise into num_slices blocks."""

    if w.shape[0] % num_slices != 0:
        raise ConfigurationError("Rule 'D_ff is divisible by N' violated: D_ff=%d, N=%d." % (w.shape[0], num_slices))
    return np.split(w, num_slices, axis=0), np.split(v, num_slices, axis=1)


def mlp_forward_sliced(w_blocks, v_blocks, x):
    """Sum over slices of V_n ReLU(W_n x).

    Parameters
    ----------
    w_blocks: list of up-projection row blocks; shape=(r_n, d) each
    v_blocks: list of down-projection column blocks; shape=(d, r_n) each
    x: Array of inputs; shape=(..., d)"""

    if len(w_blocks) == 0 or len(w_blocks) != len(v_blocks):
        raise ConfigurationError(
            "Block shape mismatch: %d up-projection blocks and %d down-projection blocks." % (len(w_blocks), len(v_blocks))
        )

    y = None
    for n, (w, v) in enumerate(zip(w_blocks, v_blocks)):
        if w.shape[0] != v.shape[1] or w.shape[1] != x.shape[-1] or v.shape[0] != x.shape[-1]:
            raise ConfigurationError(
                "Block shape mismatch in slice %d: W_n %s, V_n %s, X %s." % (n, w.shape, v.shape, x.shape)
            )
        term = np.maximum(x @ w.T, 0.0) @ v.T
        y = term if y is None else y + term
    return y


def _weight_grad(left, right, mask):
    """Evaluate left.T @ right only on the rows or columns that mask selects."""

    grad = np.zeros(mask.shape)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return grad
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size * mask.shape[1] <= cols.size * mask.shape[0]:
        grad[rows] = left[:, rows].T @ right
    else:
        grad[:, cols] = left.T @ right[:, cols]
    grad[~mask] = 0.0
    return grad


def mlp_backward_sliced(w, v, x, hpre, grad_out, w_mask, v_mask, kept_slices=None, num_slices=1):
    """Backward pass of one MLP block with frozen slices.

    Parameter gradients are only formed where w_mask / v_mask select entries.
    With kept_slices None the input gradient sums the contributions of every
    slice; otherwise only the listed slices contribute to it.

    Parameters
    ----------
    w: up-projection; shape=(D_ff, d)
    v: down-projection; shape=(d, D_ff)
    x: block input; shape=(m, d)
    hpre: pre-activations x @ w.T; shape=(m, D_ff)
    grad_out: upstream gradient; shape=(m, d)
    w_mask, v_mask: boolean trainable masks shaped like w and v
    kept_slices: slice indices contributing to the input gradient, or None
    num_slices: number of slices N the hidden dimension is split into"""

    dv = _weight_grad(grad_out, np.maximum(hpre, 0.0), v_mask) if v_mask.any() else None

    if kept_slices is None:
        dh = (grad_out @ v) * (hpre > 0)
        dw = _weight_grad(dh, x, w_mask) if w_mask.any() else None
        return dh @ w, dw, dv

    width = w.shape[0] // num_slices
    dh = np.zeros(hpre.shape)
    filled = np.zeros(hpre.shape[1], dtype=bool)
    dx = np.zeros(x.shape)
    for n in kept_slices:
        sl = slice(n * width, (n + 1) * width)
        dh_n = (grad_out @ v[:, sl]) * (hpre[:, sl] > 0)
        dh[:, sl] = dh_n
        filled[sl] = True
        dx += dh_n @ w[sl]
    if not w_mask.any():
        return dx, None, dv
    # Parameter gradients of trainable rows outside the kept slices are still exact
    rows = np.flatnonzero(w_mask.any(axis=1) & ~filled)
    if rows.size:
        dh[:, rows] = (grad_out @ v[:, rows]) * (hpre[:, rows] > 0)
    return dx, _weight_grad(dh, x, w_mask), dv


def _layernorm(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    rstd = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layernorm_backward(dy, gain, cache):
    xhat, rstd = cache
    d = dy.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


class Transformer:

    """Decoder-only transformer with a partial backward pass.

    Pre-norm layers with learned absolute positions, causal multi-head
    attention, ReLU MLPs and an output head tied to the token embedding.

    Parameters
    -----------
    config: ModelConfig

    Public methods:
    ---------------
    init_params(self, seed=0, scale=0.02): Random parameters.

    forward(self, params, tokens): Logits and activation cache.

    backward_partial(self, params, cache, dlogits, trainable, mode, num_slices, slice_index, rng):
        Gradients for the trainable index set.

    loss_and_gradients(self, params, batch, trainable, ...): Forward, loss and partial backward.

    loss(self, params, batch): Loss only.

    finite_difference_gradient(self, params, batch, name, index, eps=1e-5): Central-difference gradient.
    """

    def __init__(self, config):
        """Initialise variables."""

        self.config = config.validate()
        self.space = ParamSpace(config)

    def init_params(self, seed=0, scale=0.02):
        """Draw weights from N(0, scale^2); gains start at one and biases at zero."""

        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.space.shapes.items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif name.endswith(".bias"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, scale, size=shape)
        return params

    def _split_heads(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.config.num_heads, self.config.head_dim).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        B, _, T, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, self.config.attn_dim)

    def forward(self, params, tokens):
        """Run the forward pass.

        Parameters
        ----------
        params: dictionary of parameter tensors
        tokens: integer array of input ids; shape=(B, T) with T <= S

        Returns logits of shape (B, T, V) and the cache needed by backward_partial."""

        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ConfigurationError("Token batch must be two-dimensional, got shape %s." % (tokens.shape,))
        B, T = tokens.shape
        if T > cfg.seq_len:
            raise ConfigurationError("Sequence length %d exceeds the configured maximum S=%d." % (T, cfg.seq_len))
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ConfigurationError("Token ids must lie in [0, %d)." % cfg.vocab_size)

        d, hd, ff, V = cfg.hidden_dim, cfg.attn_dim, cfg.ffn_dim, cfg.vocab_size
        m = B * T
        flops = {"proj": 0, "attn": 0, "out_proj": 0, "ffn": 0, "head": 0}
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        scale = 1.0 / np.sqrt(cfg.head_dim)

        x = params["tok_emb"][tokens] + params["pos_emb"][:T]
        layers = []
        for layer in range(cfg.num_layers):
            p = "layers.%d." % layer
            lc = {"x_in": x}

            n1, lc["ln1"] = _layernorm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.layernorm_eps)
            q = self._split_heads(n1 @ params[p + "attn.wq"])
            k = self._split_heads(n1 @ params[p + "attn.wk"])
            v = self._split_heads(n1 @ params[p + "attn.wv"])
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale
            scores[..., causal] = -np.inf
            scores -= scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            u = self._merge_heads(probs @ v)
            x = x + u @ params[p + "attn.wo"]
            flops["proj"] += 3 * 2 * m * d * hd
            flops["attn"] += 2 * 2 * B * cfg.num_heads * T * T * cfg.head_dim
            flops["out_proj"] += 2 * m * hd * d

            lc.update({"n1": n1, "q": q, "k": k, "v": v, "probs": probs, "u": u, "x_mid": x})

            n2, lc["ln2"] = _layernorm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.layernorm_eps)
            hpre = n2 @ params[p + "mlp.w"].T
            x = x + np.maximum(hpre, 0.0) @ params[p + "mlp.v"].T
            flops["ffn"] += 2 * 2 * m * d * ff

            lc.update({"n2": n2, "hpre": hpre})
            layers.append(lc)

            if not np.all(np.isfinite(x)):
                raise NumericalOverflowError("Non-finite activation in layer %d." % layer)

        xf, lnf_cache = _layernorm(x, params["ln_f.gain"], params["ln_f.bias"], cfg.layernorm_eps)
        logits = xf @ params["tok_emb"].T
        flops["head"] += 2 * m * d * V
        if not np.all(np.isfinite(logits)):
            raise NumericalOverflowError("Non-finite activation in the output head.")

        flops["total"] = sum(flops.values())
        cache = {"tokens": tokens, "layers": layers, "x_out": x, "ln_f": lnf_cache, "xf": xf, "flops": flops}
        return logits, cache

    def _kept_slices(self, mode, num_slices, slice_index, rng):
        if mode not in BACKWARD_MODES:
            raise ConfigurationError("Choose a valid backward mode: %s" % list(BACKWARD_MODES))
        if mode == "full-jacobian":
            return None
        if num_slices < 2:
            raise ConfigurationError("Backward mode %s needs at least two MLP slices (N=%d)." % (mode, num_slices))
        self.config.check_slices(num_slices)
        kept = [slice_index]
        if mode == "detach-k-plus-random":
            if rng is None:
                raise ValueError("Backward mode detach-k-plus-random needs a random generator.")
            others = [n for n in range(num_slices) if n != slice_index]
            kept.append(others[int(rng.integers(len(others)))])
        return kept

    def backward_partial(self, params, cache, dlogits, trainable, mode="full-jacobian",
                         num_slices=1, slice_index=0, rng=None):
        """Gradients for the trainable index set.

        Parameters
        ----------
        params: parameters the cache was computed with
        cache: cache returned by forward
        dlogits: gradient of the loss w.r.t. the logits; shape=(B, T, V)
        trainable: ParamMask of indices to produce gradients for
        mode: one of BACKWARD_MODES; detach modes only change the MLP input gradient
        num_slices: number of MLP slices N (detach modes)
        slice_index: this node's slice k (detach modes)
        rng: numpy Generator used by detach-k-plus-random"""

        if trainable.space != self.space:
            raise ContractError("Trainable index set does not belong to this model's parameter space.")
        kept = self._kept_slices(mode, num_slices, slice_index, rng)

        cfg = self.config
        d, V = cfg.hidden_dim, cfg.vocab_size
        tokens = cache["tokens"]
        B, T = tokens.shape
        m = B * T
        scale = 1.0 / np.sqrt(cfg.head_dim)
        grads = GradientBuffer(trainable)

        # Output head, tied to the token embedding
        dlogits2d = dlogits.reshape(m, V)
        d_tok = None
        if trainable.any("tok_emb"):
            d_tok = _weight_grad(dlogits2d, cache["xf"].reshape(m, d), trainable["tok_emb"])
        dxf = dlogits @ params["tok_emb"]

        dx, dgain, dbias = _layernorm_backward(dxf, params["ln_f.gain"], cache["ln_f"])
        if trainable.any("ln_f.gain"):
            grads["ln_f.gain"] = dgain
        if trainable.any("ln_f.bias"):
            grads["ln_f.bias"] = dbias

        for layer in reversed(range(cfg.num_layers)):
            p = "layers.%d." % layer
            lc = cache["layers"][layer]

            # MLP block
            dn2, dw, dv = mlp_backward_sliced(
                params[p + "mlp.w"], params[p + "mlp.v"], lc["n2"].reshape(m, d), lc["hpre"].reshape(m, -1),
                dx.reshape(m, d), trainable[p + "mlp.w"], trainable[p + "mlp.v"], kept, num_slices,
            )
            if dw is not None:
                grads[p + "mlp.w"] = dw
            if dv is not None:
                grads[p + "mlp.v"] = dv
            dln, dgain, dbias = _layernorm_backward(dn2.reshape(B, T, d), params[p + "ln2.gain"], lc["ln2"])
            dx = dx + dln
            if trainable.any(p + "ln2.gain"):
                grads[p + "ln2.gain"] = dgain
            if trainable.any(p + "ln2.bias"):
                grads[p + "ln2.bias"] = dbias

            # Attention block
            grad2d = dx.reshape(m, d)
            if trainable.any(p + "attn.wo"):
                grads[p + "attn.wo"] = _weight_grad(lc["u"].reshape(m, -1), grad2d, trainable[p + "attn.wo"])
            du = self._split_heads(dx @ params[p + "attn.wo"].T)
            probs, q, k, v = lc["probs"], lc["q"], lc["k"], lc["v"]
            dprobs = du @ v.transpose(0, 1, 3, 2)
            dv_heads = probs.transpose(0, 1, 3, 2) @ du
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dq = self._merge_heads(dscores @ k) * scale
            dk = self._merge_heads(dscores.transpose(0, 1, 3, 2) @ q) * scale
            dv_all = self._merge_heads(dv_heads)

            n1 = lc["n1"].reshape(m, d)
            dn1 = np.zeros((B, T, d))
            for matrix, dproj in (("wq", dq), ("wk", dk), ("wv", dv_all)):
                name = p + "attn." + matrix
                if trainable.any(name):
                    grads[name] = _weight_grad(n1, dproj.reshape(m, -1), trainable[name])
                # Input gradient always sums over every head
                dn1 += dproj @ params[name].T

            dln, dgain, dbias = _layernorm_backward(dn1, params[p + "ln1.gain"], lc["ln1"])
            dx = dx + dln
            if trainable.any(p + "ln1.gain"):
                grads[p + "ln1.gain"] = dgain
            if trainable.any(p + "ln1.bias"):
                grads[p + "ln1.bias"] = dbias

        if trainable.any("pos_emb"):
            d_pos = np.zeros(self.space.shapes["pos_emb"])
            d_pos[:T] = dx.sum(axis=0)
            grads["pos_emb"] = d_pos
        if d_tok is not None:
            np.add.at(d_tok, tokens, dx)
            grads["tok_emb"] = d_tok
        return grads

    def loss(self, params, batch):
        logits, _ = self.forward(params, batch.inputs)
        return cross_entropy_loss(logits, batch.targets)[0]

    def loss_and_gradients(self, params, batch, trainable, mode="full-jacobian", num_slices=1, slice_index=0, rng=None):
        """Forward pass, loss and partial backward pass on a TokenBatch."""

        logits, cache = self.forward(params, batch.inputs)
        loss, dlogits = cross_entropy_loss(logits, batch.targets)
        grads = self.backward_partial(params, cache, dlogits, trainable, mode, num_slices, slice_index, rng)
        return loss, grads

    def finite_difference_gradient(self, params, batch, name, index, eps=1e-5):
        """Central-difference estimate of dL/dparams[name][index]."""

        shifted = copy.copy(params)
        tensor = params[name].copy()
        shifted[name] = tensor
        original = tensor[index]
        tensor[index] = original + eps
        plus = self.loss(shifted, batch)
        tensor[index] = original - eps
        minus = self.loss(shifted, batch)
        return (plus - minus) / (2.0 * eps)


def copy_params(params):
    return {name: tensor.copy() for name, tensor in params.items()}


def is_decayed(name):
    """True for the projection matrices that receive weight decay."""
    return name.startswith("layers.") and name.rsplit(".", 1)[-1] in DECAYED_MATRICES


def init_params(config, seed=0, scale=0.02):
    return Transformer(config).init_params(seed, scale)


def zeros_like_params(params):
    return {name: np.zeros_like(tensor) for name, tensor in params.items()}
