"""Implement the inner and outer optimizers.

Used in the partialupdates project to update a node's trainable parameters
during local steps (masked AdamW or SGD, or the dense variant for replicas
that train every parameter) and to apply the averaged parameter
delta to the global parameters at synchronization (Nesterov, heavy-ball or
direct application).

Classes:
--------
InnerOptState - optimizer moments stored for the trainable indices only.
OuterOptState - momentum buffers over the full parameter space.
"""

import math

import numpy as np

from partialupdates.errors import ConfigurationError, ContractError
from partialupdates.model import is_decayed

INNER_KINDS = ("adamw", "sgd")
OUTER_KINDS = ("nesterov", "momentum", "direct")
LR_SCHEDULES = ("warmup-cosine", "constant")


class InnerOptState:

    """Inner optimizer state of one node.

    Moments are 1-D arrays over the entries of the trainable mask, in
    row-major order, so frozen indices carry no state.

    Parameters
    -----------
    mask: ParamMask of trainable indices
    kind: 'adamw' or 'sgd'
    beta1, beta2, eps: AdamW moment coefficients and denominator epsilon
    weight_decay: decoupled decay applied to projection matrices only

    Public methods:
    ---------------
    reset(self): Drop moments and the step counter.

    num_entries(self): Number of stored state scalars.

    state_arrays(self) / load_state_arrays(self, arrays, step): Flat arrays for checkpoints.
    """

    def __init__(self, mask, kind="adamw", beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.1):
        """Initialise variables."""

        if kind not in INNER_KINDS:
            raise ConfigurationError("Choose a valid inner optimizer: %s" % list(INNER_KINDS))
        self.mask = mask
        self.kind = kind
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.reset()

    def reset(self):
        self.step = 0
        self.m = {}
        self.v = {}
        if self.kind == "adamw":
            for name in self.mask.names():
                size = int(self.mask[name].sum())
                self.m[name] = np.zeros(size)
                self.v[name] = np.zeros(size)

    def num_entries(self):
        return int(sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values()))

    def state_arrays(self):
        """Moments keyed as 'm/<name>' and 'v/<name>'."""
        arrays = {"m/" + name: a for name, a in self.m.items()}
        arrays.update({"v/" + name: a for name, a in self.v.items()})
        return arrays

    def load_state_arrays(self, arrays, step):
        self.reset()
        for name in self.m:
            for key, store in (("m/", self.m), ("v/", self.v)):
                value = np.asarray(arrays[key + name], dtype=np.float64)
                if value.shape != store[name].shape:
                    raise ContractError("Stored moment %s has %d entries, expected %d." % (key + name, value.size, store[name].size))
                store[name] = value.copy()
        self.step = int(step)


def inner_step(params, grads, state, lr):
    """Apply one inner update to params in place, on the trainable indices only.

    Parameters
    ----------
    params: dictionary of parameter tensors of one node
    grads: GradientBuffer whose coverage equals the state mask
    state: InnerOptState
    lr: learning rate for this step"""

    if grads.coverage != state.mask:
        raise ContractError("Gradient coverage does not match the optimizer state coverage.")

    state.step += 1
    t = state.step
    for name in state.mask.names():
        idx = state.mask[name]
        p = params[name][idx]
        g = grads.entries(name)

        if state.weight_decay and is_decayed(name):
            p = p * (1.0 - lr * state.weight_decay)

        if state.kind == "adamw":
            m = state.m[name]
            v = state.v[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            p = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            p = p - lr * g

        params[name][idx] = p
    return params


def dense_inner_step(params, grads, state, lr):
    """Apply one inner update to every entry of every parameter, in place.

    Used by replicas that train the full model (DDP, DiLoCo). The state mask
    must cover the whole space; moments are viewed in the tensor's shape."""

    space = state.mask.space
    if state.mask.count() != space.size:
        raise ContractError("Dense updates need a state that covers every parameter.")

    state.step += 1
    t = state.step
    for name in space.names:
        p = params[name]
        g = grads[name]

        if state.weight_decay and is_decayed(name):
            p = p * (1.0 - lr * state.weight_decay)

        if state.kind == "adamw":
            m = state.m[name].reshape(p.shape)
            v = state.v[name].reshape(p.shape)
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            p = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            p = p - lr * g

        params[name][...] = p
    return params


def lr_schedule(step, total_steps, peak_lr, warmup_steps=None, floor=0.0, kind="warmup-cosine"):
    """Learning rate at a step: linear warmup from 0, then cosine decay to floor.

    warmup_steps defaults to 5% of total_steps (at least one step)."""

    if kind not in LR_SCHEDULES:
        raise ConfigurationError("Choose a valid learning rate schedule: %s" % list(LR_SCHEDULES))
    if not 0 <= step <= total_steps:
        raise ValueError("Step %d outside [0, %d]." % (step, total_steps))
    if kind == "constant":
        return peak_lr

    if warmup_steps is None:
        warmup_steps = max(1, int(round(0.05 * total_steps)))
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class OuterOptState:

    """Outer optimizer state over the full parameter space.

    The averaged delta is treated as a negative pseudo-gradient.

    Parameters
    -----------
    space: ParamSpace
    kind: 'nesterov', 'momentum' or 'direct'
    lr: outer learning rate
    momentum: momentum coefficient
    """

    def __init__(self, space, kind="nesterov", lr=0.4, momentum=0.9):
        """Initialise variables."""

        if kind not in OUTER_KINDS:
            raise ConfigurationError("Choose a valid outer optimizer: %s" % list(OUTER_KINDS))
        self.space = space
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.buffers = space.zeros() if kind != "direct" else {}

    def state_arrays(self):
        return {"buf/" + name: a for name, a in self.buffers.items()}

    def load_state_arrays(self, arrays):
        for name in self.buffers:
            self.buffers[name] = np.asarray(arrays["buf/" + name], dtype=np.float64).reshape(self.space.shapes[name]).copy()


def outer_step(params, delta, state, mask=None):
    """Apply the averaged delta to the global params in place.

    Parameters
    ----------
    params: dictionary of global parameter tensors
    delta: dictionary of full-space deltas (zeros allowed)
    state: OuterOptState
    mask: optional ParamMask; only these indices (and their buffers) change"""

    names = state.space.names if mask is None else mask.names()
    for name in names:
        if delta[name].shape != params[name].shape:
            raise ContractError("Delta for %s has shape %s, expected %s." % (name, delta[name].shape, params[name].shape))
        d = delta[name]
        if state.kind == "direct":
            update = d
        else:
            buf = state.momentum * state.buffers[name] - d
            if mask is not None:
                buf = np.where(mask[name], buf, state.buffers[name])
            state.buffers[name] = buf
            if state.kind == "nesterov":
                update = -state.lr * (state.momentum * buf - d)
            else:
                update = -state.lr * buf
        if mask is None:
            params[name] += update
        else:
            params[name][mask[name]] += update[mask[name]]
    return params
