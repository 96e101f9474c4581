"""A small reverse-mode autodiff tape over the handful of primitives the fusion
network needs, plus dense layers and an AdamW optimiser.

This is deliberately not a general autograd: each primitive records a closure
that maps the output gradient to input gradients, and `Tape.backward` replays
them in reverse order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Records primitive applications for one forward pass."""

    def __init__(self, pinned: Optional[Sequence[np.ndarray]] = None):
        self.nodes: List[Tensor] = []
        self.params: Dict[str, Tensor] = {}
        # branch taken by each non-smooth primitive (ReLU masks, max-pool winners).
        # `pinned` replays a recorded sequence instead, which keeps a
        # finite-difference probe on the same smooth piece as the analytic gradient
        self.switches: List[np.ndarray] = []
        self._pinned = None if pinned is None else list(pinned)

    def _switch(self, natural: np.ndarray) -> np.ndarray:
        self.switches.append(natural)
        if self._pinned is None:
            return natural
        k = len(self.switches) - 1
        if k >= len(self._pinned) or self._pinned[k].shape != natural.shape:
            raise ContractError("pinned branch pattern does not match this forward pass")
        return self._pinned[k]

    # leaves -------------------------------------------------------------
    def param(self, name: str, value: np.ndarray) -> Tensor:
        if name not in self.params:
            self.params[name] = Tensor(value, name=name)
        return self.params[name]

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value))

    def _record(self, value, parents, backward_fn) -> Tensor:
        out = Tensor(value, parents, backward_fn)
        self.nodes.append(out)
        return out

    # primitives ---------------------------------------------------------
    def linear(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        if x.value.shape[-1] != w.value.shape[1]:
            raise ConfigError(f"linear expects input width {w.value.shape[1]}, got {x.value.shape[-1]}")
        y = x.value @ w.value.T + b.value

        def back(g):
            return g @ w.value, g.T @ x.value, g.sum(axis=0)

        return self._record(y, (x, w, b), back)

    def batchnorm(self, x: Tensor, gamma: Tensor, beta: Tensor, state: "BatchNormState",
                  training: bool, update_stats: bool = True) -> Tensor:
        if training:
            mean = x.value.mean(axis=0)
            var = x.value.var(axis=0)
            if update_stats:
                state.running_mean = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mean
                state.running_var = BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * var
        else:
            mean, var = state.running_mean, state.running_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.value - mean) * inv
        y = gamma.value * xhat + beta.value
        n = x.value.shape[0]

        def back(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            gx = g * gamma.value
            if training:
                dx = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            else:
                dx = gx * inv
            return dx, dgamma, dbeta

        return self._record(y.astype(x.value.dtype, copy=False), (x, gamma, beta), back)

    def relu(self, x: Tensor) -> Tensor:
        mask = self._switch(x.value > 0)
        return self._record(x.value * mask, (x,), lambda g: (g * mask,))

    def sigmoid(self, x: Tensor) -> Tensor:
        s = sigmoid(x.value)
        return self._record(s, (x,), lambda g: (g * s * (1 - s),))

    def one_minus(self, x: Tensor) -> Tensor:
        return self._record(1 - x.value, (x,), lambda g: (-g,))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        y = a.value * b.value

        def back(g):
            return _unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)

        return self._record(y, (a, b), back)

    def concat(self, xs: Sequence[Tensor], axis: int = -1) -> Tensor:
        y = np.concatenate([x.value for x in xs], axis=axis)
        splits = np.cumsum([x.value.shape[axis] for x in xs])[:-1]

        def back(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._record(y, tuple(xs), back)

    def gather_rows(self, x: Tensor, index: np.ndarray) -> Tensor:
        """Row lookup ``x[index]``; gradients are scatter-added back."""
        y = x.value[index]

        sorted_index = bool(np.all(index[1:] >= index[:-1]))

        def back(g):
            gx = np.zeros_like(x.value)
            if index.size == 0:
                return (gx,)
            if sorted_index:
                # fixed summation order keeps the reduction deterministic and fast
                starts = np.flatnonzero(np.r_[True, index[1:] != index[:-1]])
                gx[index[starts]] = np.add.reduceat(g, starts, axis=0)
            else:
                np.add.at(gx, index, g)
            return (gx,)

        return self._record(y, (x,), back)

    def segment_max(self, x: Tensor, starts: np.ndarray) -> Tensor:
        """Column-wise max over contiguous row segments beginning at `starts`.

        The backward pass routes each column's gradient to the first row that
        attains the maximum.
        """
        n = x.value.shape[0]
        if starts.size == 0 or n == 0:
            raise ContractError("max-pool over an empty set")
        lengths = np.diff(np.append(starts, n))
        if np.any(lengths < 1):
            raise ContractError("max-pool over an empty set")
        natural = np.maximum.reduceat(x.value, starts, axis=0)
        seg = np.repeat(np.arange(starts.size), lengths)
        hit = x.value == natural[seg]
        # first hit per (segment, column): cumulative count of hits within the segment
        csum = np.cumsum(hit, axis=0)
        before = np.concatenate([np.zeros((1,) + csum.shape[1:], csum.dtype), csum[:-1]])
        first = self._switch(hit & ((csum - before[starts][seg]) == 1))
        # value of the winning row (equal to the max unless the winners are pinned)
        y = natural if self._pinned is None else np.add.reduceat(np.where(first, x.value, 0), starts, axis=0)

        def back(g):
            return (np.where(first, g[seg], 0).astype(g.dtype, copy=False),)

        return self._record(y, (x,), back)

    def cross_entropy(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        z = logits.value
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size and (targets.max() >= z.shape[1] or targets.min() < 0):
            raise DataError(f"target class outside [0, {z.shape[1]})")
        loss, probs = _cross_entropy(z, targets)
        n = z.shape[0]

        def back(g):
            d = probs.copy()
            d[np.arange(n), targets] -= 1
            return (d * (g / n),)

        return self._record(np.asarray(loss), (logits,), back)

    def sum(self, x: Tensor) -> Tensor:
        shape = x.value.shape
        return self._record(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))

    # reverse pass -------------------------------------------------------
    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """Gradients of a scalar `loss` for every parameter the forward pass touched."""
        if np.ndim(loss.value) != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        grads = {}
        for name, p in self.params.items():
            grads[name] = np.zeros_like(p.value) if p.grad is None else p.grad
        return grads


def sigmoid(x):
    """Logistic function; the negative branch uses exp(x) so it never overflows."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _cross_entropy(z: np.ndarray, targets: np.ndarray):
    shift = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - lse
    loss = -logp[np.arange(z.shape[0]), targets].mean() if z.shape[0] else 0.0
    return loss, np.exp(logp)


def cross_entropy_loss(logits, targets) -> float:
    """Mean negative log-softmax of the target class (log-sum-exp stabilised)."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.max() >= logits.shape[1] or targets.min() < 0):
        raise DataError(f"target class outside [0, {logits.shape[1]})")
    return float(_cross_entropy(logits, targets)[0])


def maxpool_set(features) -> np.ndarray:
    features = np.asarray(features)
    if features.shape[0] < 1:
        raise ContractError("max-pool over an empty set")
    return features.max(axis=0)


# layers -----------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class DenseLayer:
    """Linear map, optional batch-norm, optional ReLU."""

    weight: np.ndarray
    bias: np.ndarray
    bn: Optional[BatchNormState] = None
    activation: bool = True

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
        if self.bn is not None:
            out[f"{prefix}.bn_gamma"] = self.bn.gamma
            out[f"{prefix}.bn_beta"] = self.bn.beta
        return out

    def buffers(self, prefix: str) -> Dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {f"{prefix}.bn_running_mean": self.bn.running_mean,
                f"{prefix}.bn_running_var": self.bn.running_var}


def dense_layer(in_dim: int, out_dim: int, rng: np.random.Generator, norm: bool = True,
                activation: bool = True, dtype=np.float32, zero: bool = False) -> DenseLayer:
    if zero:
        w = np.zeros((out_dim, in_dim))
    else:
        w = rng.normal(0.0, math.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
    bn = None
    if norm:
        bn = BatchNormState(np.ones(out_dim, dtype), np.zeros(out_dim, dtype),
                            np.zeros(out_dim, dtype), np.ones(out_dim, dtype))
    return DenseLayer(w.astype(dtype), np.zeros(out_dim, dtype), bn, activation)


def mlp_forward(layers: Sequence[DenseLayer], x, tape: Optional[Tape] = None, prefix: str = "mlp",
                training: bool = False, update_stats: bool = True):
    """Apply ``activation(batchnorm(W x + b))`` per layer.

    With a tape the result is a Tensor wired for backward; without one a plain
    array is returned (running statistics are still used in eval mode).
    """
    own_tape = tape is None
    if own_tape:
        tape = Tape()
    h = x if isinstance(x, Tensor) else tape.constant(np.asarray(x))
    for i, layer in enumerate(layers):
        if h.value.shape[-1] != layer.in_dim:
            raise ConfigError(f"{prefix}.{i} expects width {layer.in_dim}, got {h.value.shape[-1]}")
        name = f"{prefix}.{i}"
        h = tape.linear(h, tape.param(f"{name}.weight", layer.weight), tape.param(f"{name}.bias", layer.bias))
        if layer.bn is not None:
            h = tape.batchnorm(h, tape.param(f"{name}.bn_gamma", layer.bn.gamma),
                               tape.param(f"{name}.bn_beta", layer.bn.beta), layer.bn,
                               training, update_stats)
        if layer.activation:
            h = tape.relu(h)
    return h.value if own_tape else h


# optimiser ---------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: Optional[float] = None):
        """In-place decoupled-weight-decay Adam update of every parameter that has a gradient."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p *= 1 - lr * self.weight_decay
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype, copy=False)


def adamw_step(state: AdamW, params, grads, lr=None):
    state.step(params, grads, lr)
    return params, state


def lr_schedule(step: int, total_steps: int, max_lr: float = 1e-3, warmup_frac: float = 0.1) -> float:
    """Linear warm-up to `max_lr` over the first `warmup_frac` of steps, then cosine decay to 0."""
    warm = max(1, int(round(total_steps * warmup_frac)))
    if step < warm:
        return max_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    return 0.5 * max_lr * (1 + math.cos(math.pi * min(1.0, (step - warm) / span)))


@dataclass
class GradCheck:
    """Finite-difference comparison for one parameter tensor."""

    rel_error: float
    max_abs_error: float
    checked: int
    crossings: int  # probes that would have flipped a ReLU or a max-pool winner


def _same_switches(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(loss_fn: Callable[[Tape], Tensor], params: Dict[str, np.ndarray], h: float = 1e-3,
                   max_entries: Optional[int] = None, seed: int = 0, floor: float = 1e-6) -> Dict[str, GradCheck]:
    """Compare tape gradients against central differences, entry by entry.

    ``loss_fn(tape)`` must rebuild the forward pass on ``tape`` from the arrays
    in ``params`` (perturbed in place) and return the scalar loss. Probes run
    with the ReLU masks and max-pool winners of the unperturbed point pinned,
    so a probe that straddles a kink still measures the one-sided piece the
    analytic gradient belongs to. The relative error is
    ``|fd - g| / max(|fd|, |g|, floor)`` with vector norms over the checked
    entries; the floor judges exactly-zero gradients (biases feeding a batch
    norm) on absolute error.
    """
    tape = Tape()
    loss = loss_fn(tape)
    base = list(tape.switches)
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    out = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ContractError(f"parameter {name} must be contiguous to be probed in place")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        g = grads[name].reshape(-1)[idx]
        fd = np.zeros(idx.size)
        crossings = 0
        for j, i in enumerate(idx):
            old = flat[i]
            vals = []
            crossed = False
            for step in (h, -h):
                flat[i] = old + step
                t = Tape(pinned=base)
                vals.append(float(loss_fn(t).value))
                crossed |= not _same_switches(base, t.switches)
            flat[i] = old
            crossings += crossed
            fd[j] = (vals[0] - vals[1]) / (2 * h)
        diff = np.linalg.norm(fd - g)
        scale = max(np.linalg.norm(fd), np.linalg.norm(g), floor)
        out[name] = GradCheck(float(diff / scale), float(np.max(np.abs(fd - g), initial=0.0)),
                              int(idx.size), int(crossings))
    return out
