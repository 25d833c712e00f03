"""Norm-constrained ReLU networks with exact reverse-mode gradients.

A network is the composition ``T_L(relu(... relu(T_0(x))))`` of affine maps
``T_l(x) = A_l x + b_l``.  Its weight norm is

    kappa = ||A_L|| * prod_{l<L} max(||(A_l, b_l)||, 1)

with ``||.||`` the max-row-sum (l-infinity operator) norm, which bounds the
l-infinity Lipschitz constant of the network by ``kappa``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, NumericError, ShapeError

_net_ids = itertools.count()


@dataclass
class LayerParams:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ShapeError(f"weight must be a nonempty matrix, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class NormNet:
    """ReLU feedforward network with a weight-norm budget.

    ``hidden_bias=False`` gives the bias-free form where only the first
    layer carries an offset; the optimizer then never moves the other biases.
    """

    layers: list[LayerParams]
    norm_budget: float
    output_clamp: float | None = None
    hidden_bias: bool = True
    version: int = field(default=0, compare=False)
    uid: int = field(default_factory=lambda: next(_net_ids), compare=False, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if b.in_dim != a.out_dim:
                raise ShapeError(f"layer {k + 1} expects {b.in_dim} inputs, layer {k} emits {a.out_dim}")
        if not self.norm_budget > 0:
            raise ValueError("norm_budget must be positive")
        if self.output_clamp is not None and not self.output_clamp > 0:
            raise ValueError("output_clamp must be positive when set")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        """Number of hidden (ReLU) layers."""
        return len(self.layers) - 1

    @property
    def width(self) -> int:
        hidden = [layer.out_dim for layer in self.layers[:-1]]
        return max(hidden) if hidden else max(self.in_dim, self.out_dim)

    def touch(self):
        """Invalidate outstanding forward caches after an in-place edit."""
        self.version += 1

    def copy(self) -> "NormNet":
        return NormNet(
            [LayerParams(l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.norm_budget,
            self.output_clamp,
            self.hidden_bias,
        )

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Name -> array references; in-place updates edit the network."""
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}layers.{k}.weight"] = layer.weight
            out[f"{prefix}layers.{k}.bias"] = layer.bias
        return out

    def __call__(self, X):
        return forward(self, X)[0]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer (X, then post-activations)
    pre: list[np.ndarray]  # pre-activation of each layer; the last is the raw output
    net_uid: int
    net_version: int

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def init_net(in_dim, out_dim, width, depth, norm_budget, rng, output_clamp=None, hidden_bias=True):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, projected to the budget."""
    sizes = [in_dim] + [width] * depth + [out_dim]
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(LayerParams(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    net = NormNet(layers, float(norm_budget), output_clamp, hidden_bias)
    return project_norm(net)


def _check_input(net, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if net.in_dim == 1 else X[None, :]
    if X.ndim != 2 or X.shape[1] != net.in_dim or X.shape[0] < 1:
        raise ShapeError(f"expected a batch of shape (n, {net.in_dim}), got {X.shape}")
    return X


def forward(net: NormNet, X):
    """Evaluate the network on a batch; returns ``(Y, cache)``."""
    X = _check_input(net, X)
    inputs, pre = [], []
    a = X
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = np.maximum(z, 0.0) if k < last else z
    if net.output_clamp is not None:
        a = np.clip(a, -net.output_clamp, net.output_clamp)
    return a, ForwardCache(inputs, pre, net.uid, net.version)


def backward(net: NormNet, cache: ForwardCache, out_cotangent):
    """Vector-Jacobian product of the batched forward map.

    Returns ``(param_grads, in_cotangent)`` where ``param_grads`` is a list of
    ``(dweight, dbias)`` per layer, summed over the batch.
    """
    if cache.net_uid != net.uid or cache.net_version != net.version:
        raise CacheError("forward cache is stale or was produced by another network")
    g = np.asarray(out_cotangent, dtype=float)
    n = cache.batch_size
    if g.shape != (n, net.out_dim):
        raise ShapeError(f"cotangent shape {g.shape} does not match output ({n}, {net.out_dim})")
    if net.output_clamp is not None:
        g = g * (np.abs(cache.pre[-1]) <= net.output_clamp)
    grads = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if k < len(net.layers) - 1:
            g = g * (cache.pre[k] > 0.0)
        dW = g.T @ cache.inputs[k]
        if k == 0 or net.hidden_bias:
            db = g.sum(axis=0)
        else:
            db = np.zeros_like(layer.bias)
        grads[k] = (dW, db)
        g = g @ layer.weight
    return grads, g


def flat_grads(net: NormNet, grads, prefix: str = "") -> dict[str, np.ndarray]:
    """Key per-layer gradients the same way as ``NormNet.params``."""
    out = {}
    for k, (dW, db) in enumerate(grads):
        out[f"{prefix}layers.{k}.weight"] = dW
        out[f"{prefix}layers.{k}.bias"] = db
    return out


def _row_sum_norm(M):
    return float(np.abs(M).sum(axis=1).max())


def weight_norm(net: NormNet) -> float:
    kappa = _row_sum_norm(net.layers[-1].weight)
    for layer in net.layers[:-1]:
        block = np.hstack([layer.weight, layer.bias[:, None]])
        kappa *= max(_row_sum_norm(block), 1.0)
    return kappa


def project_norm(net: NormNet) -> NormNet:
    """Rescale the final layer in place so that ``weight_norm <= norm_budget``."""
    kappa = weight_norm(net)
    if kappa > net.norm_budget:
        c = net.norm_budget / kappa
        net.layers[-1].weight *= c
        net.layers[-1].bias *= c
    net.touch()
    return net


def rebalance(net: NormNet) -> NormNet:
    """Function-preserving rescaling that never increases ``weight_norm``.

    Each hidden unit whose row ``(w_j, b_j)`` has l1 norm ``s_j > 1`` is
    divided by ``s_j`` and its outgoing column in the next layer multiplied
    by ``s_j``.  ReLU's positive homogeneity keeps outputs unchanged, every
    hidden factor in ``kappa`` drops to at most 1, and the growth this pushes
    into later layers is never more than the factor removed.  Sweeping front
    to back leaves all hidden rows inside the unit ball.
    """
    for k in range(len(net.layers) - 1):
        layer, nxt = net.layers[k], net.layers[k + 1]
        s = np.abs(layer.weight).sum(axis=1) + np.abs(layer.bias)
        f = np.maximum(s, 1.0)
        layer.weight /= f[:, None]
        layer.bias /= f
        nxt.weight *= f[None, :]
    net.touch()
    return net


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


@dataclass
class OptimizerState:
    """Optimizer moments plus optional per-parameter proximal L1 thresholds.

    ``method`` is ``"adam"`` or ``"sgd"``.  After the step, a parameter with
    threshold ``t > 0`` is soft-thresholded by ``t * lr``, so exact zeros are
    reachable.  Only with ``"sgd"`` is this the exact proximal-gradient step
    for an L1 penalty; Adam rescales the smooth part per coordinate, which
    moves the fixed points away from the lasso solution.
    """

    lr: float = 1e-3
    method: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l1: dict[str, float] = field(default_factory=dict)
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def opt_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One optimizer step, editing ``params`` arrays in place."""
    if state.method not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer method {state.method!r}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", path=name)
    state.step_count += 1
    t = state.step_count
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.method == "sgd":
            p -= state.lr * g
            thr = state.l1.get(name, 0.0)
            if thr > 0:
                p[...] = soft_threshold(p, thr * state.lr)
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        thr = state.l1.get(name, 0.0)
        if thr > 0:
            p[...] = soft_threshold(p, thr * state.lr)
    return params, state
