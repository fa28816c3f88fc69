"""
Dense feed-forward networks with hand-written backprop and Adam.

Everything runs in float64. Batches are row-major: a batch of n inputs is an
(n, in_dim) array and a layer computes ``act(x @ W + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
LEAKY_SLOPE = 0.2


class NumericError(ArithmeticError):
    """Raised when a gradient, loss or activation turns non-finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, act, upstream):
    if act == "relu":
        return upstream * (z > 0)
    if act == "leaky_relu":
        return np.where(z > 0, upstream, LEAKY_SLOPE * upstream)
    if act == "tanh":
        return upstream * (1.0 - a * a)
    return upstream


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    act: str = "identity"

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.W.ndim != 2 or self.W.shape[1] != self.b.shape[0]:
            raise ValueError(f"weight {self.W.shape} and bias {self.b.shape} do not match")


@dataclass
class DenseNet:
    """A stack of dense layers; out-dim of layer i must equal in-dim of layer i+1."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a DenseNet needs at least one layer")
        for i in range(len(self.layers) - 1):
            if self.layers[i].W.shape[1] != self.layers[i + 1].W.shape[0]:
                raise ValueError(
                    f"layer {i} outputs {self.layers[i].W.shape[1]} features "
                    f"but layer {i + 1} expects {self.layers[i + 1].W.shape[0]}"
                )

    @classmethod
    def init(cls, sizes, acts, rng):
        """He-initialised net: weights ~ N(0, 2/fan_in), zero biases.

        Args:
            sizes: layer widths including input, e.g. ``[2, 64, 64, 16]``.
            acts: one activation tag per layer, or a single tag for all layers.
            rng: ``numpy.random.Generator``.
        """
        n = len(sizes) - 1
        if isinstance(acts, str):
            acts = [acts] * n
        if len(acts) != n:
            raise ValueError(f"need {n} activations, got {len(acts)}")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            layers.append(Layer(W, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].W.shape[1]

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def copy(self):
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers])

    def __call__(self, x):
        return forward(self, x).output


@dataclass
class Trace:
    """Per-layer inputs, pre-activations and activations of one forward pass."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def output(self):
        return self.post[-1]


@dataclass
class GradientSet:
    """Gradients w.r.t. each parameter (same order as ``parameters()``) and the input."""

    params: list[np.ndarray]
    dx: np.ndarray | None = None

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)


def forward(net: DenseNet, batch) -> Trace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"batch of shape {x.shape} does not fit input dim {net.in_dim}")
    inputs, pre, post = [], [], []
    for layer in net.layers:
        inputs.append(x)
        z = x @ layer.W + layer.b
        x = _activate(z, layer.act)
        pre.append(z)
        post.append(x)
    return Trace(inputs, pre, post)


def backward(net: DenseNet, trace: Trace, upstream, input_only=False) -> GradientSet:
    """Backpropagate ``upstream`` (dL/d output) through the net.

    Returns gradients for every parameter plus ``dx``, the gradient w.r.t. the
    batch fed to ``forward``. With ``input_only`` the parameter slots are None.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {trace.output.shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = _activation_grad(trace.pre[i], trace.post[i], layer.act, g)
        if not input_only:
            grads[2 * i] = trace.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.W.T
    return GradientSet(grads, g)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model, lr, beta1=0.0, beta2=0.999, eps=1e-8):
        params = model.parameters()
        return cls(
            lr, beta1, beta2, eps, 0,
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
        )


def adam_step(model, grads, state: AdamState, ascent=False):
    """Apply one Adam update in place to ``model.parameters()``.

    ``ascent=True`` climbs the gradient instead of descending it.
    """
    params = model.parameters()
    grads = list(grads)
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("gradients, optimizer state and parameters are not congruent")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {i}", index=i)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    sign = 1.0 if ascent else -1.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p += sign * state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


def finite_difference_error(params, loss_fn, grads, h=1e-5, floor=1e-8):
    """Largest elementwise relative gap between ``grads`` and central differences.

    ``loss_fn()`` must read ``params`` (mutated in place here) and return a scalar.
    ``floor`` bounds the denominator from below so entries whose true gradient
    is zero are compared against rounding noise (about ``eps * |L| / h``)
    rather than against zero.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn()
            flat[j] = orig - h
            down = loss_fn()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            analytic = gflat[j]
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def grad_check(net: DenseNet, batch, h=1e-5, upstream=None):
    """Check ``backward`` against central differences for ``L = sum(out * upstream)``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(batch, dtype=np.float64)
    trace = forward(net, x)
    if upstream is None:
        upstream = np.ones_like(trace.output)
    grads = backward(net, trace, upstream)

    def loss():
        return float(np.sum(forward(net, x).output * upstream))

    return finite_difference_error(net.parameters(), loss, grads.params, h)


def _net_arrays(net: DenseNet, prefix=""):
    out = {}
    for i, layer in enumerate(net.layers):
        out[f"{prefix}layer{i}.W"] = layer.W
        out[f"{prefix}layer{i}.b"] = layer.b
        out[f"{prefix}layer{i}.act"] = np.array(layer.act)
    return out


def _net_from_arrays(arrays, prefix=""):
    layers = []
    i = 0
    while f"{prefix}layer{i}.W" in arrays:
        layers.append(Layer(
            arrays[f"{prefix}layer{i}.W"].copy(),
            arrays[f"{prefix}layer{i}.b"].copy(),
            str(arrays[f"{prefix}layer{i}.act"]),
        ))
        i += 1
    return DenseNet(layers)


def save_arrays(path, arrays):
    """Write a dict of arrays as an uncompressed ``.npz`` (bit-exact round trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_arrays(path):
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def save_net(net: DenseNet, path):
    save_arrays(path, _net_arrays(net))


def load_net(path) -> DenseNet:
    return _net_from_arrays(load_arrays(path))
