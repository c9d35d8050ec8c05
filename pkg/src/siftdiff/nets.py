"""Dense networks with hand-written reverse-mode gradients, sized for 2D problems.

Everything is float64 numpy. A network is a stack of affine layers with an
activation tag per layer; gradients are exact (checked against finite
differences in the test suite). The Adam optimizer and a flat binary
checkpoint format live here too.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

ACTIVATIONS = ("tanh", "gelu", "identity")

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

CHECKPOINT_MAGIC = b"SIFTNN1"


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "gelu":
        return 0.5 * z * (1.0 + erf(z / _SQRT2))
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        th = np.tanh(z)
        return 1.0 - th * th
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(z / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return cdf + z * pdf
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("layer weight must be 2D and bias 1D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must match weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class DenseNet:
    """Fully connected net; consecutive layer dims must chain."""

    layers: list[Layer]

    def __post_init__(self) -> None:
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...]; arrays are views, not copies."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ValueError("parameter count mismatch")
        for i, layer in enumerate(self.layers):
            layer.weight = np.asarray(params[2 * i], dtype=np.float64)
            layer.bias = np.asarray(params[2 * i + 1], dtype=np.float64)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_dense(
    dims: list[int],
    activation: str,
    rng: np.random.Generator,
    final_activation: str = "identity",
    zero_final: bool = False,
    scale: float = 1.0,
) -> DenseNet:
    """Xavier-uniform init; hidden layers use `activation`, last uses `final_activation`.

    zero_final zeroes the last layer so the net starts as the constant zero map.
    """
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        if last and zero_final:
            w = np.zeros_like(w)
        layers.append(Layer(w, b, final_activation if last else activation))
    return DenseNet(layers)


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, consumed by net_backward."""

    x: np.ndarray  # input as given, promoted to (n, in)
    pre: list[np.ndarray]  # pre-activations per layer
    post: list[np.ndarray]  # post-activations per layer
    squeeze: bool  # input was a single vector


def net_forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single (in,) vector or a batch (n, in)."""
    y, _ = net_forward_cached(net, x)
    return y


def net_forward_cached(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != net.in_dim:
        raise ValueError(f"input dim {x.shape} does not match net input {net.in_dim}")
    pre, post = [], []
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, z)
        pre.append(z)
        post.append(h)
    y = post[-1][0] if squeeze else post[-1]
    return y, ForwardCache(x=(x[None, :] if squeeze else x), pre=pre, post=post, squeeze=squeeze)


def net_backward(
    net: DenseNet, cache: ForwardCache, cotangent: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact gradients of <output, cotangent> wrt parameters and input.

    The cotangent has the output's shape (batched gradients sum over the
    batch; scale the cotangent by 1/n for a mean). Returns (param_grads,
    input_grad) with param_grads matching net.params() order.
    """
    if cache is None:
        raise ValueError("net_backward requires the cache of a matching forward pass")
    cot = np.asarray(cotangent, dtype=np.float64)
    if cache.squeeze and cot.ndim == 1:
        cot = cot[None, :]
    if cot.shape != cache.post[-1].shape:
        raise ValueError("cotangent shape does not match cached forward output")

    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    g = cot
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        gz = g * _act_grad(layer.activation, cache.pre[i])
        upstream = cache.post[i - 1] if i > 0 else cache.x
        grads[2 * i] = gz.T @ upstream
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.weight
    input_grad = g[0] if cache.squeeze else g
    return grads, input_grad


@dataclass
class TimeFeature:
    """Sin/cos features of normalized time t_bar in [0, 1].

    Frequencies are geometric: omega_f = base * 2**(f-1), f = 1..n_freqs.
    """

    n_freqs: int = 8
    base: float = np.pi

    @property
    def dim(self) -> int:
        return 2 * self.n_freqs

    def __call__(self, t_bar: float | np.ndarray) -> np.ndarray:
        t_bar = np.asarray(t_bar, dtype=np.float64)
        omegas = self.base * 2.0 ** np.arange(self.n_freqs)
        phase = t_bar[..., None] * omegas
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


@dataclass
class SpatialFeature:
    """Geometric sin/cos encoding of coordinates, appended to the raw input.

    Sharp mixture structure is hard for a small dense net on raw coordinates;
    the encoding exposes wavelengths down to 2*scale / 2**n_freqs.
    """

    n_freqs: int = 5
    scale: float = 4.0

    def dim(self, d: int) -> int:
        return d * (1 + 2 * self.n_freqs)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        scaled = x / self.scale
        if self.n_freqs == 0:
            return scaled
        omegas = np.pi * 2.0 ** np.arange(self.n_freqs)
        phase = scaled[..., None] * omegas
        n = x.shape[:-1]
        flat = phase.reshape(*n, -1)
        return np.concatenate([scaled, np.sin(flat), np.cos(flat)], axis=-1)


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def _ensure(self, params: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params):
            raise ValueError("optimizer state does not match parameter list")


def opt_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> list[np.ndarray]:
    """One Adam update with bias correction; mutates params in place.

    A non-finite gradient rejects the whole update (step counter unchanged)
    and emits a warning.
    """
    state._ensure(params)
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameter list")
    if any(not np.all(np.isfinite(g)) for g in grads):
        warnings.warn("non-finite gradient; update rejected", RuntimeWarning)
        return params
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params


_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def save_checkpoint(net: DenseNet, path: str) -> None:
    """Flat binary: magic, u32 layer count, per-layer (in, out, act) u32s, f64 params."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            out_dim, in_dim = layer.weight.shape
            f.write(struct.pack("<III", in_dim, out_dim, _ACT_CODES[layer.activation]))
        for layer in net.layers:
            f.write(layer.weight.astype("<f8").tobytes())
            f.write(layer.bias.astype("<f8").tobytes())


def load_checkpoint(path: str) -> DenseNet:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (n_layers,) = struct.unpack("<I", f.read(4))
        shapes = []
        for _ in range(n_layers):
            in_dim, out_dim, act = struct.unpack("<III", f.read(12))
            shapes.append((in_dim, out_dim, ACTIVATIONS[act]))
        layers = []
        for in_dim, out_dim, act in shapes:
            w = np.frombuffer(f.read(8 * in_dim * out_dim), dtype="<f8").reshape(
                out_dim, in_dim
            )
            b = np.frombuffer(f.read(8 * out_dim), dtype="<f8")
            layers.append(Layer(w.copy(), b.copy(), act))
        return DenseNet(layers)
