"""Small feedforward networks with hand-written reverse mode, Gaussian heads and Adam.

All parameters of a network live in one flat float64 vector so that optimizers
and the model-space projection can treat them as a single Euclidean point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 2.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_PVEC_MAGIC = b"PVEC"


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Layout:
    """Ordered (fan_in, fan_out) pairs; each layer stores W then b."""

    layers: tuple[tuple[int, int], ...]

    @property
    def size(self) -> int:
        return sum(i * o + o for i, o in self.layers)

    def offsets(self) -> list[tuple[int, int, int]]:
        out = []
        pos = 0
        for i, o in self.layers:
            out.append((pos, pos + i * o, pos + i * o + o))
            pos += i * o + o
        return out


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise ShapeError(
                f"parameter vector of length {self.values.size} does not match layout size {self.layout.size}"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


class Mlp:
    """Fully connected net, tanh on hidden layers, linear output.

    Inputs may be a single vector ``(input_dim,)`` or a batch ``(n, input_dim)``.
    """

    activation = "tanh"

    def __init__(self, sizes, params: ParamVector | None = None, rng=None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) <= 0:
            raise ShapeError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        self.layout = Layout(tuple(zip(sizes[:-1], sizes[1:])))
        if params is None:
            params = ParamVector(init_uniform(self.layout, rng), self.layout)
        elif params.layout != self.layout:
            raise ShapeError("parameter layout does not match network sizes")
        self.params = params
        self._offsets = self.layout.offsets()

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def with_params(self, values: np.ndarray) -> "Mlp":
        return Mlp(self.sizes, ParamVector(np.array(values, dtype=np.float64), self.layout))

    def copy(self) -> "Mlp":
        return self.with_params(self.params.values)

    def weights(self):
        v = self.params.values
        for (i, o), (a, b, c) in zip(self.layout.layers, self._offsets):
            yield v[a:b].reshape(i, o), v[b:c]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim or x.ndim > 2:
            raise ShapeError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check(x)
        h = x
        ws = list(self.weights())
        for k, (w, b) in enumerate(ws):
            h = h @ w + b
            if k < len(ws) - 1:
                h = np.tanh(h)
        return h

    __call__ = forward

    def forward_cached(self, x):
        """Forward pass that also returns the activations needed by :meth:`vjp`."""
        x = self._check(x)
        acts = [x]
        ws = list(self.weights())
        h = x
        for k, (w, b) in enumerate(ws):
            h = h @ w + b
            if k < len(ws) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def vjp(self, acts, out_grad):
        """Pull ``out_grad`` back through a cached pass; returns (param grad, input grad)."""
        g = np.asarray(out_grad, dtype=np.float64)
        if g.shape != acts[-1].shape:
            raise ShapeError(f"output gradient shape {g.shape} != output shape {acts[-1].shape}")
        grad = np.empty(self.layout.size)
        ws = list(self.weights())
        n = len(ws)
        for k in range(n - 1, -1, -1):
            w, _ = ws[k]
            a, b, c = self._offsets[k]
            if k < n - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            inp = acts[k]
            if g.ndim == 1:
                grad[a:b] = np.outer(inp, g).ravel()
                grad[b:c] = g
            else:
                grad[a:b] = (inp.T @ g).ravel()
                grad[b:c] = g.sum(axis=0)
            g = g @ w.T
        return grad, g

    def backward(self, x, out_grad):
        """Gradient of ``sum(forward(x) * out_grad)`` w.r.t. params and input."""
        _, acts = self.forward_cached(x)
        return self.vjp(acts, out_grad)


def init_uniform(layout: Layout, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    parts = []
    for i, o in layout.layers:
        bound = 1.0 / np.sqrt(i)
        parts.append(rng.uniform(-bound, bound, size=i * o))
        parts.append(rng.uniform(-bound, bound, size=o))
    return np.concatenate(parts)


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64), LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError("mean and log_var must have the same shape")

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


def split_gaussian(out: np.ndarray):
    """Split a raw head output ``[mean | log_var]`` and clamp the log-variance.

    Returns (mean, clamped log_var, mask) where mask is 1 where the clamp is inactive.
    """
    d = out.shape[-1] // 2
    mean = out[..., :d]
    raw = out[..., d:]
    lv = np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)
    mask = ((raw > LOG_VAR_MIN) & (raw < LOG_VAR_MAX)).astype(np.float64)
    return mean, lv, mask


def reparam_sample(g: DiagGaussian, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ShapeError(f"noise shape {noise.shape} != mean shape {g.mean.shape}")
    return g.mean + np.exp(0.5 * g.log_var) * noise


def reparam_vjp(log_var, noise, out_grad):
    """Cotangents of :func:`reparam_sample` w.r.t. (mean, log_var)."""
    return out_grad, out_grad * noise * 0.5 * np.exp(0.5 * log_var)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One Adam update. Returns (new params, new state); inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or grad.shape != state.first_moment.shape:
        raise ShapeError("params, grad and Adam moments must share a shape")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    t = state.step_count + 1
    m = ADAM_BETA1 * state.first_moment + (1 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.second_moment + (1 - ADAM_BETA2) * grad * grad
    m_hat = m / (1 - ADAM_BETA1**t)
    v_hat = v / (1 - ADAM_BETA2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new, AdamState(m, v, t)


@dataclass
class Trainable:
    """A network bundled with its optimizer state and learning rate."""

    net: Mlp
    lr: float
    adam: AdamState = field(default=None)

    def __post_init__(self):
        if self.adam is None:
            self.adam = AdamState.zeros(self.net.layout.size)

    def step(self, grad) -> bool:
        try:
            values, self.adam = adam_step(self.net.params.values, grad, self.adam, self.lr)
        except NumericError:
            return False
        self.net.params.values = values
        return True


def save_pvec(path, params: ParamVector) -> None:
    layers = params.layout.layers
    header = _PVEC_MAGIC + struct.pack("<I", len(layers))
    for i, o in layers:
        header += struct.pack("<II", i, o)
    Path(path).write_bytes(header + params.values.astype("<f8").tobytes())


def load_pvec(path) -> ParamVector:
    data = Path(path).read_bytes()
    if data[:4] != _PVEC_MAGIC:
        raise ValueError(f"{path}: not a .pvec file")
    (n,) = struct.unpack_from("<I", data, 4)
    layers = tuple(struct.unpack_from("<II", data, 8 + 8 * k) for k in range(n))
    start = 8 + 8 * n
    layout = Layout(layers)
    values = np.frombuffer(data[start:], dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)
