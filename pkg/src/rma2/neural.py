"""Small numpy network library: dense and 1D-conv layers with manual backprop.

Everything here works on batched arrays. Parameters live in plain dicts of
named arrays so checkpoints and optimizers can address them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .errors import ShapeError, check_finite

ACTIVATIONS = ("tanh", "linear")


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "tanh"
    gain: float | None = None  # orthogonal init gain; None -> sqrt(2) for hidden, 1 for linear


@dataclass(frozen=True)
class Conv1d:
    channels: int
    kernel: int
    stride: int = 1
    activation: str = "tanh"
    gain: float | None = None


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv1d, Flatten]


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (excluding the batch axis)."""
        shape = tuple(self.input_shape)
        out = []
        for layer in self.layers:
            shape = _output_shape(layer, shape)
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1] if self.layers else tuple(self.input_shape)

    def param_count(self) -> int:
        shape = tuple(self.input_shape)
        total = 0
        for layer in self.layers:
            if isinstance(layer, Dense):
                total += shape[0] * layer.width + layer.width
            elif isinstance(layer, Conv1d):
                total += layer.channels * shape[0] * layer.kernel + layer.channels
            shape = _output_shape(layer, shape)
        return total


def _output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ShapeError(f"dense layer needs a flat input, got shape {shape}")
        return (layer.width,)
    if isinstance(layer, Conv1d):
        if len(shape) != 2:
            raise ShapeError(f"conv1d needs (channels, length) input, got shape {shape}")
        length = (shape[1] - layer.kernel) // layer.stride + 1
        if length < 1:
            raise ShapeError(f"conv1d kernel {layer.kernel} does not fit length {shape[1]}")
        return (layer.channels, length)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise TypeError(f"unknown layer spec {layer!r}")


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(kind: str, y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return gy * (1.0 - y * y)
    return gy


class Network:
    """Sequential stack built from a :class:`NetworkSpec`.

    ``forward`` caches what ``backward`` needs; call them in pairs on the same
    input. Gradients accumulate into ``grads`` until :meth:`zero_grad`.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        shape = tuple(spec.input_shape)
        n = len(spec.layers)
        for i, layer in enumerate(spec.layers):
            out = _output_shape(layer, shape)
            if isinstance(layer, (Dense, Conv1d)):
                gain = layer.gain
                if gain is None:
                    gain = 1.0 if (layer.activation == "linear" and i == n - 1) else float(np.sqrt(2.0))
                if isinstance(layer, Dense):
                    w = orthogonal((shape[0], layer.width), gain, rng)
                    b = np.zeros(layer.width)
                else:
                    w = orthogonal((layer.channels, shape[0] * layer.kernel), gain, rng)
                    w = w.reshape(layer.channels, shape[0], layer.kernel)
                    b = np.zeros(layer.channels)
                self.params[f"{i}.weight"] = w.astype(self.dtype)
                self.params[f"{i}.bias"] = b.astype(self.dtype)
            shape = out
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache: list | None = None

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.spec.output_shape

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "Network":
        clone = Network.__new__(Network)
        clone.spec = self.spec
        clone.dtype = np.dtype(dtype)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        clone.grads = {k: np.zeros_like(v) for k, v in clone.params.items()}
        clone._cache = None
        return clone

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(f"expected input shape (B, {self.spec.input_shape}), got {x.shape}")
        check_finite(x, "network input")
        cache = []
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, Dense):
                y = _activate(layer.activation, x @ self.params[f"{i}.weight"] + self.params[f"{i}.bias"])
                cache.append(x)
            elif isinstance(layer, Conv1d):
                cols = _im2col(x, layer.kernel, layer.stride)
                w = self.params[f"{i}.weight"]
                bsz, lout = x.shape[0], cols.shape[0] // x.shape[0]
                z = cols @ w.reshape(w.shape[0], -1).T + self.params[f"{i}.bias"]
                y = _activate(layer.activation, z.reshape(bsz, lout, -1).transpose(0, 2, 1))
                cache.append((x.shape, cols))
            else:
                cache.append(x.shape)
                y = x.reshape(x.shape[0], -1)
            cache[-1] = (cache[-1], y)
            x = y
        check_finite(x, "network output")
        self._cache = cache
        return x

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward")
        gy = np.asarray(gy, dtype=self.dtype)
        check_finite(gy, "output gradient")
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            saved, y = self._cache[i]
            if gy.shape != y.shape:
                raise ShapeError(f"gradient shape {gy.shape} does not match layer {i} output {y.shape}")
            if isinstance(layer, Dense):
                gz = _activation_grad(layer.activation, y, gy)
                self.grads[f"{i}.weight"] += saved.T @ gz
                self.grads[f"{i}.bias"] += gz.sum(axis=0)
                gy = gz @ self.params[f"{i}.weight"].T
            elif isinstance(layer, Conv1d):
                in_shape, cols = saved
                w = self.params[f"{i}.weight"]
                gz = _activation_grad(layer.activation, y, gy)
                gz2 = gz.transpose(0, 2, 1).reshape(-1, w.shape[0])
                self.grads[f"{i}.weight"] += (gz2.T @ cols).reshape(w.shape)
                self.grads[f"{i}.bias"] += gz2.sum(axis=0)
                gcols = gz2 @ w.reshape(w.shape[0], -1)
                gy = _col2im(gcols, in_shape, layer.kernel, layer.stride)
            else:
                gy = gy.reshape(saved)
        for k, g in self.grads.items():
            check_finite(g, f"gradient {k}")
        return gy


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    bsz, ch, length = x.shape
    lout = (length - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, : (lout - 1) * stride + 1 : stride, :]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(bsz * lout, ch * kernel)


def _col2im(gcols: np.ndarray, in_shape: tuple[int, ...], kernel: int, stride: int) -> np.ndarray:
    bsz, ch, length = in_shape
    lout = gcols.shape[0] // bsz
    g = gcols.reshape(bsz, lout, ch, kernel)
    gx = np.zeros(in_shape, dtype=gcols.dtype)
    stop = (lout - 1) * stride + 1
    for j in range(kernel):
        gx[:, :, j : j + stop : stride] += g[:, :, :, j].transpose(0, 2, 1)
    return gx


class EmbeddingTable:
    """Learnable lookup table; gradients land only on the rows that were read."""

    def __init__(self, rows: int, dim: int, rng: np.random.Generator, dtype=np.float32, scale: float = 1.0):
        self.weight = (scale * rng.standard_normal((rows, dim))).astype(dtype)
        self.grad = np.zeros_like(self.weight)
        self._ids: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.weight.shape[0]

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.rows):
            raise IndexError(f"embedding id out of range [0, {self.rows}): {ids[(ids < 0) | (ids >= self.rows)][:5]}")
        self._ids = ids
        return self.weight[ids]

    def backward(self, gy: np.ndarray) -> None:
        np.add.at(self.grad, self._ids, gy.astype(self.grad.dtype))

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Adam:
    """Adam with bias correction.

    Names listed in ``sparse`` are treated as lookup tables: only rows with a
    nonzero gradient this step have their moments and values touched.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        sparse: Iterable[str] = (),
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.sparse = set(sparse)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            check_finite(g, f"adam grad {name}")
            if name in self.sparse:
                rows = np.flatnonzero(np.any(g != 0, axis=tuple(range(1, g.ndim))))
                if rows.size == 0:
                    continue
                m, v, gr = self.m[name], self.v[name], g[rows]
                m[rows] = self.beta1 * m[rows] + (1.0 - self.beta1) * gr
                v[rows] = self.beta2 * v[rows] + (1.0 - self.beta2) * gr * gr
                mhat = m[rows] / c1
                vhat = v[rows] / c2
                p[rows] -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            else:
                m, v = self.m[name], self.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                mhat = m / c1
                vhat = v / c2
                p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k][...] = arrays[f"adam.m.{k}"]
            self.v[k][...] = arrays[f"adam.v.{k}"]
        self.t = int(t)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def gradcheck(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    rng: np.random.Generator,
    probes: int = 10,
    h: float = 1e-3,
) -> float:
    """Max relative error of ``analytic`` against central differences.

    ``loss_fn`` must read ``params`` in place. Each probe perturbs one randomly
    chosen scalar entry; the probes are spread across all named arrays.
    """
    names = [k for k in params if params[k].size]
    worst = 0.0
    for p in range(probes):
        name = names[p % len(names)] if p < len(names) else names[int(rng.integers(len(names)))]
        arr = params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = loss_fn()
        arr[idx] = old - h
        down = loss_fn()
        arr[idx] = old
        numeric = (up - down) / (2 * h)
        a = float(analytic[name][idx])
        denom = max(abs(a), abs(numeric))
        err = 0.0 if denom < 1e-10 else abs(a - numeric) / denom
        worst = max(worst, err)
    return worst
