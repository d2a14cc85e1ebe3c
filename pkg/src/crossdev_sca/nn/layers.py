"""Layers with explicit forward/backward passes (float64, NumPy only).

Every layer caches what its backward pass needs during ``forward`` and
returns the gradient with respect to its input from ``backward``.
Parameter gradients land in ``layer.grads`` under the same keys as
``layer.params``.
"""

from __future__ import annotations

import numpy as np

from ..core import DimensionError


class Layer:
    """Base class; parameter-free layers only override forward/backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    # names of params that receive the L2 penalty
    decay: tuple[str, ...] = ()

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def describe(self) -> dict:
        return {"type": type(self).__name__}


class Dense(Layer):
    decay = ("W",)

    def __init__(self, n_in: int, n_out: int, zero_init: bool = False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        # zero_init: keep W at zero on init (used for the softmax layer so a
        # fresh network predicts the uniform distribution)
        self.zero_init = zero_init
        self.params = {"W": np.zeros((n_in, n_out)), "b": np.zeros(n_out)}

    def init(self, rng: np.random.Generator) -> None:
        # He-uniform: Var(W) = 2 / fan_in
        limit = np.sqrt(6.0 / self.n_in)
        w = rng.uniform(-limit, limit, size=(self.n_in, self.n_out))
        self.params["W"] = np.zeros_like(w) if self.zero_init else w
        self.params["b"] = np.zeros(self.n_out)

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"Dense expects (B, {self.n_in}) input, got {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        self.grads = {"W": self._x.T @ grad, "b": grad.sum(axis=0)}
        return grad @ self.params["W"].T

    def output_shape(self, input_shape):
        return (self.n_out,)

    def describe(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}


class ReLU(Layer):
    def forward(self, x, train):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` in training."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def forward(self, x, train):
        if not train or self.rate == 0.0:
            self._scale = None
            return x
        keep = 1.0 - self.rate
        self._scale = (self.rng.random(x.shape) < keep) / keep
        return x * self._scale

    def backward(self, grad):
        return grad if self._scale is None else grad * self._scale

    def describe(self):
        return {"type": "Dropout", "rate": self.rate}


class BatchNorm(Layer):
    """Batch normalisation over the batch axis of ``(B, F)`` inputs.

    Training mode normalises with the (biased) batch statistics and folds
    them into the running estimates: ``running = momentum * running +
    (1 - momentum) * batch``.  Eval mode uses the running estimates.
    """

    def __init__(self, n_features: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.n_features, self.momentum, self.eps = n_features, momentum, eps
        self.params = {"gamma": np.ones(n_features), "beta": np.zeros(n_features)}
        self.buffers = {"running_mean": np.zeros(n_features), "running_var": np.ones(n_features)}

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise DimensionError(f"BatchNorm expects (B, {self.n_features}) input, got {x.shape}")
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv_std
        self._train = train
        return self.params["gamma"] * self._xhat + self.params["beta"]

    def backward(self, grad):
        gamma = self.params["gamma"]
        xhat = self._xhat
        self.grads = {"gamma": (grad * xhat).sum(axis=0), "beta": grad.sum(axis=0)}
        dxhat = grad * gamma
        if not self._train:
            return dxhat * self._inv_std
        n = grad.shape[0]
        return (self._inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def describe(self):
        return {"type": "BatchNorm", "n_features": self.n_features,
                "momentum": self.momentum, "eps": self.eps}


class Conv1D(Layer):
    """Valid (unpadded), stride-1 1-D convolution on ``(B, C_in, L)`` inputs.

    ``W`` has shape ``(C_out, C_in, K)``; output length is ``L - K + 1``.
    """

    decay = ("W",)

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        self.params = {
            "W": np.zeros((out_channels, in_channels, kernel_size)),
            "b": np.zeros(out_channels),
        }

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.in_channels * self.kernel_size
        limit = np.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-limit, limit, size=self.params["W"].shape)
        self.params["b"] = np.zeros(self.out_channels)

    def forward(self, x, train):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise DimensionError(f"Conv1D expects (B, {self.in_channels}, L) input, got {x.shape}")
        k = self.kernel_size
        n_out = x.shape[2] - k + 1
        if n_out < 1:
            raise DimensionError(f"input length {x.shape[2]} shorter than kernel {k}")
        self._x = x
        w = self.params["W"]
        out = np.zeros((x.shape[0], self.out_channels, n_out))
        for t in range(k):
            out += np.matmul(w[:, :, t], x[:, :, t:t + n_out])
        out += self.params["b"][None, :, None]
        return out

    def backward(self, grad):
        x, w, k = self._x, self.params["W"], self.kernel_size
        n_out = grad.shape[2]
        dw = np.empty_like(w)
        dx = np.zeros_like(x)
        for t in range(k):
            window = x[:, :, t:t + n_out]
            dw[:, :, t] = np.tensordot(grad, window, axes=([0, 2], [0, 2]))
            dx[:, :, t:t + n_out] += np.matmul(w[:, :, t].T, grad)
        self.grads = {"W": dw, "b": grad.sum(axis=(0, 2))}
        return dx

    def output_shape(self, input_shape):
        c, length = input_shape
        return (self.out_channels, length - self.kernel_size + 1)

    def describe(self):
        return {"type": "Conv1D", "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size}


class MaxPool1D(Layer):
    """Non-overlapping max pooling; trailing samples that do not fill a window are dropped."""

    def __init__(self, pool_size: int):
        super().__init__()
        self.pool_size = pool_size

    def forward(self, x, train):
        b, c, length = x.shape
        p = self.pool_size
        n_out = length // p
        windows = x[:, :, : n_out * p].reshape(b, c, n_out, p)
        idx = windows.argmax(axis=3)
        self._shape, self._idx = x.shape, idx
        return np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]

    def backward(self, grad):
        b, c, length = self._shape
        p = self.pool_size
        n_out = grad.shape[2]
        windows = np.zeros((b, c, n_out, p))
        np.put_along_axis(windows, self._idx[..., None], grad[..., None], axis=3)
        dx = np.zeros(self._shape)
        dx[:, :, : n_out * p] = windows.reshape(b, c, n_out * p)
        return dx

    def output_shape(self, input_shape):
        c, length = input_shape
        return (c, length // self.pool_size)

    def describe(self):
        return {"type": "MaxPool1D", "pool_size": self.pool_size}


class Flatten(Layer):
    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class Reshape(Layer):
    """``(B, L)`` traces to ``(B, 1, L)`` single-channel signals."""

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], 1, -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, input_shape):
        return (1,) + tuple(input_shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


PROB_EPS = 1e-12


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of ``-ln p[label]`` with probabilities clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.intp)
    picked = probs[np.arange(labels.size), labels]
    return float(-np.log(np.maximum(picked, PROB_EPS)).mean())
