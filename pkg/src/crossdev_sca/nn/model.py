"""MLP and 1-D CNN key-byte classifiers built from :mod:`.layers`."""

from __future__ import annotations

import numpy as np

from ..core import DimensionError
from .layers import (
    BatchNorm, Conv1D, Dense, Dropout, Flatten, Layer, MaxPool1D, ReLU, Reshape,
    cross_entropy, softmax,
)

N_CLASSES = 256


class Network:
    """A stack of layers ending in a softmax over ``n_classes`` logits."""

    def __init__(self, arch: str, input_dim: int, layers: list[Layer], config: dict):
        self.arch = arch
        self.input_dim = input_dim
        self.layers = layers
        self.config = dict(config)

    # parameter access -------------------------------------------------

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"{i}.{name}", layer, name, value

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.buffers.items():
                yield f"{i}.{name}", layer, name, value

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers keyed ``"<layer>.<name>"``, in layer order."""
        out = {key: value for key, _, _, value in self.named_params()}
        out.update({key: value for key, _, _, value in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, layer, name, value in list(self.named_params()):
            layer.params[name] = np.array(state[key], dtype=np.float64).reshape(value.shape)
        for key, layer, name, value in list(self.named_buffers()):
            layer.buffers[name] = np.array(state[key], dtype=np.float64).reshape(value.shape)

    def n_parameters(self) -> int:
        return sum(v.size for _, _, _, v in self.named_params())

    def seed_dropout(self, seed) -> None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), i])

    # passes ------------------------------------------------------------

    def logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"{self.arch} expects (B, {self.input_dim}) input, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return softmax(self.logits(x, train))

    def l2_penalty(self, l2: float) -> float:
        if l2 == 0.0:
            return 0.0
        return l2 * sum(float(np.sum(layer.params[n] ** 2))
                        for layer in self.layers for n in layer.decay)

    def loss_and_grads(self, x, labels, l2: float = 0.0):
        """Train-mode forward and backward pass.

        Returns ``(loss, probs, grads)`` where loss is the mean cross-entropy
        plus ``l2 * sum(W**2)`` over weight tensors, and ``grads`` maps the
        same keys as :meth:`state` (parameters only) to gradients.
        """
        labels = np.asarray(labels, dtype=np.intp)
        probs = self.forward(x, train=True)
        loss = cross_entropy(probs, labels) + self.l2_penalty(l2)
        grad = probs.copy()
        grad[np.arange(labels.size), labels] -= 1.0
        grad /= labels.size
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        grads = {}
        for key, layer, name, value in self.named_params():
            g = layer.grads[name]
            if l2 and name in layer.decay:
                g = g + 2.0 * l2 * value
            grads[key] = g
        return loss, probs, grads

    def predict_proba(self, x, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self.forward(x[i:i + batch_size], train=False)
                               for i in range(0, len(x), batch_size)])

    def predict(self, x, batch_size: int = 1024) -> np.ndarray:
        return self.predict_proba(x, batch_size).argmax(axis=1)

    def accuracy(self, x, labels, batch_size: int = 1024) -> float:
        labels = np.asarray(labels)
        return float(np.mean(self.predict(x, batch_size) == labels))


def build_mlp(input_dim: int, hidden: tuple[int, ...] = (100, 100), n_classes: int = N_CLASSES,
              dropout: float = 0.1, batch_norm: bool = True) -> Network:
    """Dense -> BatchNorm -> ReLU per hidden layer, dropout after the first only."""
    layers: list[Layer] = []
    n_in = input_dim
    for i, width in enumerate(hidden):
        layers.append(Dense(n_in, width))
        if batch_norm:
            layers.append(BatchNorm(width))
        layers.append(ReLU())
        if i == 0 and dropout > 0:
            layers.append(Dropout(dropout))
        n_in = width
    layers.append(Dense(n_in, n_classes, zero_init=True))
    config = {"hidden": list(hidden), "n_classes": n_classes, "dropout": dropout,
              "batch_norm": batch_norm}
    return Network("mlp", input_dim, layers, config)


def build_cnn(input_dim: int, filters: int = 70, kernel_size: int = 60, pool_size: int = 3,
              fc_units: int = 150, n_classes: int = N_CLASSES, flat_dropout: float = 0.2,
              fc_dropout: float = 0.1) -> Network:
    """Two ReLU conv layers, max-pool, flatten, dropout, FC -> BatchNorm, dropout, output."""
    conv1_len = input_dim - kernel_size + 1
    conv2_len = conv1_len - kernel_size + 1
    pooled = conv2_len // pool_size
    if pooled < 1:
        raise DimensionError(f"input length {input_dim} too short for two kernels of {kernel_size}")
    layers: list[Layer] = [
        Reshape(),
        Conv1D(1, filters, kernel_size), ReLU(),
        Conv1D(filters, filters, kernel_size), ReLU(),
        MaxPool1D(pool_size),
        Flatten(),
        Dropout(flat_dropout),
        Dense(filters * pooled, fc_units),
        BatchNorm(fc_units),
        Dropout(fc_dropout),
        Dense(fc_units, n_classes, zero_init=True),
    ]
    config = {"filters": filters, "kernel_size": kernel_size, "pool_size": pool_size,
              "fc_units": fc_units, "n_classes": n_classes, "flat_dropout": flat_dropout,
              "fc_dropout": fc_dropout}
    return Network("cnn", input_dim, layers, config)


BUILDERS = {"mlp": build_mlp, "cnn": build_cnn}


def build(arch: str, input_dim: int, **config) -> Network:
    """Uninitialised (all-zero weights) network of the given architecture."""
    if input_dim < 1:
        raise ValueError(f"input_dim must be >= 1, got {input_dim}")
    try:
        builder = BUILDERS[arch.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(BUILDERS)}") from None
    return builder(input_dim, **config)


def init(arch: str, input_dim: int, seed: int = 0, **config) -> Network:
    """Build and randomly initialise a network.

    Hidden weights are He-uniform (``U(-sqrt(6/fan_in), sqrt(6/fan_in))``);
    the softmax layer's weights, all biases and batch-norm shifts start at
    zero and batch-norm scales at one, so the first prediction is uniform.
    """
    net = build(arch, input_dim, **config)
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if hasattr(layer, "init"):
            layer.init(rng)
    net.seed_dropout(seed)
    return net


def forward(model: Network, batch, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(batch, train=(mode == "train"))


def loss(probs, labels) -> float:
    return cross_entropy(np.asarray(probs), labels)


def backward(model: Network, batch, labels, l2: float = 0.0) -> dict[str, np.ndarray]:
    return model.loss_and_grads(batch, labels, l2)[2]
