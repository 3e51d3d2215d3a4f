"""A small fully connected backbone, a linear classifier head, manual
backpropagation and SGD with momentum.

Inputs are row-major: ``x`` has shape ``(N, input_dim)`` and each layer
computes ``act(x @ W.T + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, TrainingError
from .tensorio import read_tensors, write_tensors

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, out):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


@dataclass
class MlpBackbone:
    layers: list[Layer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ConfigurationError("consecutive layer shapes do not compose")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @classmethod
    def init(cls, sizes, activations, rng: np.random.Generator) -> "MlpBackbone":
        """He-style initialization for ``sizes = [in, h1, ..., d]``."""
        if len(activations) != len(sizes) - 1:
            raise ConfigurationError("need one activation per layer")
        layers = []
        for n_in, n_out, act in zip(sizes, sizes[1:], activations):
            scale = np.sqrt(2.0 / n_in) if act == "relu" else np.sqrt(1.0 / n_in)
            layers.append(Layer(rng.normal(0.0, scale, (n_out, n_in)), np.zeros(n_out), act))
        return cls(layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out


@dataclass
class ClassifierHead:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, feature_dim, n_classes, rng: np.random.Generator) -> "ClassifierHead":
        w = rng.normal(0.0, np.sqrt(1.0 / feature_dim), (n_classes, feature_dim))
        return cls(w, np.zeros(n_classes))

    def parameters(self) -> list[np.ndarray]:
        return [self.weight, self.bias]


@dataclass
class Model:
    """Backbone plus head; ``version`` counts optimizer steps."""

    backbone: MlpBackbone
    head: ClassifierHead
    version: int = 0

    def parameters(self) -> list[np.ndarray]:
        return self.backbone.parameters() + self.head.parameters()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Model":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.backbone.layers]
        head = ClassifierHead(self.head.weight.copy(), self.head.bias.copy())
        return Model(MlpBackbone(layers), head, self.version)

    @classmethod
    def init(cls, input_dim, hidden, feature_dim, n_classes, rng, *,
             hidden_activation="relu", feature_activation="relu") -> "Model":
        sizes = [input_dim, *hidden, feature_dim]
        acts = [hidden_activation] * len(hidden) + [feature_activation]
        return cls(MlpBackbone.init(sizes, acts, rng), ClassifierHead.init(feature_dim, n_classes, rng))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    features: np.ndarray
    logits: np.ndarray
    posteriors: np.ndarray
    version: int = field(default=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: Model, inputs) -> ForwardCache:
    """Features, logits and posteriors for a batch of inputs."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.backbone.input_dim:
        raise ConfigurationError(
            f"input has shape {x.shape}, expected (N, {model.backbone.input_dim})"
        )
    pre, post = [], []
    h = x
    for layer in model.backbone.layers:
        z = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, z)
        pre.append(z)
        post.append(h)
    logits = h @ model.head.weight.T + model.head.bias
    return ForwardCache(x, pre, post, h, logits, softmax(logits), model.version)


def predict(model: Model, inputs) -> np.ndarray:
    return np.argmax(forward(model, inputs).logits, axis=1)


def backward(model: Model, cache: ForwardCache, grad_features=None, grad_logits=None) -> list[np.ndarray]:
    """Parameter gradients in :meth:`Model.parameters` order.

    ``grad_features`` is the upstream gradient at the backbone output and
    ``grad_logits`` at the head output; either may be omitted.
    """
    if cache.version != model.version:
        raise RuntimeError("forward cache is stale: the model changed since it was computed")
    n, d = cache.features.shape
    g_feat = np.zeros((n, d)) if grad_features is None else np.asarray(grad_features, dtype=np.float64)
    if g_feat.shape != (n, d):
        raise ConfigurationError("feature gradient shape does not match the batch")
    if grad_logits is not None:
        grad_logits = np.asarray(grad_logits, dtype=np.float64)
        g_head_w = grad_logits.T @ cache.features
        g_head_b = grad_logits.sum(axis=0)
        g_feat = g_feat + grad_logits @ model.head.weight
    else:
        g_head_w = np.zeros_like(model.head.weight)
        g_head_b = np.zeros_like(model.head.bias)

    grads: list[np.ndarray] = []
    g = g_feat
    layers = model.backbone.layers
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        gz = g * _act_grad(layer.activation, cache.pre[i], cache.post[i])
        inp = cache.inputs if i == 0 else cache.post[i - 1]
        grads.append(gz.sum(axis=0))
        grads.append(gz.T @ inp)
        g = gz @ layer.weight
    grads.reverse()
    return grads + [g_head_w, g_head_b]


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: SgdState, trainable=None) -> None:
    """In-place ``v = momentum * v + g; p -= lr * v``.

    ``trainable`` is an optional per-parameter boolean list; frozen entries
    keep both parameter and velocity untouched.
    """
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if trainable is not None and not trainable[i]:
            continue
        v *= state.momentum
        v += g
        p -= state.learning_rate * v


def step_model(model: Model, grads, state: SgdState, freeze_head: bool = False) -> None:
    params = model.parameters()
    trainable = None
    if freeze_head:
        trainable = [True] * (len(params) - 2) + [False, False]
    sgd_step(params, grads, state, trainable)
    model.version += 1


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def accuracy(model: Model, x, y) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def pretrain_source(
    model: Model,
    x_train,
    y_train,
    *,
    epochs: int,
    lr: float,
    batch_size: int = 128,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    seed: int = 0,
    x_val=None,
    y_val=None,
) -> tuple[Model, float]:
    """Minibatch cross-entropy training on labeled source data.

    Returns the model and its accuracy on the held-out split (the training
    split when no held-out data is given).
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    rng = np.random.default_rng(seed)
    state = SgdState(lr, momentum)
    n = x_train.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            cache = forward(model, x_train[idx])
            loss, g_logits = cross_entropy(cache.logits, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"source loss became non-finite in epoch {epoch}", epoch=epoch)
            grads = backward(model, cache, grad_logits=g_logits)
            if weight_decay:
                grads = [g + weight_decay * p for g, p in zip(grads, model.parameters())]
            step_model(model, grads, state)
    if x_val is None:
        x_val, y_val = x_train, y_train
    return model, accuracy(model, x_val, y_val)


def save_checkpoint(model: Model, path) -> None:
    """Write every parameter to the binary tensor format."""
    tensors = {}
    for i, layer in enumerate(model.backbone.layers):
        tensors[f"backbone.{i}.weight"] = layer.weight
        tensors[f"backbone.{i}.bias"] = layer.bias
    tensors["head.weight"] = model.head.weight
    tensors["head.bias"] = model.head.bias
    meta = {
        "kind": "checkpoint",
        "activations": [l.activation for l in model.backbone.layers],
        "version": model.version,
    }
    write_tensors(path, tensors, meta)


def load_checkpoint(path) -> Model:
    t, meta = read_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a model checkpoint")
    layers = [
        Layer(t[f"backbone.{i}.weight"], t[f"backbone.{i}.bias"], act)
        for i, act in enumerate(meta["activations"])
    ]
    return Model(MlpBackbone(layers), ClassifierHead(t["head.weight"], t["head.bias"]), meta.get("version", 0))
