"""Trainable layers with hand-derived backward passes.

Every layer keeps its learnable tensors in ``params`` and the matching
gradients in ``grads`` (same names, same shapes). ``forward`` caches what
``backward`` needs; calling ``backward`` without a forward in the current
mode raises :class:`LayerStateError`.
"""

import numpy as np

from . import tensor as T
from .exceptions import InvalidArgumentError, LayerStateError, UninitializedStatisticsError

TRAIN = "train"
INFER = "infer"


class Layer:
    kind = None

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}
        self.mode = TRAIN
        self._cache = None
        self._cache_mode = None

    def set_mode(self, mode):
        if mode not in (TRAIN, INFER):
            raise InvalidArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
        self.mode = mode

    def buffers(self):
        """Non-trainable state that is persisted alongside ``params``."""
        return {}

    def set_buffers(self, values):
        if values:
            raise InvalidArgumentError(f"layer {self.name!r} has no buffers")

    def zero_grad(self):
        for key, value in self.params.items():
            self.grads[key] = np.zeros_like(value)

    def _store(self, cache):
        self._cache = cache
        self._cache_mode = self.mode

    def _load(self):
        if self._cache is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        if self._cache_mode != self.mode:
            raise LayerStateError(
                f"{self.name}: backward in mode {self.mode!r} after forward in mode {self._cache_mode!r}"
            )
        return self._cache

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, name, in_channels, filters, kernel_size, stride=1, padding="same", groups=1):
        super().__init__(name)
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.need_input_grad = True
        self.params["weight"] = np.zeros((kernel_size, kernel_size, in_channels // groups, filters), np.float32)
        self.params["bias"] = np.zeros(filters, np.float32)
        self.zero_grad()

    def initialize(self, rng):
        k = self.kernel_size
        fan_in = k * k * self.in_channels // self.groups
        fan_out = k * k * self.filters
        self.params["weight"] = T.glorot_uniform(fan_in, fan_out, self.params["weight"].shape, rng)
        self.params["bias"] = np.zeros(self.filters, np.float32)

    def forward(self, x):
        p = self.params
        out = T.conv2d_forward(x, p["weight"], p["bias"], self.padding, self.stride, self.groups)
        self._store(x)
        return out

    def backward(self, grad):
        x = self._load()
        dx, dw, db = T.conv2d_backward(
            x, self.params["weight"], grad, self.padding, self.stride, self.groups, self.need_input_grad
        )
        self.grads["weight"] = dw
        self.grads["bias"] = db
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into running estimates, ``r <- (1 - m) r + m batch``.
    Infer mode uses the running estimates only.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, epsilon=1e-5, momentum=0.1):
        super().__init__(name)
        if epsilon <= 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
        if not 0 < momentum < 1:
            raise InvalidArgumentError(f"momentum must lie in (0, 1), got {momentum}")
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, np.float32)
        self.params["beta"] = np.zeros(channels, np.float32)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.stats_initialized = False
        self.zero_grad()

    def initialize(self, rng):
        self.params["gamma"] = np.ones(self.channels, np.float32)
        self.params["beta"] = np.zeros(self.channels, np.float32)

    def buffers(self):
        if not self.stats_initialized:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffers(self, values):
        if set(values) - {"running_mean", "running_var"}:
            raise InvalidArgumentError(f"unknown batchnorm buffers {sorted(values)}")
        if not values:
            self.running_mean = np.zeros(self.channels, np.float32)
            self.running_var = np.ones(self.channels, np.float32)
            self.stats_initialized = False
            return
        if set(values) != {"running_mean", "running_var"}:
            raise InvalidArgumentError("running_mean and running_var must be set together")
        if np.any(values["running_var"] < 0):
            raise InvalidArgumentError("running_var must be non-negative")
        self.running_mean = np.array(values["running_mean"])
        self.running_var = np.array(values["running_var"])
        self.stats_initialized = True

    def forward(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.channels:
            raise InvalidArgumentError(f"{self.name}: expected {self.channels} channels, got {x.shape[-1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if self.mode == TRAIN:
            axes = tuple(range(x.ndim - 1))
            mean = x.mean(axis=axes)
            xhat = x - mean
            var = np.square(xhat).mean(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat *= inv_std
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
            self.stats_initialized = True
        else:
            if not self.stats_initialized:
                raise UninitializedStatisticsError(f"{self.name}: running statistics were never updated")
            inv_std = (1.0 / np.sqrt(self.running_var + self.epsilon)).astype(self.running_var.dtype)
            xhat = x - self.running_mean
            xhat *= inv_std
        self._store((xhat, inv_std))
        out = xhat * gamma
        out += beta
        return out

    def backward(self, grad):
        xhat, inv_std = self._load()
        grad = np.asarray(grad)
        axes = tuple(range(grad.ndim - 1))
        gamma = self.params["gamma"]
        self.grads["beta"] = grad.sum(axis=axes)
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        dxhat = grad * gamma
        if self.mode == INFER:
            dxhat *= inv_std
            return dxhat
        count = grad.size // grad.shape[-1]
        # dx = inv_std/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        sum_d = dxhat.sum(axis=axes)
        sum_dx = self.grads["gamma"] * gamma
        dx = xhat * sum_dx
        dx += sum_d
        np.subtract(dxhat * count, dx, out=dx)
        dx *= inv_std / count
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        x = np.asarray(x)
        mask = x > 0
        self._store(mask)
        return x * mask

    def backward(self, grad):
        mask = self._load()
        return np.asarray(grad) * mask


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name, window, stride):
        super().__init__(name)
        self.window = window
        self.stride = stride

    def forward(self, x):
        out, argmax = T.maxpool_forward(x, self.window, self.stride)
        self._store((argmax, np.shape(x)))
        return out

    def backward(self, grad):
        argmax, shape = self._load()
        return T.maxpool_backward(grad, argmax, shape, self.window, self.stride)


class LRN(Layer):
    kind = "lrn"

    def __init__(self, name, k=2.0, n=5, alpha=1e-4, beta=0.75):
        super().__init__(name)
        self.k, self.n, self.alpha, self.beta = k, n, alpha, beta

    def forward(self, x):
        self._store(x)
        return T.lrn_forward(x, self.k, self.n, self.alpha, self.beta)

    def backward(self, grad):
        x = self._load()
        return T.lrn_backward(x, grad, self.k, self.n, self.alpha, self.beta)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        x = np.asarray(x)
        self._store(x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._load()
        return np.asarray(grad).reshape(shape)


class FullyConnected(Layer):
    kind = "fc"

    def __init__(self, name, in_features, out_features):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.need_input_grad = True
        self.params["weight"] = np.zeros((in_features, out_features), np.float32)
        self.params["bias"] = np.zeros(out_features, np.float32)
        self.zero_grad()

    def initialize(self, rng):
        shape = (self.in_features, self.out_features)
        self.params["weight"] = T.glorot_uniform(self.in_features, self.out_features, shape, rng)
        self.params["bias"] = np.zeros(self.out_features, np.float32)

    def forward(self, x):
        x = np.asarray(x)
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise InvalidArgumentError(f"{self.name}: input shape {x.shape} incompatible with weight {w.shape}")
        self._store(x)
        return T.matmul(x, w) + self.params["bias"]

    def backward(self, grad):
        x = self._load()
        grad = np.asarray(grad)
        if grad.shape != (x.shape[0], self.out_features):
            raise InvalidArgumentError(f"{self.name}: grad shape {grad.shape} does not match output")
        self.grads["weight"] = T.matmul(x.T, grad)
        self.grads["bias"] = grad.sum(axis=0)
        if not self.need_input_grad:
            return None
        return T.matmul(grad, self.params["weight"].T)


def softmax(logits):
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class SoftmaxCrossEntropy(Layer):
    """Softmax followed by the mean negative log-likelihood of the labels."""

    kind = "softmax_xent"

    def forward(self, logits, labels=None):
        """Return ``(loss, probs)``; ``loss`` is ``None`` when no labels are given."""
        logits = np.asarray(logits)
        probs = softmax(logits)
        if labels is None:
            self._store(None)
            return None, probs
        labels = np.asarray(labels)
        if labels.shape != (logits.shape[0],):
            raise InvalidArgumentError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise InvalidArgumentError(f"labels must lie in [0, {logits.shape[1]})")
        labels = labels.astype(np.intp)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        loss = 0.0 - float(log_probs[np.arange(len(labels)), labels].mean())
        self._store((probs, labels))
        return loss, probs

    def backward(self, grad=1.0):
        cache = self._load()
        if cache is None:
            raise LayerStateError(f"{self.name}: forward was called without labels")
        probs, labels = cache
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1
        return d * (grad / len(labels))


LAYER_TYPES = {
    cls.kind: cls for cls in (Conv2D, BatchNorm, ReLU, MaxPool, LRN, Flatten, FullyConnected, SoftmaxCrossEntropy)
}
