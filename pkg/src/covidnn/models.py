"""Network descriptions and the two architectures used for COVID-19 screening.

A :class:`ModelSpec` is an immutable, JSON-serializable list of
:class:`LayerSpec` entries. :class:`Network` instantiates one with concrete
layers and parameters.
"""

import copy
import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .exceptions import InvalidArchitectureError, InvalidArgumentError
from .tensor import conv_output_size, resolve_padding, seeded_rng

COVID = 1
NORMAL = 0
CLASS_NAMES = {NORMAL: "normal", COVID: "covid-19"}

PARAM_KINDS = ("conv", "batchnorm", "fc")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, **self.config}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            kind = data.pop("kind")
            name = data.pop("name")
        except KeyError as exc:
            raise InvalidArchitectureError(f"layer entry missing field {exc.args[0]!r}") from None
        if kind not in L.LAYER_TYPES:
            raise InvalidArchitectureError(f"unknown layer kind {kind!r}")
        return cls(kind, name, data)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        try:
            spec = cls(
                name=data["name"],
                input_shape=data["input_shape"],
                layers=[LayerSpec.from_dict(entry) for entry in data["layers"]],
                num_classes=data.get("num_classes", 2),
            )
        except KeyError as exc:
            raise InvalidArchitectureError(f"model spec missing field {exc.args[0]!r}") from None
        validate_spec(spec)
        return spec

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


def infer_shapes(spec):
    """Per-sample output shape of every layer; raises on any broken link."""
    shape = spec.input_shape
    if len(shape) != 3 or min(shape) < 1:
        raise InvalidArchitectureError(f"input shape must be H x W x C, got {shape}")
    shapes = []
    names = set()
    for layer in spec.layers:
        if layer.name in names:
            raise InvalidArchitectureError(f"duplicate layer name {layer.name!r}")
        names.add(layer.name)
        c = layer.config
        where = f"layer {layer.name!r} ({layer.kind})"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise InvalidArchitectureError(f"{where} needs an H x W x C input, got {shape}")
            h, w, ch = shape
            if c["in_channels"] != ch:
                raise InvalidArchitectureError(f"{where} expects {c['in_channels']} channels, receives {ch}")
            k, s = c["kernel_size"], c.get("stride", 1)
            groups = c.get("groups", 1)
            if ch % groups or c["filters"] % groups:
                raise InvalidArchitectureError(f"{where}: channels/filters not divisible by groups={groups}")
            (pt, pb), (pl, pr) = resolve_padding(c.get("padding", "same"), h, w, k, s)
            if h + pt + pb < k or w + pl + pr < k:
                raise InvalidArchitectureError(f"{where}: kernel {k} larger than padded input")
            shape = (conv_output_size(h, k, s, pt, pb), conv_output_size(w, k, s, pl, pr), c["filters"])
        elif layer.kind == "batchnorm":
            if shape[-1] != c["channels"]:
                raise InvalidArchitectureError(f"{where} expects {c['channels']} channels, receives {shape[-1]}")
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise InvalidArchitectureError(f"{where} needs an H x W x C input, got {shape}")
            h, w, ch = shape
            k, s = c["window"], c["stride"]
            if k > h or k > w:
                raise InvalidArchitectureError(f"{where}: window {k} exceeds input {h}x{w}")
            shape = ((h - k) // s + 1, (w - k) // s + 1, ch)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "fc":
            if len(shape) != 1 or shape[0] != c["in_features"]:
                raise InvalidArchitectureError(f"{where} expects {c['in_features']} features, receives {shape}")
            shape = (c["out_features"],)
        elif layer.kind == "softmax_xent":
            if layer is not spec.layers[-1]:
                raise InvalidArchitectureError(f"{where} must be the last layer")
        elif layer.kind not in ("relu", "lrn"):
            raise InvalidArchitectureError(f"unknown layer kind {layer.kind!r}")
        shapes.append(shape)
    return shapes


def validate_spec(spec):
    shapes = infer_shapes(spec)
    if not shapes or shapes[-1] != (spec.num_classes,):
        raise InvalidArchitectureError(
            f"model {spec.name!r} must emit {spec.num_classes} logits, final shape is {shapes[-1] if shapes else None}"
        )
    return shapes


def build_proposed_cnn(fc_hidden=32, input_size=224):
    """One 16-filter 5x5 convolution, batch norm, ReLU and two dense layers."""
    if fc_hidden < 2:
        raise InvalidArgumentError(f"fc_hidden must be >= 2, got {fc_hidden}")
    flat = input_size * input_size * 16
    spec = ModelSpec(
        name="proposed_cnn",
        input_shape=(input_size, input_size, 3),
        num_classes=2,
        layers=[
            LayerSpec("conv", "conv1", dict(in_channels=3, filters=16, kernel_size=5, stride=1, padding="same")),
            LayerSpec("batchnorm", "bn1", dict(channels=16, epsilon=1e-5, momentum=0.1)),
            LayerSpec("relu", "relu1"),
            LayerSpec("flatten", "flatten"),
            LayerSpec("fc", "fc1", dict(in_features=flat, out_features=fc_hidden)),
            LayerSpec("fc", "fc2", dict(in_features=fc_hidden, out_features=2)),
            LayerSpec("softmax_xent", "output"),
        ],
    )
    validate_spec(spec)
    return spec


def build_alexnet(num_classes=1000):
    """Canonical single-tower AlexNet with grouped conv2/conv4/conv5, no dropout."""
    lrn = dict(k=2.0, n=5, alpha=1e-4, beta=0.75)
    pool = dict(window=3, stride=2)
    spec = ModelSpec(
        name="alexnet",
        input_shape=(227, 227, 3),
        num_classes=num_classes,
        layers=[
            LayerSpec("conv", "conv1", dict(in_channels=3, filters=96, kernel_size=11, stride=4, padding="valid")),
            LayerSpec("relu", "relu1"),
            LayerSpec("lrn", "norm1", dict(lrn)),
            LayerSpec("maxpool", "pool1", dict(pool)),
            LayerSpec("conv", "conv2", dict(in_channels=96, filters=256, kernel_size=5, stride=1, padding=2, groups=2)),
            LayerSpec("relu", "relu2"),
            LayerSpec("lrn", "norm2", dict(lrn)),
            LayerSpec("maxpool", "pool2", dict(pool)),
            LayerSpec("conv", "conv3", dict(in_channels=256, filters=384, kernel_size=3, stride=1, padding=1)),
            LayerSpec("relu", "relu3"),
            LayerSpec("conv", "conv4", dict(in_channels=384, filters=384, kernel_size=3, stride=1, padding=1, groups=2)),
            LayerSpec("relu", "relu4"),
            LayerSpec("conv", "conv5", dict(in_channels=384, filters=256, kernel_size=3, stride=1, padding=1, groups=2)),
            LayerSpec("relu", "relu5"),
            LayerSpec("maxpool", "pool5", dict(pool)),
            LayerSpec("flatten", "flatten"),
            LayerSpec("fc", "fc6", dict(in_features=9216, out_features=4096)),
            LayerSpec("relu", "relu6"),
            LayerSpec("fc", "fc7", dict(in_features=4096, out_features=4096)),
            LayerSpec("relu", "relu7"),
            LayerSpec("fc", "fc8", dict(in_features=4096, out_features=num_classes)),
        ],
    )
    validate_spec(spec)
    return spec


def _make_layer(spec):
    c = spec.config
    if spec.kind == "conv":
        return L.Conv2D(
            spec.name, c["in_channels"], c["filters"], c["kernel_size"],
            c.get("stride", 1), c.get("padding", "same"), c.get("groups", 1),
        )
    if spec.kind == "batchnorm":
        return L.BatchNorm(spec.name, c["channels"], c.get("epsilon", 1e-5), c.get("momentum", 0.1))
    if spec.kind == "maxpool":
        return L.MaxPool(spec.name, c["window"], c["stride"])
    if spec.kind == "lrn":
        return L.LRN(spec.name, c.get("k", 2.0), c.get("n", 5), c.get("alpha", 1e-4), c.get("beta", 0.75))
    if spec.kind == "fc":
        return L.FullyConnected(spec.name, c["in_features"], c["out_features"])
    return L.LAYER_TYPES[spec.kind](spec.name)


class Network:
    """Concrete layers for a :class:`ModelSpec`.

    Parameters are addressed as ``"<layer>.<param>"`` (``"conv1.weight"``).
    The optional trailing softmax cross-entropy layer is kept apart as
    ``head``; models without one still produce probabilities through a
    plain softmax.
    """

    def __init__(self, spec, rng=None, initialize=True):
        validate_spec(spec)
        self.spec = spec
        body = list(spec.layers)
        self.head = None
        if body and body[-1].kind == "softmax_xent":
            self.head = L.SoftmaxCrossEntropy(body.pop().name)
        self.layers = [_make_layer(s) for s in body]
        self.frozen = set()
        if initialize:
            rng = seeded_rng(0) if rng is None else rng
            for layer in self.layers:
                if hasattr(layer, "initialize"):
                    layer.initialize(rng)
        self._update_input_grad_flags()
        self.mode = L.TRAIN

    @classmethod
    def from_spec(cls, spec, seed=0):
        return cls(spec, seeded_rng(seed))

    # -- parameter registry -------------------------------------------------
    def param_layers(self):
        return [layer for layer in self.layers if layer.params]

    def named_params(self):
        out = OrderedDict()
        for layer in self.layers:
            for key in sorted(layer.params):
                out[f"{layer.name}.{key}"] = layer.params[key]
        return out

    def named_grads(self):
        out = OrderedDict()
        for layer in self.layers:
            for key in sorted(layer.params):
                out[f"{layer.name}.{key}"] = layer.grads[key]
        return out

    def state_dict(self):
        """Parameters plus initialized buffers, ordered by layer then name."""
        out = OrderedDict()
        for layer in self.layers:
            entries = dict(layer.params)
            entries.update(layer.buffers())
            for key in sorted(entries):
                out[f"{layer.name}.{key}"] = entries[key]
        return out

    def param_shapes(self):
        return OrderedDict((name, tuple(v.shape)) for name, v in self.named_params().items())

    def buffer_shapes(self):
        out = OrderedDict()
        for layer in self.layers:
            if isinstance(layer, L.BatchNorm):
                out[f"{layer.name}.running_mean"] = (layer.channels,)
                out[f"{layer.name}.running_var"] = (layer.channels,)
        return out

    def load_state_dict(self, state):
        """Install tensors by name. Callers are expected to have validated ``state``."""
        by_layer = {}
        for name, value in state.items():
            lname, key = name.rsplit(".", 1)
            by_layer.setdefault(lname, {})[key] = value
        buffer_sets = {}
        for layer in self.layers:
            values = by_layer.pop(layer.name, {})
            for key in list(values):
                if key in layer.params:
                    layer.params[key] = np.array(values.pop(key), dtype=np.float32)
            buffer_sets[layer] = {k: np.array(v, dtype=np.float32) for k, v in values.items()}
        if by_layer:
            raise InvalidArgumentError(f"unknown layers in state: {sorted(by_layer)}")
        for layer, values in buffer_sets.items():
            if values or isinstance(layer, L.BatchNorm):
                layer.set_buffers(values)
        for layer in self.layers:
            layer.zero_grad()

    def num_parameters(self):
        return int(sum(v.size for v in self.named_params().values()))

    # -- freezing -----------------------------------------------------------
    def freeze_until(self, layer_name):
        """Exclude ``layer_name`` and every layer before it from updates."""
        names = [layer.name for layer in self.layers]
        if layer_name not in names:
            raise InvalidArgumentError(f"no layer named {layer_name!r}")
        self.frozen = set(names[: names.index(layer_name) + 1])
        self._update_input_grad_flags()

    def trainable_params(self):
        return OrderedDict(
            (name, value)
            for name, value in self.named_params().items()
            if name.rsplit(".", 1)[0] not in self.frozen
        )

    def _first_trainable_index(self):
        for i, layer in enumerate(self.layers):
            if layer.params and layer.name not in self.frozen:
                return i
        return len(self.layers)

    def _update_input_grad_flags(self):
        first = self._first_trainable_index()
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "need_input_grad"):
                layer.need_input_grad = i > first

    # -- computation --------------------------------------------------------
    def set_mode(self, mode):
        for layer in self.layers:
            layer.set_mode(mode)
        if self.head is not None:
            self.head.set_mode(mode)
        self.mode = mode

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise InvalidArgumentError(
                f"{self.spec.name} expects N x {' x '.join(map(str, self.spec.input_shape))} input, got {x.shape}"
            )
        return x

    def forward(self, x, upto=None):
        """Logits for a batch; ``upto`` stops after the named layer."""
        out = self._check_input(x)
        for layer in self.layers:
            out = layer.forward(out)
            if layer.name == upto:
                break
        return out

    def backward(self, grad):
        stop = self._first_trainable_index()
        for i in range(len(self.layers) - 1, stop - 1, -1):
            grad = self.layers[i].backward(grad)
        return grad

    def loss_and_grad(self, x, labels):
        """Train-mode forward plus backward; returns ``(loss, probs)``."""
        if self.head is None:
            raise InvalidArchitectureError(f"{self.spec.name} has no softmax cross-entropy head to train against")
        self.set_mode(L.TRAIN)
        logits = self.forward(x)
        loss, probs = self.head.forward(logits, labels)
        self.backward(self.head.backward())
        return loss, probs

    def predict_proba(self, x, batch_size=10):
        x = self._check_input(x)
        self.set_mode(L.INFER)
        chunks = []
        for start in range(0, len(x), batch_size):
            chunks.append(L.softmax(self.forward(x[start : start + batch_size])))
        if not chunks:
            return np.zeros((0, self.spec.num_classes), np.float32)
        return np.concatenate(chunks, axis=0)

    def copy(self):
        return copy.deepcopy(self)


def replace_last_layers(network, num_classes, rng):
    """Swap the trailing dense layer for a freshly initialized ``num_classes``-way one.

    The replacement keeps the old layer's name and is followed by a softmax
    cross-entropy head. Every other tensor is copied unchanged.
    """
    body = [s for s in network.spec.layers if s.kind != "softmax_xent"]
    if not body or body[-1].kind != "fc":
        raise InvalidArchitectureError(f"{network.spec.name} does not end in a fully connected layer")
    if num_classes < 1:
        raise InvalidArgumentError(f"num_classes must be >= 1, got {num_classes}")
    old = body[-1]
    new_fc = LayerSpec("fc", old.name, dict(in_features=old.config["in_features"], out_features=num_classes))
    spec = ModelSpec(
        name=network.spec.name,
        input_shape=network.spec.input_shape,
        num_classes=num_classes,
        layers=body[:-1] + [new_fc, LayerSpec("softmax_xent", "output")],
    )
    result = Network(spec, initialize=False)
    kept = OrderedDict(
        (name, value.copy()) for name, value in network.state_dict().items() if not name.startswith(old.name + ".")
    )
    result.load_state_dict(kept)
    result.layers[-1].initialize(rng)
    result.layers[-1].zero_grad()
    result.frozen = set(network.frozen) - {old.name}
    result._update_input_grad_flags()
    return result
