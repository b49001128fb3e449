"""Finite-difference verification of every layer's backward pass.

Each case wraps a layer in the scalar probe ``f(x) = sum(layer(x) * r)``
with a fixed random ``r`` (the loss layer is probed directly), then compares
the analytic gradient of every input and parameter with central differences
computed in float64.
"""

from collections import OrderedDict
from typing import NamedTuple

import numpy as np

from . import layers as L
from .tensor import finite_difference_grad, seeded_rng

TOLERANCE = 1e-4
STEP = 1e-5
FLOOR = 1e-6


class CheckResult(NamedTuple):
    kind: str
    case: str
    seed: int
    target: str
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def relative_error(analytic, numeric, floor=FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + gap, x - gap)


def _distinct(rng, shape, gap=1e-3):
    # a random permutation of well-separated values, so no max-pool ties
    n = int(np.prod(shape))
    values = (np.arange(n) - n / 2) * gap * 10 + rng.uniform(-gap, gap, n)
    return rng.permutation(values).reshape(shape)


def _as64(layer):
    for key, value in layer.params.items():
        layer.params[key] = np.asarray(value, dtype=np.float64)
    return layer


def _check_layer(kind, case, seed, layer, x, rng):
    """Compare analytic and numeric gradients of ``sum(layer(x) * r)``."""
    out = layer.forward(x)
    probe = rng.standard_normal(out.shape)
    layer.forward(x)
    dx = layer.backward(probe)
    analytic = {name: np.array(g, dtype=np.float64) for name, g in layer.grads.items()}

    def through_input(z):
        return float(np.sum(layer.forward(z) * probe))

    results = []
    numeric = finite_difference_grad(through_input, x, STEP)
    results.append(CheckResult(kind, case, seed, "input", float(relative_error(dx, numeric).max())))
    for name in sorted(layer.params):
        original = layer.params[name]

        def through_param(p, name=name):
            layer.params[name] = p
            return float(np.sum(layer.forward(x) * probe))

        numeric = finite_difference_grad(through_param, original, STEP)
        layer.params[name] = original
        err = relative_error(analytic[name], numeric)
        results.append(CheckResult(kind, case, seed, name, float(err.max())))
    return results


def _conv_cases(seed, rng):
    out = []
    layer = L.Conv2D("conv", 2, 2, 3, stride=1, padding="same")
    layer.initialize(rng)
    out += _check_layer("conv", "5x5x2 same", seed, _as64(layer), rng.standard_normal((1, 5, 5, 2)), rng)
    layer = L.Conv2D("conv", 4, 4, 3, stride=2, padding="same", groups=2)
    layer.initialize(rng)
    layer.params["bias"] = rng.standard_normal(4)
    out += _check_layer("conv", "7x7x4 stride2 groups2", seed, _as64(layer), rng.standard_normal((2, 7, 7, 4)), rng)
    layer = L.Conv2D("conv", 3, 2, 3, stride=2, padding=1)
    layer.initialize(rng)
    out += _check_layer("conv", "6x6x3 stride2 pad1", seed, _as64(layer), rng.standard_normal((1, 6, 6, 3)), rng)
    return out


def _batchnorm_cases(seed, rng):
    layer = _as64(L.BatchNorm("bn", 2))
    layer.params["gamma"] = rng.uniform(0.5, 1.5, 2)
    layer.params["beta"] = rng.standard_normal(2)
    out = _check_layer("batchnorm", "train 4x3x3x2", seed, layer, rng.standard_normal((4, 3, 3, 2)), rng)
    layer.set_mode(L.INFER)
    out += _check_layer("batchnorm", "infer 4x3x3x2", seed, layer, rng.standard_normal((4, 3, 3, 2)), rng)
    return out


def _relu_cases(seed, rng):
    return _check_layer("relu", "3x4x4x2", seed, L.ReLU("relu"), _away_from_zero(rng, (3, 4, 4, 2)), rng)


def _maxpool_cases(seed, rng):
    x = _distinct(rng, (1, 6, 6, 3))
    out = _check_layer("maxpool", "6x6x3 w3 s2", seed, L.MaxPool("pool", 3, 2), x, rng)
    out += _check_layer("maxpool", "4x4x2 w2 s2", seed, L.MaxPool("pool", 2, 2), _distinct(rng, (2, 4, 4, 2)), rng)
    return out


def _lrn_cases(seed, rng):
    out = _check_layer("lrn", "alexnet 4x4x8", seed, L.LRN("lrn"), rng.standard_normal((1, 4, 4, 8)) * 3, rng)
    strong = L.LRN("lrn", k=1.0, n=4, alpha=1.0, beta=0.75)
    out += _check_layer("lrn", "strong n=4", seed, strong, rng.standard_normal((1, 4, 4, 8)), rng)
    return out


def _fc_cases(seed, rng):
    layer = L.FullyConnected("fc", 6, 5)
    layer.initialize(rng)
    layer.params["bias"] = rng.standard_normal(5)
    return _check_layer("fc", "3x6 -> 5", seed, _as64(layer), rng.standard_normal((3, 6)), rng)


def _flatten_cases(seed, rng):
    return _check_layer("flatten", "2x3x3x2", seed, L.Flatten("flatten"), rng.standard_normal((2, 3, 3, 2)), rng)


def _softmax_cases(seed, rng):
    layer = L.SoftmaxCrossEntropy("output")
    logits = rng.standard_normal((5, 2)) * 2
    labels = rng.integers(0, 2, 5)
    layer.forward(logits, labels)
    analytic = layer.backward()
    numeric = finite_difference_grad(lambda z: layer.forward(z, labels)[0], logits, STEP)
    return [CheckResult("softmax_xent", "5x2", seed, "logits", float(relative_error(analytic, numeric).max()))]


CASES = OrderedDict(
    [
        ("conv", _conv_cases),
        ("batchnorm", _batchnorm_cases),
        ("relu", _relu_cases),
        ("maxpool", _maxpool_cases),
        ("lrn", _lrn_cases),
        ("fc", _fc_cases),
        ("flatten", _flatten_cases),
        ("softmax_xent", _softmax_cases),
    ]
)


def run_suite(seeds=range(10), kinds=None):
    """Run every gradient case for every seed; returns a list of :class:`CheckResult`."""
    results = []
    for kind, fn in CASES.items():
        if kinds is not None and kind not in kinds:
            continue
        for seed in seeds:
            results += fn(seed, seeded_rng(seed))
    return results


def summarize(results):
    """``kind -> (passed, worst relative error)``, in suite order."""
    summary = OrderedDict()
    for r in results:
        ok, worst = summary.get(r.kind, (True, 0.0))
        summary[r.kind] = (ok and r.passed, max(worst, r.max_rel_error))
    return summary
