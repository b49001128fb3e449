"""Momentum SGD and the mini-batch training protocol."""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import DataError, DivergenceError, InvalidArgumentError
from .metrics import aggregate_reports, evaluate, predict_labels
from .tensor import seeded_rng

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum",)


@dataclass
class TrainConfig:
    mini_batch_size: int = 10
    epochs: int = 20
    learning_rate: float = 3e-4
    validation_frequency_iters: int = 3
    shuffle_each_epoch: bool = True
    momentum: float = 0.9
    seed: int = 0
    num_runs: int = 10
    optimizer: str = "sgd_momentum"
    freeze_until: Optional[str] = None

    def __post_init__(self):
        for key in ("mini_batch_size", "epochs", "validation_frequency_iters", "num_runs"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise InvalidArgumentError(f"{key} must be a positive integer, got {value!r}")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise InvalidArgumentError(f"learning_rate must be finite and non-negative, got {self.learning_rate!r}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise InvalidArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgumentError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        return asdict(self)


class CurveRecord(NamedTuple):
    iteration: int
    train_loss: float
    val_accuracy: Optional[float]


class TrainingCurve(list):
    """Per-iteration training loss with validation accuracy where measured."""

    HEADER = ("iteration", "train_loss", "val_accuracy")

    def validation_points(self):
        return [r for r in self if r.val_accuracy is not None]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for r in self:
                val = "" if r.val_accuracy is None else repr(float(r.val_accuracy))
                writer.writerow([r.iteration, repr(float(r.train_loss)), val])

    @classmethod
    def from_csv(cls, path):
        curve = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != cls.HEADER:
                raise DataError(f"unexpected curve header {header}")
            for it, loss, val in reader:
                curve.append(CurveRecord(int(it), float(loss), float(val) if val else None))
        return curve


def sgd_step(params, grads, lr, momentum, velocity):
    """One momentum step, in place: ``v <- momentum*v - lr*g``; ``p <- p + v``.

    ``velocity`` entries are created as zeros on first use.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidArgumentError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise InvalidArgumentError(f"velocity for {name} has shape {v.shape}, parameter has {p.shape}")
        v *= momentum
        v -= lr * g
        p += v
    return params, velocity


def accuracy(network, images, labels, batch_size=10):
    probs = network.predict_proba(images, batch_size=batch_size)[:, 1]
    return float(np.mean(predict_labels(probs) == np.asarray(labels)))


def _check_set(network, images, labels, what):
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise DataError(f"{what} set is empty")
    if len(images) != len(labels):
        raise DataError(f"{what} set has {len(images)} images but {len(labels)} labels")
    if images.shape[1:] != network.spec.input_shape:
        raise DataError(
            f"{what} images have shape {images.shape[1:]}, {network.spec.name} expects {network.spec.input_shape}"
        )
    return images, labels


def iterations_per_epoch(n_train, batch_size):
    return -(-n_train // batch_size)


def train(network, train_images, train_labels, val_images, val_labels, config, rng=None):
    """Fit ``network`` in place and return ``(network, curve)``.

    Every epoch visits all training images in mini-batches (the last one may
    be short), reshuffled per epoch when enabled. Validation accuracy over the
    whole validation set is recorded every ``validation_frequency_iters``
    iterations.
    """
    x_tr, y_tr = _check_set(network, train_images, train_labels, "training")
    x_val, y_val = _check_set(network, val_images, val_labels, "validation")
    rng = seeded_rng(config.seed) if rng is None else rng
    if config.freeze_until:
        network.freeze_until(config.freeze_until)
    params = network.trainable_params()
    velocity = {}
    curve = TrainingCurve()
    n = len(x_tr)
    order = np.arange(n)
    iteration = 0
    for epoch in range(config.epochs):
        if config.shuffle_each_epoch:
            order = rng.permutation(n)
        for start in range(0, n, config.mini_batch_size):
            idx = order[start : start + config.mini_batch_size]
            loss, _ = network.loss_and_grad(x_tr[idx], y_tr[idx])
            iteration += 1
            if not math.isfinite(loss):
                raise DivergenceError(f"training loss became {loss} at iteration {iteration} (epoch {epoch + 1})")
            grads = network.named_grads()
            sgd_step(params, {k: grads[k] for k in params}, config.learning_rate, config.momentum, velocity)
            val_acc = None
            if iteration % config.validation_frequency_iters == 0:
                val_acc = accuracy(network, x_val, y_val, config.mini_batch_size)
            curve.append(CurveRecord(iteration, loss, val_acc))
        log.debug("epoch %d done, last loss %.6f", epoch + 1, curve[-1].train_loss)
    return network, curve


class SplitData(NamedTuple):
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    test_images: Optional[np.ndarray] = None
    test_labels: Optional[np.ndarray] = None


class RunResult(NamedTuple):
    seed: int
    report: object
    curve: TrainingCurve
    network: object


class MultirunResult(NamedTuple):
    runs: list
    aggregate: dict


def default_threads():
    value = os.environ.get("COVIDNN_THREADS")
    if not value:
        return 1
    try:
        threads = int(value)
    except ValueError:
        raise InvalidArgumentError(f"COVIDNN_THREADS must be an integer, got {value!r}") from None
    return max(threads, 1)


def multirun(model_builder, data, config, threshold=0.5, modality="", threads=None, keep_networks=False):
    """Train and evaluate ``config.num_runs`` times with seeds ``seed, seed+1, ...``.

    ``model_builder(rng)`` must return a fresh network; the same generator
    then drives that run's shuffling. Runs are scored on the test split when
    one is given, otherwise on the validation split.
    """
    if data.test_images is not None and len(data.test_images):
        eval_x, eval_y = data.test_images, data.test_labels
    else:
        eval_x, eval_y = data.val_images, data.val_labels

    def one(seed):
        rng = seeded_rng(seed)
        network = model_builder(rng)
        run_config = TrainConfig(**{**config.to_dict(), "seed": seed})
        network, curve = train(
            network, data.train_images, data.train_labels, data.val_images, data.val_labels, run_config, rng
        )
        report = evaluate(network, eval_x, eval_y, threshold, modality)
        return RunResult(seed, report, curve, network if keep_networks else None)

    seeds = [config.seed + i for i in range(config.num_runs)]
    threads = default_threads() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(one, seeds))
    else:
        runs = [one(s) for s in seeds]
    return MultirunResult(runs, aggregate_reports([r.report for r in runs]))
