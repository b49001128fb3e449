"""scikit-learn compatible wrapper around the two screening networks."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidArgumentError
from .io import load_weights
from .metrics import predict_labels
from .models import Network, build_alexnet, build_proposed_cnn, replace_last_layers
from .tensor import seeded_rng
from .training import TrainConfig, train
from .validation import check_binary_labels, check_images, check_threshold

ARCHITECTURES = ("cnn", "alexnet")


def make_network(architecture, rng, fc_hidden=32, input_size=None, pretrained=None, from_scratch=False):
    """Build a two-class network ready for training.

    ``alexnet`` starts from a pretrained 1000-way archive (``pretrained``)
    whose last dense layer is then replaced, or from random weights when
    ``from_scratch`` is set.
    """
    if architecture == "cnn":
        if pretrained:
            raise InvalidArgumentError("the proposed CNN is trained from scratch; pretrained weights are not accepted")
        return Network(build_proposed_cnn(fc_hidden, input_size or 224), rng)
    if architecture == "alexnet":
        if input_size not in (None, 227):
            raise InvalidArgumentError(f"alexnet takes 227x227 inputs, got input_size={input_size}")
        if pretrained and from_scratch:
            raise InvalidArgumentError("pretrained and from_scratch are mutually exclusive")
        if pretrained:
            base = load_weights(pretrained, Network(build_alexnet(1000), initialize=False))
        elif from_scratch:
            base = Network(build_alexnet(1000), rng)
        else:
            raise InvalidArgumentError("alexnet needs pretrained weights or from_scratch=True")
        return replace_last_layers(base, 2, rng)
    raise InvalidArgumentError(f"architecture must be one of {ARCHITECTURES}, got {architecture!r}")


class ChestImageClassifier(ClassifierMixin, BaseEstimator):
    """COVID-19 vs normal classifier for preprocessed chest images.

    Parameters
    ----------
    architecture : {"cnn", "alexnet"}, default="cnn"
        The single-convolution network or AlexNet with a replaced last layer.
    fc_hidden : int, default=32
        Width of the first dense layer of the CNN.
    input_size : int or None, default=None
        Square input side; None means 224 for the CNN and 227 for AlexNet.
    pretrained : str or None, default=None
        Path of a 1000-way AlexNet weight archive.
    from_scratch : bool, default=False
        Allow AlexNet with random initial weights.
    mini_batch_size, epochs, learning_rate, momentum, validation_frequency_iters,
    shuffle_each_epoch, freeze_until
        Forwarded to :class:`~covidnn.training.TrainConfig`.
    threshold : float, default=0.5
        Class-1 probability at or above which an image is called COVID-19.
    random_state : int, default=0
        Seed for initialization and shuffling.

    Attributes
    ----------
    network_ : Network
    curve_ : TrainingCurve
    classes_ : ndarray of shape (2,)
    """

    def __init__(
        self,
        architecture="cnn",
        fc_hidden=32,
        input_size=None,
        pretrained=None,
        from_scratch=False,
        mini_batch_size=10,
        epochs=20,
        learning_rate=3e-4,
        momentum=0.9,
        validation_frequency_iters=3,
        shuffle_each_epoch=True,
        freeze_until=None,
        threshold=0.5,
        random_state=0,
    ):
        self.architecture = architecture
        self.fc_hidden = fc_hidden
        self.input_size = input_size
        self.pretrained = pretrained
        self.from_scratch = from_scratch
        self.mini_batch_size = mini_batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.validation_frequency_iters = validation_frequency_iters
        self.shuffle_each_epoch = shuffle_each_epoch
        self.freeze_until = freeze_until
        self.threshold = threshold
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            mini_batch_size=self.mini_batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            validation_frequency_iters=self.validation_frequency_iters,
            shuffle_each_epoch=self.shuffle_each_epoch,
            momentum=self.momentum,
            seed=self.random_state,
            num_runs=1,
            freeze_until=self.freeze_until,
        )

    def fit(self, X, y, eval_set=None):
        """Train on ``X``/``y``; ``eval_set=(X_val, y_val)`` feeds the validation curve.

        Without ``eval_set`` the curve tracks accuracy on the training images.
        """
        check_threshold(self.threshold)
        config = self._train_config()
        rng = seeded_rng(self.random_state)
        network = make_network(
            self.architecture, rng, self.fc_hidden, self.input_size, self.pretrained, self.from_scratch
        )
        X = check_images(X, network.spec.input_shape)
        y = check_binary_labels(y, len(X))
        if eval_set is None:
            X_val, y_val = X, y
        else:
            X_val = check_images(eval_set[0], network.spec.input_shape)
            y_val = check_binary_labels(eval_set[1], len(X_val))
        self.network_, self.curve_ = train(network, X, y, X_val, y_val, config, rng)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.network_.spec.input_shape)
        return self.network_.predict_proba(X, self.mini_batch_size)

    def decision_function(self, X):
        """Probability of the COVID-19 class."""
        return self.predict_proba(X)[:, 1]

    def predict(self, X):
        return predict_labels(self.decision_function(X), check_threshold(self.threshold))
