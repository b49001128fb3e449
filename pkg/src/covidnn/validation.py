"""Input checks shared by the estimator and the command line."""

import numpy as np

from .exceptions import InvalidArgumentError


def check_images(X, input_shape=None, allow_single=True):
    """Return ``X`` as a finite float32 ``N x H x W x C`` array.

    A single ``H x W x C`` image is promoted to a batch of one when
    ``allow_single`` is true.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise InvalidArgumentError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim == 3 and allow_single:
        X = X[np.newaxis]
    if X.ndim != 4:
        raise InvalidArgumentError(f"images must be N x H x W x C, got shape {X.shape}")
    if X.shape[0] == 0:
        raise InvalidArgumentError("no images given")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise InvalidArgumentError(f"images have shape {X.shape[1:]}, model expects {tuple(input_shape)}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("images contain NaN or infinite values")
    return X


def check_binary_labels(y, n_samples=None):
    """Return ``y`` as an int64 vector of 0/1 labels (1 = COVID-19)."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise InvalidArgumentError(f"labels must be a 1-D array, got shape {y.shape}")
    if n_samples is not None and len(y) != n_samples:
        raise InvalidArgumentError(f"got {len(y)} labels for {n_samples} images")
    if y.size and not np.isin(y, (0, 1)).all():
        raise InvalidArgumentError(f"labels must be 0 or 1, got {np.unique(y).tolist()}")
    return y.astype(np.int64)


def check_threshold(threshold):
    if not 0 < threshold < 1:
        raise InvalidArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    return float(threshold)
