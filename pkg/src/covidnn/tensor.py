"""Numeric kernels: convolution, matrix product, pooling, response normalization.

Tensors are plain :class:`numpy.ndarray` objects laid out row-major. Image
activations are ``N x H x W x C`` (a single ``H x W x C`` image is accepted
wherever a batch is and the batch axis is dropped again on return).
Convolution kernels are ``K x K x C_in/groups x F``.

All kernels preserve the floating dtype of their inputs, so training runs in
32-bit while the finite-difference checks run the very same code in 64-bit.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import InvalidArgumentError

__all__ = [
    "seeded_rng",
    "glorot_uniform",
    "conv_output_size",
    "resolve_padding",
    "conv2d_forward",
    "conv2d_backward",
    "matmul",
    "maxpool_forward",
    "maxpool_backward",
    "lrn_forward",
    "lrn_backward",
    "finite_difference_grad",
]


def seeded_rng(seed):
    """Return the package's deterministic generator for ``seed``.

    The bit generator is Philox-4x64 (counter based, 10 rounds) as shipped
    with numpy; its stream for a given seed is fixed across platforms and
    numpy releases, which is the property the training protocol relies on.
    """
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise InvalidArgumentError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def glorot_uniform(fan_in, fan_out, shape, rng, dtype=np.float32):
    """Draw a tensor from U(-b, b) with ``b = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgumentError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
    # casting may round a draw just past the bound
    cap = np.asarray(bound, dtype=dtype)
    if float(cap) > bound:
        cap = np.nextafter(cap, np.asarray(0, dtype=dtype))
    return np.clip(values, -cap, cap)


def _as_batch(x, name="input"):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise InvalidArgumentError(f"{name} must be H x W x C or N x H x W x C, got shape {x.shape}")


def conv_output_size(size, kernel, stride, pad_before, pad_after):
    return (size + pad_before + pad_after - kernel) // stride + 1


def resolve_padding(padding, height, width, kernel, stride):
    """Return ``((top, bottom), (left, right))`` zero padding.

    ``padding`` is ``"valid"``, ``"same"`` or a non-negative int applied to
    every side. Same padding splits an odd total as floor before, ceil after.
    """
    if isinstance(padding, str):
        if padding == "valid":
            return (0, 0), (0, 0)
        if padding == "same":
            pads = []
            for size in (height, width):
                out = -(-size // stride)
                total = max((out - 1) * stride + kernel - size, 0)
                pads.append((total // 2, total - total // 2))
            return tuple(pads)
        raise InvalidArgumentError(f"unknown padding {padding!r}")
    pad = int(padding)
    if pad < 0:
        raise InvalidArgumentError(f"padding must be non-negative, got {pad}")
    return (pad, pad), (pad, pad)


def _check_conv_args(x, kernels, bias, stride, groups):
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise InvalidArgumentError(f"kernels must be K x K x C x F, got shape {kernels.shape}")
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    if groups < 1:
        raise InvalidArgumentError(f"groups must be >= 1, got {groups}")
    channels = x.shape[-1]
    filters = kernels.shape[3]
    if channels % groups or filters % groups:
        raise InvalidArgumentError(
            f"channels ({channels}) and filters ({filters}) must be divisible by groups ({groups})"
        )
    if kernels.shape[2] * groups != channels:
        raise InvalidArgumentError(
            f"channel mismatch: input has {channels} channels, kernels expect "
            f"{kernels.shape[2]} x {groups} groups"
        )
    if bias is not None and bias.shape != (filters,):
        raise InvalidArgumentError(f"bias must have shape ({filters},), got {bias.shape}")


def _pad_and_window(x, kernel, stride, padding):
    n, h, w, c = x.shape
    (pt, pb), (pl, pr) = resolve_padding(padding, h, w, kernel, stride)
    if h + pt + pb < kernel or w + pl + pr < kernel:
        raise InvalidArgumentError(
            f"kernel {kernel}x{kernel} larger than padded input {h + pt + pb}x{w + pl + pr}"
        )
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
    ho = conv_output_size(h, kernel, stride, pt, pb)
    wo = conv_output_size(w, kernel, stride, pl, pr)
    return xp, (pt, pb, pl, pr), ho, wo


def _im2col(xp, kernel, stride, ho, wo):
    # N x Ho x Wo x C x K x K  ->  (N*Ho*Wo) x (K*K*C), ordered like the kernel tensor
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[0], xp.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kernel * kernel * c)


def conv2d_forward(x, kernels, bias=None, padding="same", stride=1, groups=1):
    """2-D cross-correlation (no kernel flip) plus a per-filter bias."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    bias = None if bias is None else np.asarray(bias)
    xb, single = _as_batch(x)
    _check_conv_args(xb, kernels, bias, stride, groups)
    k = kernels.shape[0]
    xp, _, ho, wo = _pad_and_window(xb, k, stride, padding)
    n = xb.shape[0]
    cg = kernels.shape[2]
    fg = kernels.shape[3] // groups
    outs = []
    for g in range(groups):
        cols = _im2col(xp[..., g * cg : (g + 1) * cg], k, stride, ho, wo)
        wmat = kernels[..., g * fg : (g + 1) * fg].reshape(k * k * cg, fg)
        outs.append(cols @ wmat)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    out = out.reshape(n, ho, wo, kernels.shape[3])
    if bias is not None:
        out = out + bias
    return out[0] if single else out


def conv2d_backward(x, kernels, grad_output, padding="same", stride=1, groups=1, need_input_grad=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false (first layer
    of a network, where nothing upstream consumes it).
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    xb, single = _as_batch(x)
    gb, _ = _as_batch(np.asarray(grad_output), "grad_output")
    _check_conv_args(xb, kernels, None, stride, groups)
    k = kernels.shape[0]
    xp, (pt, pb, pl, pr), ho, wo = _pad_and_window(xb, k, stride, padding)
    n, h, w, c = xb.shape
    f = kernels.shape[3]
    if gb.shape != (n, ho, wo, f):
        raise InvalidArgumentError(f"grad_output shape {gb.shape} does not match forward output {(n, ho, wo, f)}")
    cg = kernels.shape[2]
    fg = f // groups
    gmat = gb.reshape(n * ho * wo, f)
    grad_bias = gmat.sum(axis=0)
    grad_kernels = np.empty_like(kernels, dtype=np.result_type(kernels, gb, xb))
    dxp = np.zeros(xp.shape, dtype=np.result_type(xb, kernels, gb)) if need_input_grad else None
    for g in range(groups):
        gg = gmat[:, g * fg : (g + 1) * fg]
        cols = _im2col(xp[..., g * cg : (g + 1) * cg], k, stride, ho, wo)
        grad_kernels[..., g * fg : (g + 1) * fg] = (cols.T @ gg).reshape(k, k, cg, fg)
        if need_input_grad:
            wmat = kernels[..., g * fg : (g + 1) * fg].reshape(k * k * cg, fg)
            dcols = (gg @ wmat.T).reshape(n, ho, wo, k, k, cg)
            dst = dxp[..., g * cg : (g + 1) * cg]
            for i in range(k):
                for j in range(k):
                    dst[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[
                        :, :, :, i, j
                    ]
    grad_input = None
    if need_input_grad:
        grad_input = dxp[:, pt : pt + h, pl : pl + w, :]
        if single:
            grad_input = grad_input[0]
    return grad_input, grad_kernels, grad_bias


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _pool_windows(xb, window, stride):
    n, h, w, c = xb.shape
    if window < 1 or stride < 1:
        raise InvalidArgumentError(f"window and stride must be >= 1, got {window}, {stride}")
    if window > h or window > w:
        raise InvalidArgumentError(f"pool window {window} exceeds input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.reshape(n, ho, wo, c, window * window), ho, wo


def maxpool_forward(x, window, stride):
    """Channelwise max over ``window x window`` patches (no padding).

    Returns ``(pooled, argmax)``; ``argmax`` holds the row-major offset of
    the winning element inside each window, first occurrence on ties.
    """
    xb, single = _as_batch(x)
    win, _, _ = _pool_windows(xb, window, stride)
    argmax = win.argmax(axis=-1)
    out = np.take_along_axis(win, argmax[..., np.newaxis], axis=-1)[..., 0]
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool_backward(grad_output, argmax, input_shape, window, stride):
    gb, single = _as_batch(np.asarray(grad_output), "grad_output")
    ab, _ = _as_batch(np.asarray(argmax), "argmax")
    shape = tuple(input_shape)
    if single:
        shape = (1,) + shape
    if gb.shape != ab.shape:
        raise InvalidArgumentError(f"grad_output shape {gb.shape} does not match argmax {ab.shape}")
    _, ho, wo, _ = gb.shape
    dx = np.zeros(shape, dtype=gb.dtype)
    for i in range(window):
        for j in range(window):
            routed = np.where(ab == i * window + j, gb, 0)
            dx[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += routed
    return dx[0] if single else dx


def _channel_window_sum(x, before, after):
    # out[..., c] = sum of x[..., c - before : c + after + 1], clipped at the ends
    c = x.shape[-1]
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(before, after)])
    out = np.zeros_like(x)
    for off in range(before + after + 1):
        out += padded[..., off : off + c]
    return out


def _lrn_scale(x, k, n, alpha, beta):
    if n < 1:
        raise InvalidArgumentError(f"LRN size n must be >= 1, got {n}")
    scale = k + (alpha / n) * _channel_window_sum(x * x, (n - 1) // 2, n // 2)
    if np.any(scale <= 0):
        raise InvalidArgumentError("LRN denominator is not positive; k must be > 0 for all-zero windows")
    return scale


def lrn_forward(x, k=2.0, n=5, alpha=1e-4, beta=0.75):
    """Cross-channel local response normalization.

    ``out_c = x_c / (k + alpha/n * sum_{c' in window(c)} x_c'^2) ** beta``
    where the window spans ``n`` neighbouring channels centred on ``c``.
    """
    x = np.asarray(x)
    return x * _lrn_scale(x, k, n, alpha, beta) ** (-beta)


def lrn_backward(x, grad_output, k=2.0, n=5, alpha=1e-4, beta=0.75):
    x = np.asarray(x)
    g = np.asarray(grad_output)
    if g.shape != x.shape:
        raise InvalidArgumentError(f"grad_output shape {g.shape} does not match input {x.shape}")
    scale = _lrn_scale(x, k, n, alpha, beta)
    spow = scale ** (-beta)
    # channel j sits in the window of channel c iff c in [j - n//2, j + (n-1)//2]
    coupled = _channel_window_sum(g * x * spow / scale, n // 2, (n - 1) // 2)
    return g * spow - (2.0 * alpha * beta / n) * x * coupled


def finite_difference_grad(f, x, step=1e-5):
    """Central-difference gradient of a scalar function, evaluated in float64.

    ``f`` receives a float64 array shaped like ``x`` and must return a real.
    """
    if step <= 0:
        raise InvalidArgumentError(f"step must be positive, got {step}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(f(x))
        flat[i] = orig - step
        minus = float(f(x))
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad
