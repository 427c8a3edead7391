"""Layer primitives with explicit forward and backward passes.

Tensors are channels-last: ``(batch, *spatial, channels)``.  Convolutions
use 3-wide kernels with stride 1 and are evaluated as a sum over kernel
offsets, one matrix product per tap, which keeps memory at the size of the
input instead of a full im2col buffer.
"""
from __future__ import annotations

import itertools

import numpy as np


def _pad_spatial(x, pad, ndim):
    width = [(0, 0)] + [(pad, pad)] * ndim + [(0, 0)]
    return np.pad(x, width) if pad else x


def _taps(ksize, ndim):
    return list(itertools.product(range(ksize), repeat=ndim))


def conv_forward(x, kernel, bias, pad):
    """N-d convolution (cross-correlation), stride 1.

    ``x``: ``(B, *S, Cin)``; ``kernel``: ``(*K, Cin, Cout)``; ``bias``: ``(Cout,)`` or None.
    """
    ndim = x.ndim - 2
    ksize = kernel.shape[0]
    if kernel.ndim != ndim + 2 or kernel.shape[-2] != x.shape[-1]:
        raise ValueError(f"kernel {kernel.shape} does not fit input {x.shape}")
    xp = _pad_spatial(x, pad, ndim)
    out_spatial = tuple(s + 2 * pad - ksize + 1 for s in x.shape[1:-1])
    if min(out_spatial) < 1:
        raise ValueError(f"input {x.shape} too small for kernel {ksize} with padding {pad}")
    cin, cout = kernel.shape[-2:]
    out = np.zeros((x.shape[0] * int(np.prod(out_spatial)), cout))
    for tap in _taps(ksize, ndim):
        window = (slice(None),) + tuple(slice(t, t + o) for t, o in zip(tap, out_spatial))
        out += xp[window].reshape(-1, cin) @ kernel[tap]
    if bias is not None:
        out += bias
    out = out.reshape((x.shape[0],) + out_spatial + (cout,))
    return out, (x.shape, xp, kernel, pad, bias is not None)


def conv_backward(dout, cache):
    x_shape, xp, kernel, pad, has_bias = cache
    ndim = len(x_shape) - 2
    ksize = kernel.shape[0]
    out_spatial = dout.shape[1:-1]
    cin, cout = kernel.shape[-2:]
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    dflat = dout.reshape(-1, cout)
    for tap in _taps(ksize, ndim):
        window = (slice(None),) + tuple(slice(t, t + o) for t, o in zip(tap, out_spatial))
        dkernel[tap] = xp[window].reshape(-1, cin).T @ dflat
        dxp[window] += (dflat @ kernel[tap].T).reshape(dxp[window].shape)
    if pad:
        inner = (slice(None),) + tuple(slice(pad, pad + s) for s in x_shape[1:-1])
        dx = dxp[inner]
    else:
        dx = dxp
    dbias = dflat.sum(axis=0) if has_bias else None
    return dx, dkernel, dbias


def depthwise_forward(x, kernel, pad):
    """Per-channel 2-D convolution. ``kernel``: ``(k, k, C)``, multiplier 1, no bias."""
    ksize = kernel.shape[0]
    if kernel.shape[-1] != x.shape[-1]:
        raise ValueError(f"depthwise kernel {kernel.shape} does not fit input {x.shape}")
    xp = _pad_spatial(x, pad, 2)
    oh, ow = x.shape[1] + 2 * pad - ksize + 1, x.shape[2] + 2 * pad - ksize + 1
    out = np.zeros((x.shape[0], oh, ow, x.shape[-1]))
    for i, j in _taps(ksize, 2):
        out += xp[:, i : i + oh, j : j + ow, :] * kernel[i, j]
    return out, (x.shape, xp, kernel, pad)


def depthwise_backward(dout, cache):
    x_shape, xp, kernel, pad = cache
    ksize = kernel.shape[0]
    oh, ow = dout.shape[1:3]
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    for i, j in _taps(ksize, 2):
        dkernel[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i : i + oh, j : j + ow, :], dout)
        dxp[:, i : i + oh, j : j + ow, :] += dout * kernel[i, j]
    dx = dxp[:, pad : pad + x_shape[1], pad : pad + x_shape[2], :] if pad else dxp
    return dx, dkernel


def dense_forward(x, weight, bias=None):
    """Affine map on the last axis. ``weight``: ``(Cin, Cout)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"weight {weight.shape} does not fit input {x.shape}")
    out = x.reshape(-1, weight.shape[0]) @ weight
    if bias is not None:
        out += bias
    return out.reshape(x.shape[:-1] + (weight.shape[1],)), (x, weight, bias is not None)


def dense_backward(dout, cache):
    x, weight, has_bias = cache
    cout = weight.shape[1]
    dflat = dout.reshape(-1, cout)
    dweight = x.reshape(-1, weight.shape[0]).T @ dflat
    dbias = dflat.sum(axis=0) if has_bias else None
    dx = (dflat @ weight.T).reshape(x.shape)
    return dx, dweight, dbias


def sepconv_forward(x, depthwise, pointwise, bias, pad=1):
    mid, dcache = depthwise_forward(x, depthwise, pad)
    out, pcache = dense_forward(mid, pointwise, bias)
    return out, (dcache, pcache)


def sepconv_backward(dout, cache):
    dcache, pcache = cache
    dmid, dpointwise, dbias = dense_backward(dout, pcache)
    dx, ddepthwise = depthwise_backward(dmid, dcache)
    return dx, ddepthwise, dpointwise, dbias


def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, x > 0


def relu_backward(dout, cache):
    return dout * cache


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5):
    """Per-channel normalisation over every axis but the last.

    Returns ``(out, cache, new_running_mean, new_running_var)``; running
    statistics are only updated in train mode.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        centred = x - mean
        var = (centred * centred).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv_std
        running_mean = momentum * running_mean + (1.0 - momentum) * mean
        running_var = momentum * running_var + (1.0 - momentum) * var
        cache = (xhat, inv_std, gamma, True)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
        cache = (xhat, inv_std, gamma, False)
    return gamma * xhat + beta, cache, running_mean, running_var


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if train:
        m = dout.size // dout.shape[-1]
        dx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


def dropout_forward(x, rate, train, rng=None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    return x * mask, mask


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


def concat(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-1)
