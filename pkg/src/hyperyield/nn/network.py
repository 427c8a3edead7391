"""Hyper3DNetReg: a 3-D/2-D convolutional regressor with a patch-shaped output.

Layer stack for a ``W x W x n`` input (widths shown for the default config)::

    4 x [Conv3D 3x3x3 + ReLU + BN], densely concatenated  -> (W, W, n, 128)
    reshape                                              -> (W, W, 128 n)
    dropout, SepConv 512, SepConv 320, dropout,
    SepConv 256, dropout, SepConv 128, SepConv 32        -> (W, W, 32)
    head: Conv2D 3x3 + ReLU                              -> (N, N)        N in {W, W-2}
          Conv2D 3x3 + ReLU, flatten, FC (no bias), ReLU -> (1,)          N = 1

Every SepConv is followed by ReLU and batch norm.  The dense concatenation
joins the running stack with the newest Conv3D block, which is what yields
the 32 -> 64 -> 96 -> 128 channel progression.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class ModelConfig:
    window: int = 5
    channels: int = 8
    out_size: int = 5
    dropout_rate: float = 0.5
    conv3d_filters: int = 32
    conv3d_blocks: int = 4
    sep_filters: tuple[int, ...] = (512, 320, 256, 128, 32)
    # dropout is applied before the SepConv block with these indices
    dropout_before: tuple[int, ...] = (0, 2, 3)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "sep_filters", tuple(self.sep_filters))
        object.__setattr__(self, "dropout_before", tuple(self.dropout_before))
        if self.out_size % 2 == 0 or self.out_size > self.window:
            raise ValueError(f"output size must be odd and <= {self.window}, got {self.out_size}")
        if self.out_size not in (1, self.window, self.window - 2):
            raise ValueError(
                f"the 3x3 head can only emit N in (1, {self.window - 2}, {self.window}), "
                f"got {self.out_size}"
            )
        if self.window < 3:
            raise ValueError("window must be at least 3")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    @property
    def head_pad(self) -> int:
        return 1 if self.out_size == self.window else 0

    @property
    def head_size(self) -> int:
        return self.window - 2 + 2 * self.head_pad

    @property
    def dense_channels(self) -> int:
        return self.conv3d_filters * self.conv3d_blocks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered trainable parameter shapes."""
    shapes = {}
    f = config.conv3d_filters
    for i in range(config.conv3d_blocks):
        cin = 1 if i == 0 else f * i
        shapes[f"conv3d_{i + 1}/kernel"] = (3, 3, 3, cin, f)
        shapes[f"conv3d_{i + 1}/bias"] = (f,)
        shapes[f"bn3d_{i + 1}/gamma"] = (f,)
        shapes[f"bn3d_{i + 1}/beta"] = (f,)
    cin = config.dense_channels * config.channels
    for i, cout in enumerate(config.sep_filters):
        shapes[f"sepconv_{i + 1}/depthwise"] = (3, 3, cin)
        shapes[f"sepconv_{i + 1}/pointwise"] = (cin, cout)
        shapes[f"sepconv_{i + 1}/bias"] = (cout,)
        shapes[f"bn2d_{i + 1}/gamma"] = (cout,)
        shapes[f"bn2d_{i + 1}/beta"] = (cout,)
        cin = cout
    shapes["head_conv/kernel"] = (3, 3, cin, 1)
    shapes["head_conv/bias"] = (1,)
    if config.out_size == 1:
        shapes["head_fc/kernel"] = (config.head_size**2, 1)
    return shapes


def stat_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(config.conv3d_blocks):
        shapes[f"bn3d_{i + 1}/moving_mean"] = (config.conv3d_filters,)
        shapes[f"bn3d_{i + 1}/moving_var"] = (config.conv3d_filters,)
    for i, cout in enumerate(config.sep_filters):
        shapes[f"bn2d_{i + 1}/moving_mean"] = (cout,)
        shapes[f"bn2d_{i + 1}/moving_var"] = (cout,)
    return shapes


def count_params(config: ModelConfig) -> dict[str, int]:
    """Trainable parameters per layer (kernel + bias, or BN gain + shift) and ``total``."""
    counts: dict[str, int] = {}
    for name, shape in param_shapes(config).items():
        layer = name.split("/")[0]
        counts[layer] = counts.get(layer, 0) + int(np.prod(shape))
    counts["total"] = sum(counts.values())
    return counts


def fc_head_params(in_shape: tuple[int, ...], outputs: int, bias: bool = True) -> int:
    """Trainable weights of a fully connected layer on a flattened ``in_shape`` input."""
    return int(np.prod(in_shape)) * outputs + (outputs if bias else 0)


def layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output shapes (batch axis omitted), derived from the config alone."""
    W, n, f = config.window, config.channels, config.conv3d_filters
    rows = [("input", (W, W, n, 1))]
    for i in range(config.conv3d_blocks):
        rows.append((f"conv3d_{i + 1}", (W, W, n, f)))
        if i > 0:
            rows.append((f"concat_{i}", (W, W, n, f * (i + 1))))
    rows.append(("reshape", (W, W, config.dense_channels * n)))
    width = config.dense_channels * n
    for i, cout in enumerate(config.sep_filters):
        if i in config.dropout_before:
            rows.append((f"dropout_{config.dropout_before.index(i) + 1}", (W, W, width)))
        rows.append((f"sepconv_{i + 1}", (W, W, cout)))
        width = cout
    k = config.head_size
    if config.out_size == 1:
        rows += [("head_conv", (k, k, 1)), ("head_reshape", (k * k, 1)), ("head_fc", (1,))]
    else:
        rows.append(("head_conv", (k, k, 1)))
    return rows


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform kernels, zero biases and shifts, unit gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        kind = name.split("/")[1]
        if kind in ("bias", "beta"):
            params[name] = np.zeros(shape)
        elif kind == "gamma":
            params[name] = np.ones(shape)
        else:
            if kind == "depthwise":
                fan_in = shape[0] * shape[1]
            else:
                fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
    if config.out_size == 1:
        # the FC output is rectified; a positive start keeps it from being dead at init
        params["head_fc/kernel"] = np.abs(params["head_fc/kernel"])
    return params


def init_stats(config: ModelConfig) -> dict[str, np.ndarray]:
    return {
        name: (np.zeros(shape) if name.endswith("mean") else np.ones(shape))
        for name, shape in stat_shapes(config).items()
    }


@dataclass
class ForwardCache:
    steps: list = field(default_factory=list)
    train: bool = False
    dropout_masks: list = field(default_factory=list)
    input_shape: tuple = ()
    trace: list = field(default_factory=list)


class Hyper3DNetReg:
    """Parameters, batch-norm statistics and the forward/backward passes."""

    def __init__(self, config: ModelConfig, params=None, stats=None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.stats = stats if stats is not None else init_stats(config)
        expected = param_shapes(config)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "Hyper3DNetReg":
        return Hyper3DNetReg(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.stats.items()},
        )

    def _bn(self, x, name, train, update_stats):
        p, s, cfg = self.params, self.stats, self.config
        out, cache, mean, var = L.batchnorm_forward(
            x, p[f"{name}/gamma"], p[f"{name}/beta"],
            s[f"{name}/moving_mean"], s[f"{name}/moving_var"],
            train, cfg.bn_momentum, cfg.bn_eps,
        )
        if train and update_stats:
            s[f"{name}/moving_mean"], s[f"{name}/moving_var"] = mean, var
        return out, cache

    def forward(self, x, train=False, rng=None, dropout_masks=None, update_stats=True):
        """Run the network on ``x`` of shape ``(b, W, W, n)`` or ``(b, W, W, n, 1)``.

        Returns ``(prediction, cache)``; predictions are ``(b, N, N)``, or
        ``(b, 1)`` for the single-value head.  Passing ``dropout_masks`` from a
        previous cache replays the same dropout pattern.
        """
        cfg, p = self.config, self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[..., None]
        W, n = cfg.window, cfg.channels
        if x.shape[1:] != (W, W, n, 1):
            raise ValueError(f"input shape {x.shape[1:]} does not match ({W}, {W}, {n}, 1)")
        cache = ForwardCache(train=train, input_shape=x.shape)
        steps, trace = cache.steps, cache.trace
        trace.append(("input", x.shape[1:]))

        stack = None
        h = x
        for i in range(cfg.conv3d_blocks):
            name = f"conv3d_{i + 1}"
            h, c_conv = L.conv_forward(h, p[f"{name}/kernel"], p[f"{name}/bias"], 1)
            h, c_relu = L.relu_forward(h)
            h, c_bn = self._bn(h, f"bn3d_{i + 1}", train, update_stats)
            steps.append(("conv3d", i + 1, c_conv, c_relu, c_bn))
            trace.append((name, h.shape[1:]))
            if stack is None:
                stack = h
            else:
                stack = L.concat(stack, h)
                steps.append(("concat", i, stack.shape[-1] - h.shape[-1]))
                trace.append((f"concat_{i}", stack.shape[1:]))
            h = stack

        pre_reshape = h.shape
        h = h.reshape(h.shape[0], W, W, -1)
        steps.append(("reshape", pre_reshape))
        trace.append(("reshape", h.shape[1:]))

        masks = list(dropout_masks) if dropout_masks is not None else None
        for i, cout in enumerate(cfg.sep_filters):
            if i in cfg.dropout_before:
                if masks is not None:
                    mask = masks.pop(0)
                    h = h if mask is None else h * mask
                else:
                    h, mask = L.dropout_forward(h, cfg.dropout_rate, train, rng)
                cache.dropout_masks.append(mask)
                steps.append(("dropout", mask))
                trace.append((f"dropout_{len(cache.dropout_masks)}", h.shape[1:]))
            name = f"sepconv_{i + 1}"
            h, c_sep = L.sepconv_forward(
                h, p[f"{name}/depthwise"], p[f"{name}/pointwise"], p[f"{name}/bias"], 1
            )
            h, c_relu = L.relu_forward(h)
            h, c_bn = self._bn(h, f"bn2d_{i + 1}", train, update_stats)
            steps.append(("sepconv", i + 1, c_sep, c_relu, c_bn))
            trace.append((name, h.shape[1:]))

        h, c_head = L.conv_forward(h, p["head_conv/kernel"], p["head_conv/bias"], cfg.head_pad)
        h, c_relu = L.relu_forward(h)
        steps.append(("head_conv", c_head, c_relu))
        trace.append(("head_conv", h.shape[1:]))
        if cfg.out_size == 1:
            flat_shape = h.shape
            h = h.reshape(h.shape[0], -1)
            trace.append(("head_reshape", h.shape[1:] + (1,)))
            h, c_fc = L.dense_forward(h, p["head_fc/kernel"], None)
            h, c_relu = L.relu_forward(h)
            steps.append(("head_fc", flat_shape, c_fc, c_relu))
            trace.append(("head_fc", h.shape[1:]))
            return h, cache
        return h[..., 0], cache

    def backward(self, cache: ForwardCache, dout):
        """Gradients of a scalar loss given ``dL/dprediction``.

        Returns ``(grads, dx)`` with ``grads`` keyed like :attr:`params` and
        ``dx`` shaped like the network input.
        """
        cfg = self.config
        grads = {}
        dout = np.asarray(dout, dtype=np.float64)
        steps = list(cache.steps)

        if cfg.out_size == 1:
            _, flat_shape, c_fc, c_relu = steps.pop()
            dh = L.relu_backward(dout, c_relu)
            dh, grads["head_fc/kernel"], _ = L.dense_backward(dh, c_fc)
            dh = dh.reshape(flat_shape)
        else:
            dh = dout[..., None]
        _, c_head, c_relu = steps.pop()
        dh = L.relu_backward(dh, c_relu)
        dh, grads["head_conv/kernel"], grads["head_conv/bias"] = L.conv_backward(dh, c_head)

        dstack = None
        while steps:
            step = steps.pop()
            kind = step[0]
            if kind == "sepconv":
                _, i, c_sep, c_relu, c_bn = step
                dh, grads[f"bn2d_{i}/gamma"], grads[f"bn2d_{i}/beta"] = L.batchnorm_backward(dh, c_bn)
                dh = L.relu_backward(dh, c_relu)
                dh, dw, pw, db = L.sepconv_backward(dh, c_sep)
                grads[f"sepconv_{i}/depthwise"] = dw
                grads[f"sepconv_{i}/pointwise"] = pw
                grads[f"sepconv_{i}/bias"] = db
            elif kind == "dropout":
                dh = L.dropout_backward(dh, step[1])
            elif kind == "reshape":
                dstack = dh.reshape(step[1])
            elif kind == "concat":
                # gradient w.r.t. the running stack before this join, plus the newest block
                split = step[2]
                dblock = dstack[..., split:]
                dstack = dstack[..., :split].copy()
                steps_block = steps.pop()
                dprev = self._conv3d_block_backward(steps_block, dblock, grads)
                dstack += dprev
            elif kind == "conv3d":
                dh = self._conv3d_block_backward(step, dstack, grads)
                dstack = None
        grads = {name: grads[name] for name in self.params}
        return grads, dh

    def _conv3d_block_backward(self, step, dh, grads):
        _, i, c_conv, c_relu, c_bn = step
        dh, grads[f"bn3d_{i}/gamma"], grads[f"bn3d_{i}/beta"] = L.batchnorm_backward(dh, c_bn)
        dh = L.relu_backward(dh, c_relu)
        dh, grads[f"conv3d_{i}/kernel"], grads[f"conv3d_{i}/bias"] = L.conv_backward(dh, c_conv)
        return dh

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode predictions, chunked over the batch axis."""
        x = np.asarray(x, dtype=np.float64)
        outs = [self.forward(x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
        if not outs:
            shape = (0, 1) if self.config.out_size == 1 else (0,) + (self.config.out_size,) * 2
            return np.zeros(shape)
        return np.concatenate(outs)

    def predict_patches(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode predictions always shaped ``(b, N, N)``."""
        out = self.predict(x, batch_size)
        n = self.config.out_size
        return out.reshape(len(out), n, n)
