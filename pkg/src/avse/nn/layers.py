"""Stateful layers with cached activations for reverse-mode differentiation."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F


class BackwardBeforeForward(RuntimeError):
    pass


class Layer:
    """Base layer.

    ``params`` maps names to trainable arrays; ``grads`` holds the matching
    gradients after :meth:`backward`. ``buffers`` are persistent non-trainable
    arrays (batchnorm running statistics).
    """

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k, v in store.items():
                store[k] = v.astype(dtype)
        self.grads = {}
        return self

    def output_shape(self, shape):
        return shape

    def __repr__(self):
        return f"{type(self).__name__}()"


def he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels, filters, kernel, stride=(1, 1), rng=None, dtype=np.float32):
        super().__init__()
        kernel = _pair(kernel)
        self.stride = _pair(stride)
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel[0] * kernel[1]
        self.params["w"] = he_uniform(rng, (filters, in_channels) + kernel, fan_in, dtype)
        self.params["b"] = np.zeros(filters, dtype)
        # Input layers may skip the (unused) input gradient during training.
        self.input_grad = True

    def forward(self, x, train=False):
        y, cache = F.conv2d_forward(x, self.params["w"], self.params["b"], self.stride)
        self._cache = cache
        return y

    def backward(self, dy):
        dx, dw, db = F.conv2d_backward(
            dy, self.params["w"], self.stride, self._take_cache(), self.input_grad
        )
        self.grads = {"w": dw, "b": db}
        return dx

    def output_shape(self, shape):
        c, h, w = shape
        return (
            self.params["w"].shape[0],
            math.ceil(h / self.stride[0]),
            math.ceil(w / self.stride[1]),
        )

    def __repr__(self):
        f, c, kh, kw = self.params["w"].shape
        return f"Conv2D({c}->{f}, kernel={kh}x{kw}, stride={self.stride[0]}x{self.stride[1]})"


class Conv2DTranspose(Layer):
    kind = "conv_transpose"

    def __init__(self, in_channels, filters, kernel, stride=(1, 1), rng=None, dtype=np.float32):
        super().__init__()
        kernel = _pair(kernel)
        self.stride = _pair(stride)
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel[0] * kernel[1]
        self.params["w"] = he_uniform(rng, (in_channels, filters) + kernel, fan_in, dtype)
        self.params["b"] = np.zeros(filters, dtype)

    def forward(self, x, train=False):
        y, cache = F.conv2d_transpose_forward(x, self.params["w"], self.params["b"], self.stride)
        self._cache = cache
        return y

    def backward(self, dy):
        dx, dw, db = F.conv2d_transpose_backward(
            dy, self.params["w"], self.stride, self._take_cache()
        )
        self.grads = {"w": dw, "b": db}
        return dx

    def output_shape(self, shape):
        c, h, w = shape
        return (self.params["w"].shape[1], h * self.stride[0], w * self.stride[1])

    def __repr__(self):
        c, f, kh, kw = self.params["w"].shape
        return (
            f"Conv2DTranspose({c}->{f}, kernel={kh}x{kw}, "
            f"stride={self.stride[0]}x{self.stride[1]})"
        )


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["w"] = he_uniform(rng, (out_features, in_features), in_features, dtype)
        self.params["b"] = np.zeros(out_features, dtype)

    def forward(self, x, train=False):
        self._cache = x
        return F.dense(x, self.params["w"], self.params["b"])

    def backward(self, dy):
        dx, dw, db = F.dense_backward(dy, self._take_cache(), self.params["w"])
        self.grads = {"w": dw, "b": db}
        return dx

    def output_shape(self, shape):
        return (self.params["w"].shape[0],)

    def __repr__(self):
        out, inp = self.params["w"].shape
        return f"Dense({inp}->{out})"


class BatchNorm(Layer):
    """Batch normalisation over the batch (and spatial) axes, per channel.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.99, eps=1e-3, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def forward(self, x, train=False):
        g, b = self.params["gamma"], self.params["beta"]
        if not train:
            self._cache = ("infer", x)
            return F.batchnorm_infer(
                x, g, b, self.buffers["running_mean"], self.buffers["running_var"], self.eps
            ).astype(x.dtype, copy=False)
        y, mean, var, cache = F.batchnorm_train(x, g, b, self.eps)
        m = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        self.buffers["running_mean"] = (m * rm + (1 - m) * mean).astype(rm.dtype)
        self.buffers["running_var"] = (m * rv + (1 - m) * var).astype(rv.dtype)
        self._cache = ("train", cache)
        return y.astype(x.dtype, copy=False)

    def backward(self, dy):
        mode, cache = self._take_cache()
        g = self.params["gamma"]
        if mode == "infer":
            x = cache
            axes = (0,) if dy.ndim == 2 else (0, 2, 3)
            shape = (1, -1) if dy.ndim == 2 else (1, -1, 1, 1)
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"].reshape(shape)) * inv_std.reshape(shape)
            self.grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
            return (dy * (g * inv_std).reshape(shape)).astype(dy.dtype, copy=False)
        dx, dg, db = F.batchnorm_backward(dy, g, cache)
        self.grads = {"gamma": dg, "beta": db}
        return dx

    def __repr__(self):
        return f"BatchNorm({self.params['gamma'].shape[0]})"


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        self._cache = x >= 0
        return F.leaky_relu(x, self.slope)

    def backward(self, dy):
        return F.leaky_relu_backward(dy, self._take_cache(), self.slope)

    def __repr__(self):
        return f"LeakyReLU({self.slope})"


class MaxPool2(Layer):
    def forward(self, x, train=False):
        y, self._cache = F.maxpool2_forward(x)
        return y

    def backward(self, dy):
        return F.maxpool2_backward(dy, self._take_cache())

    def output_shape(self, shape):
        c, h, w = shape
        return (c, h // 2, w // 2)


class Dropout(Layer):
    """Inverted dropout; the identity outside training."""

    def __init__(self, rate, rng=None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._cache = (None,)
            return x
        mask = F.dropout_mask(x.shape, self.rate, self.rng, x.dtype.type)
        self._cache = (mask,)
        return x * mask

    def backward(self, dy):
        (mask,) = self._take_cache()
        return dy if mask is None else dy * mask

    def __repr__(self):
        return f"Dropout({self.rate})"


class Flatten(Layer):
    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._take_cache())

    def output_shape(self, shape):
        return self.shape


class Sequential(Layer):
    """Layers applied in order; ``backward`` replays them in reverse."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def trace_shapes(self, shape):
        """Per-layer output shapes (without batch axis) for an input ``shape``."""
        out = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append((layer, shape))
        return out

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            name = f"{prefix}{i}"
            if isinstance(layer, Sequential):
                yield from layer.named_layers(name + ".")
            else:
                yield name, layer

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def __repr__(self):
        inner = "\n".join(f"  {layer!r}" for layer in self.layers)
        return f"Sequential(\n{inner}\n)"


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    return tuple(int(a) for a in v)
