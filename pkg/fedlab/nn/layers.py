"""
Layers with hand-written backward passes. Every layer works on float arrays
whose first axis is the batch.
"""

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view as _windows

from fedlab.errors import ShapeError
from fedlab.nn.base import Layer, uniform_fan_in

__all__ = ["Dense", "Conv2D", "AvgPool2D", "ReLU", "Sigmoid", "Rescale", "Reshape"]


class Dense(Layer):
    """Affine map ``y = x W + b``

    Parameters
    ----------
    name : str

    units : int
        output width

    """

    def __init__(self, name: str, units: int):
        super().__init__(name)
        if type(units) is not int or units < 1:
            raise TypeError
        self._units = units

    @property
    def units(self):
        return self._units

    def _fan_in(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeError(
                "{} expects flat input, got {}".format(self.name, input_shape)
            )
        return input_shape[0]

    def param_shapes(self, input_shape):
        fan_in = self._fan_in(input_shape)
        return [("weight", (fan_in, self._units)), ("bias", (self._units,))]

    def init_params(self, input_shape, rng):
        fan_in = self._fan_in(input_shape)
        return {
            "weight": uniform_fan_in(rng, (fan_in, self._units), fan_in),
            "bias": np.zeros(self._units),
        }

    def output_shape(self, input_shape):
        self._fan_in(input_shape)
        return (self._units,)

    def forward(self, params, x):
        return x @ params["weight"] + params["bias"], x

    def backward(self, params, cache, dy):
        x = cache
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ params["weight"].T, grads


class Conv2D(Layer):
    """Stride-1 2-D convolution with zero padding, channels-first

    Parameters
    ----------
    name : str

    filters : int

    kernel : int, default 3

    padding : int, default kernel // 2

    """

    def __init__(self, name: str, filters: int, kernel: int = 3, padding: int = None):
        super().__init__(name)
        if type(filters) is not int or type(kernel) is not int:
            raise TypeError
        self._filters = filters
        self._kernel = kernel
        self._padding = kernel // 2 if padding is None else int(padding)

    def _dims(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(
                "{} expects (channels, height, width), got {}".format(
                    self.name, input_shape
                )
            )
        channels, height, width = input_shape
        out_h = height + 2 * self._padding - self._kernel + 1
        out_w = width + 2 * self._padding - self._kernel + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError("{}: kernel larger than padded input".format(self.name))
        return channels, out_h, out_w

    def param_shapes(self, input_shape):
        channels, _, _ = self._dims(input_shape)
        k = self._kernel
        return [("weight", (self._filters, channels, k, k)), ("bias", (self._filters,))]

    def init_params(self, input_shape, rng):
        channels, _, _ = self._dims(input_shape)
        k = self._kernel
        fan_in = channels * k * k
        return {
            "weight": uniform_fan_in(rng, (self._filters, channels, k, k), fan_in),
            "bias": np.zeros(self._filters),
        }

    def output_shape(self, input_shape):
        _, out_h, out_w = self._dims(input_shape)
        return (self._filters, out_h, out_w)

    def forward(self, params, x):
        p, k = self._padding, self._kernel
        batch, channels, height, width = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (B, C, OH, OW, k, k) -> rows of receptive fields
        windows = _windows(xp, (k, k), axis=(2, 3))
        out_h, out_w = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
            batch * out_h * out_w, channels * k * k
        )
        kernel = params["weight"].reshape(self._filters, -1)
        y = cols @ kernel.T + params["bias"]
        y = y.reshape(batch, out_h, out_w, self._filters).transpose(0, 3, 1, 2)
        return y, (cols, x.shape)

    def backward(self, params, cache, dy):
        cols, x_shape = cache
        p, k = self._padding, self._kernel
        batch, channels, height, width = x_shape
        out_h, out_w = dy.shape[2], dy.shape[3]
        d = dy.transpose(0, 2, 3, 1).reshape(-1, self._filters)
        kernel = params["weight"].reshape(self._filters, -1)
        grads = {
            "weight": (d.T @ cols).reshape(params["weight"].shape),
            "bias": d.sum(axis=0),
        }
        dcols = (d @ kernel).reshape(batch, out_h, out_w, channels, k, k)
        dxp = np.zeros((batch, channels, height + 2 * p, width + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + out_h, j : j + out_w] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + height, p : p + width], grads


class AvgPool2D(Layer):
    """Non-overlapping average pooling over square windows"""

    def __init__(self, name: str, size: int = 2):
        super().__init__(name)
        self._size = size

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError("{} expects channels-first images".format(self.name))
        channels, height, width = input_shape
        if height % self._size or width % self._size:
            raise ShapeError(
                "{}: {}x{} not divisible by {}".format(
                    self.name, height, width, self._size
                )
            )
        return (channels, height // self._size, width // self._size)

    def forward(self, params, x):
        s = self._size
        batch, channels, height, width = x.shape
        y = x.reshape(batch, channels, height // s, s, width // s, s).mean(axis=(3, 5))
        return y, None

    def backward(self, params, cache, dy):
        s = self._size
        dx = np.repeat(np.repeat(dy, s, axis=2), s, axis=3) / (s * s)
        return dx, {}


class ReLU(Layer):
    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, params, x):
        return np.maximum(x, 0), x > 0

    def backward(self, params, cache, dy):
        return dy * cache, {}


class Sigmoid(Layer):
    """Squashes outputs into (0, 1), the data range of every dataset"""

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, params, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, params, cache, dy):
        return dy * cache * (1.0 - cache), {}


class Reshape(Layer):
    """Reinterpret each sample with another shape of the same size"""

    def __init__(self, name: str, shape: Tuple[int, ...]):
        super().__init__(name)
        self._shape = tuple(int(d) for d in shape)

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != int(np.prod(self._shape)):
            raise ShapeError(
                "{}: cannot reshape {} into {}".format(
                    self.name, input_shape, self._shape
                )
            )
        return self._shape

    def forward(self, params, x):
        return x.reshape((x.shape[0],) + self._shape), x.shape

    def backward(self, params, cache, dy):
        return dy.reshape(cache), {}


class Rescale(Layer):
    """Fixed elementwise ``y = scale * x + offset``

    With the defaults, [0, 1] pixels map onto [-1, 1].
    """

    def __init__(self, name: str, scale: float = 2.0, offset: float = -1.0):
        super().__init__(name)
        if scale == 0:
            raise ValueError("scale must be non-zero")
        self._scale = float(scale)
        self._offset = float(offset)

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, params, x):
        return self._scale * x + self._offset, None

    def backward(self, params, cache, dy):
        return self._scale * dy, {}
