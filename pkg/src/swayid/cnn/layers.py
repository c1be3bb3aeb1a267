"""Network layers operating on single examples.

Images are (height, width, channels) arrays; dense layers take flat
vectors. Each layer keeps the forward cache needed for its backward pass
and accumulates parameter gradients across a mini-batch; step() consumers
read .params / .grads pairs. Convolutions are evaluated as one GEMM per
image over an im2col buffer, which keeps every working array small enough
to stay cache-resident.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


class Layer:
    params: list
    grads: list

    def __init__(self):
        self.params = []
        self.grads = []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0.0

    def out_shape(self, in_shape):
        raise NotImplementedError


def _init_uniform(rng, shape, fan_in, dtype):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    """3x3 (or kxk) convolution, stride 1, zero padding preserving size."""

    def __init__(self, in_shape, filters, kernel=3, rng=None, dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ConfigError("convolution kernel must be odd")
        h, w, c = in_shape
        self.h, self.w, self.c = h, w, c
        self.k = kernel
        self.filters = filters
        self.pad = kernel // 2
        fan_in = kernel * kernel * c
        self.weight = _init_uniform(rng, (fan_in, filters), fan_in, dtype)
        self.bias = np.zeros(filters, dtype=dtype)
        self.params = [self.weight, self.bias]
        self.grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]
        self._xp = np.zeros((h + 2 * self.pad, w + 2 * self.pad, c), dtype)
        self._cols = np.zeros((h * w, fan_in), dtype)

    def out_shape(self, in_shape):
        return (self.h, self.w, self.filters)

    def _fill_cols(self, xp):
        k, h, w, c = self.k, self.h, self.w, self.c
        for i in range(k):
            for j in range(k):
                idx = (i * k + j) * c
                self._cols[:, idx:idx + c] = xp[i:i + h, j:j + w, :].reshape(-1, c)

    def forward(self, x, train=False):
        if x.shape != (self.h, self.w, self.c):
            raise ConfigError(f"conv input shape {x.shape} != {(self.h, self.w, self.c)}")
        p = self.pad
        self._xp[p:p + self.h, p:p + self.w, :] = x
        self._fill_cols(self._xp)
        y = self._cols @ self.weight
        y += self.bias
        return y.reshape(self.h, self.w, self.filters)

    def backward(self, dy):
        # consumes the cols buffer of the most recent forward, so backward
        # must run before the next training forward of this layer
        dyf = dy.reshape(-1, self.filters)
        self.grads[0] += self._cols.T @ dyf
        self.grads[1] += dyf.sum(axis=0)
        dcols = dyf @ self.weight.T
        k, h, w, c, p = self.k, self.h, self.w, self.c, self.pad
        dxp = np.zeros_like(self._xp)
        for i in range(k):
            for j in range(k):
                idx = (i * k + j) * c
                dxp[i:i + h, j:j + w, :] += dcols[:, idx:idx + c].reshape(h, w, c)
        return dxp[p:p + h, p:p + w, :]


class Relu(Layer):
    def __init__(self):
        super().__init__()

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False):
        y = np.maximum(x, 0)
        if train:
            self._mask = x > 0
        return y

    def backward(self, dy):
        return dy * self._mask


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; trailing odd rows/columns dropped."""

    def __init__(self, in_shape, size=2):
        super().__init__()
        h, w, c = in_shape
        self.size = size
        self.h, self.w, self.c = h, w, c
        self.oh, self.ow = h // size, w // size

    def out_shape(self, in_shape):
        return (self.oh, self.ow, self.c)

    def forward(self, x, train=False):
        s = self.size
        view = x[: self.oh * s, : self.ow * s, :]
        blocks = view.reshape(self.oh, s, self.ow, s, self.c).transpose(0, 2, 1, 3, 4)
        flat = blocks.reshape(self.oh, self.ow, s * s, self.c)
        if train:
            self._argmax = flat.argmax(axis=2)
        return flat.max(axis=2)

    def backward(self, dy):
        s = self.size
        dflat = np.zeros((self.oh, self.ow, s * s, self.c), dy.dtype)
        np.put_along_axis(dflat, self._argmax[:, :, None, :], dy[:, :, None, :], axis=2)
        dview = dflat.reshape(self.oh, self.ow, s, s, self.c).transpose(0, 2, 1, 3, 4)
        dx = np.zeros((self.h, self.w, self.c), dy.dtype)
        dx[: self.oh * s, : self.ow * s, :] = dview.reshape(self.oh * s, self.ow * s, self.c)
        return dx


class Flatten(Layer):
    def __init__(self, in_shape):
        super().__init__()
        self.in_shape = in_shape
        self.n = int(np.prod(in_shape))

    def out_shape(self, in_shape):
        return (self.n,)

    def forward(self, x, train=False):
        return x.reshape(self.n)

    def backward(self, dy):
        return dy.reshape(self.in_shape)


class Dense(Layer):
    def __init__(self, in_shape, units, rng=None, dtype=np.float32):
        super().__init__()
        (n,) = in_shape
        self.n = n
        self.units = units
        self.weight = _init_uniform(rng, (n, units), n, dtype)
        self.bias = np.zeros(units, dtype=dtype)
        self.params = [self.weight, self.bias]
        self.grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]

    def out_shape(self, in_shape):
        return (self.units,)

    def forward(self, x, train=False):
        if train:
            self._x = x
        return x @ self.weight + self.bias

    def backward(self, dy):
        self.grads[0] += np.outer(self._x, dy)
        self.grads[1] += dy
        return dy @ self.weight.T
