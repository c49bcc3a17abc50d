"""Minimal layers with hand-written backward passes.

Activations are NHWC.  Each layer caches what its backward pass needs on
the most recent forward call, so a layer instance is not re-entrant.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    params: tuple[str, ...] = ()

    def forward(self, x, p):
        raise NotImplementedError

    def backward(self, dout, p, grads):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name, in_channels, out_channels, kernel=(3, 3), stride=1, padding=1,
                 input_grad=True):
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = tuple(kernel), stride, padding
        self.input_grad = input_grad
        self.params = (f"{name}.weight", f"{name}.bias")

    def weight_shape(self):
        kh, kw = self.kernel
        return (kh, kw, self.in_channels, self.out_channels)

    def output_hw(self, h, w):
        kh, kw = self.kernel
        s, pad = self.stride, self.padding
        return (h + 2 * pad - kh) // s + 1, (w + 2 * pad - kw) // s + 1

    def _wmat(self, weight):
        kh, kw, c, o = weight.shape
        return weight.transpose(2, 0, 1, 3).reshape(c * kh * kw, o)

    def forward(self, x, p):
        weight, bias = p[self.params[0]], p[self.params[1]]
        b, h, w, c = x.shape
        kh, kw = self.kernel
        s, pad = self.stride, self.padding
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        ho, wo = self.output_hw(h, w)
        view = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = view.reshape(b * ho * wo, c * kh * kw)
        out = cols @ self._wmat(weight) + bias
        self._cache = (cols, x.shape, xp.shape)
        return out.reshape(b, ho, wo, self.out_channels)

    def backward(self, dout, p, grads):
        weight = p[self.params[0]]
        cols, xshape, xpshape = self._cache
        b, ho, wo, o = dout.shape
        kh, kw = self.kernel
        s, pad = self.stride, self.padding
        d = dout.reshape(-1, o)
        dw = cols.T @ d
        c = self.in_channels
        grads[self.params[0]] = dw.reshape(c, kh, kw, o).transpose(1, 2, 0, 3)
        grads[self.params[1]] = d.sum(axis=0, dtype=np.float64).astype(d.dtype)
        self._cache = None
        if not self.input_grad:
            return None
        dcols = (d @ self._wmat(weight).T).reshape(b, ho, wo, c, kh, kw)
        dxp = np.zeros(xpshape, dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., i, j]
        _, h, w, _ = xshape
        return dxp[:, pad:pad + h, pad:pad + w, :]


class ReLU(Layer):
    def forward(self, x, p):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout, p, grads):
        return np.where(self._mask, dout, 0).astype(dout.dtype, copy=False)


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    def __init__(self, size=2):
        self.size = size

    def forward(self, x, p):
        k = self.size
        b, h, w, c = x.shape
        h2, w2 = h // k, w // k
        win = (x[:, :h2 * k, :w2 * k, :]
               .reshape(b, h2, k, w2, k, c)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(b, h2, w2, c, k * k))
        idx = win.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout, p, grads):
        k = self.size
        idx, (b, h, w, c) = self._cache
        h2, w2 = h // k, w // k
        dwin = np.zeros((b, h2, w2, c, k * k), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros((b, h, w, c), dtype=dout.dtype)
        dx[:, :h2 * k, :w2 * k, :] = (dwin.reshape(b, h2, w2, c, k, k)
                                      .transpose(0, 1, 4, 2, 5, 3)
                                      .reshape(b, h2 * k, w2 * k, c))
        return dx


class GlobalAvgPool(Layer):
    def forward(self, x, p):
        self._shape = x.shape
        return x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)

    def backward(self, dout, p, grads):
        b, h, w, c = self._shape
        return np.broadcast_to((dout / (h * w))[:, None, None, :], self._shape).astype(dout.dtype)


class Dense(Layer):
    def __init__(self, name, in_features, out_features):
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.params = (f"{name}.weight", f"{name}.bias")

    def weight_shape(self):
        return (self.in_features, self.out_features)

    def forward(self, x, p):
        self._x = x
        return x @ p[self.params[0]] + p[self.params[1]]

    def backward(self, dout, p, grads):
        grads[self.params[0]] = self._x.T @ dout
        grads[self.params[1]] = dout.sum(axis=0, dtype=np.float64).astype(dout.dtype)
        return dout @ p[self.params[0]].T
