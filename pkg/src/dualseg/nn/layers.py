"""Layers with hand-written reverse-mode gradients.

Tensors are ``(N, C, D, H, W)`` float64 arrays. Each layer caches what its
backward pass needs during ``forward`` and accumulates parameter gradients
into ``self.grads`` on every ``backward`` call.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from ..errors import StateError
from ..sdt import logistic


class Layer:
    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def _add_param(self, name: str, value: np.ndarray):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class Conv3d(Layer):
    """Cubic-kernel convolution (cross-correlation) with zero padding."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, pad: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k ** 3
        self._add_param("weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k)))
        self._add_param("bias", np.zeros(cout))

    def _out_dims(self, dims):
        return tuple((n + 2 * self.pad - self.k) // self.stride + 1 for n in dims)

    def _windows(self, xp, out):
        s, (do, ho, wo) = self.stride, out
        for a in range(self.k):
            for b in range(self.k):
                for c in range(self.k):
                    yield (a, b, c), (slice(None), slice(None),
                                      slice(a, a + s * (do - 1) + 1, s),
                                      slice(b, b + s * (ho - 1) + 1, s),
                                      slice(c, c + s * (wo - 1) + 1, s))

    def forward(self, x, train=False):
        n = x.shape[0]
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
        out = self._out_dims(x.shape[2:])
        w = self.params["weight"]
        if self.k == 1 and self.stride == 1:
            cols = xp.transpose(1, 0, 2, 3, 4).reshape(self.cin, -1)
        else:
            cols = np.empty((self.cin, self.k, self.k, self.k, n) + out)
            for (a, b, c), sl in self._windows(xp, out):
                cols[:, a, b, c] = xp[sl].transpose(1, 0, 2, 3, 4)
            cols = cols.reshape(self.cin * self.k ** 3, -1)
        y = w.reshape(self.cout, -1) @ cols
        y += self.params["bias"][:, None]
        self._cache = (x.shape, xp.shape, out, cols)
        return y.reshape((self.cout, n) + out).transpose(1, 0, 2, 3, 4)

    def backward(self, g):
        xshape, xpshape, out, cols = self._need_cache()
        n = xshape[0]
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(self.cout, -1)
        w = self.params["weight"]
        self.grads["weight"] += (g2 @ cols.T).reshape(w.shape)
        self.grads["bias"] += g2.sum(axis=1)
        if self.k == 1 and self.stride == 1:
            dxp = (w.reshape(self.cout, -1).T @ g2).reshape((self.cin, n) + out)
        else:
            # channel-major accumulation, one small product per kernel offset
            g5 = g2.reshape((self.cout, n) + out)
            dxp = np.zeros((self.cin, n) + tuple(xpshape[2:]))
            for (a, b, c), sl in self._windows(None, out):
                dxp[sl] += np.tensordot(w[:, :, a, b, c], g5, axes=(0, 0))
        p = self.pad
        if p:
            dxp = dxp[:, :, p:-p, p:-p, p:-p]
        return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3, 4))


class InstanceNorm3d(Layer):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self._add_param("gamma", np.ones(channels))
        self._add_param("beta", np.zeros(channels))

    def forward(self, x, train=False):
        mu = x.mean(axis=(2, 3, 4), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(2, 3, 4), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.params["gamma"][None, :, None, None, None] + self.params["beta"][None, :, None, None, None]

    def backward(self, g):
        xhat, inv = self._need_cache()
        self.grads["gamma"] += (g * xhat).sum(axis=(0, 2, 3, 4))
        self.grads["beta"] += g.sum(axis=(0, 2, 3, 4))
        dxhat = g * self.params["gamma"][None, :, None, None, None]
        m = dxhat.mean(axis=(2, 3, 4), keepdims=True)
        mx = (dxhat * xhat).mean(axis=(2, 3, 4), keepdims=True)
        return inv * (dxhat - m - xhat * mx)


class ReLU(Layer):
    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._need_cache()


class Sigmoid(Layer):
    def forward(self, x, train=False):
        y = logistic(x)
        self._cache = y
        return y

    def backward(self, g):
        y = self._need_cache()
        return g * y * (1.0 - y)


class Dropout(Layer):
    """Inverted dropout; identity outside training mode."""

    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._cache = None
            self._passthrough = True
            return x
        keep = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self._cache = keep
        self._passthrough = False
        return x * keep

    def backward(self, g):
        if getattr(self, "_passthrough", None) is None:
            raise StateError("Dropout.backward called before forward")
        return g if self._passthrough else g * self._cache


def _upsample_matrix(n: int, factor: int = 2) -> np.ndarray:
    # half-pixel aligned linear interpolation, clamped at the edges
    m = n * factor
    src = np.clip((np.arange(m) + 0.5) / factor - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - i0
    u = np.zeros((m, n))
    np.add.at(u, (np.arange(m), i0), 1.0 - w)
    np.add.at(u, (np.arange(m), i1), w)
    return u


class TrilinearUpsample(Layer):
    """Separable x2 trilinear upsampling; backward applies the transposed operators."""

    def forward(self, x, train=False):
        mats = [_upsample_matrix(n) for n in x.shape[2:]]
        self._cache = mats
        for axis, u in zip((2, 3, 4), mats):
            x = np.moveaxis(np.moveaxis(x, axis, -1) @ u.T, -1, axis)
        return np.ascontiguousarray(x)

    def backward(self, g):
        mats = self._need_cache()
        for axis, u in zip((2, 3, 4), mats):
            g = np.moveaxis(np.moveaxis(g, axis, -1) @ u, -1, axis)
        return np.ascontiguousarray(g)


class SliceHead(Layer):
    """In-plane average pooling followed by a per-slice logistic classifier.

    ``(N, C, D, H, W) -> (N, D)`` probabilities.
    """

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self._add_param("weight", rng.normal(0.0, np.sqrt(1.0 / channels), size=channels))
        self._add_param("bias", np.zeros(1))

    def forward(self, x, train=False):
        pooled = x.mean(axis=(3, 4))  # (N, C, D)
        logits = np.einsum("ncd,c->nd", pooled, self.params["weight"]) + self.params["bias"][0]
        prob = logistic(logits)
        self._cache = (x.shape, pooled, prob)
        return prob

    def backward(self, g):
        shape, pooled, prob = self._need_cache()
        gl = g * prob * (1.0 - prob)
        self.grads["weight"] += np.einsum("nd,ncd->c", gl, pooled)
        self.grads["bias"] += gl.sum()
        gp = np.einsum("nd,c->ncd", gl, self.params["weight"]) / (shape[3] * shape[4])
        return np.broadcast_to(gp[:, :, :, None, None], shape).copy()
