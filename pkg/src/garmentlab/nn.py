"""Minimal neural network layers in numpy with hand-written backprop.

Layers use channels-last (N, H, W, C) layout so that every convolution
reduces to one large 2-D matmul, which numpy hands to BLAS; batched 3-D
matmul falls off the fast path, so it is avoided throughout. Each layer
keeps whatever forward cache its own backward pass needs. Parameters
default to float32; every layer also runs in float64, which is what the
finite-difference tests use.

The default activation is ELU rather than a hard rectifier: it behaves the
same in practice but is continuously differentiable, so numeric gradient
checks converge cleanly.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse
from numpy.lib.stride_tricks import sliding_window_view


class Param:
    """A weight array and its gradient accumulator."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data: np.ndarray, name: str = ""):
        self.data = data
        self.grad = np.zeros_like(data)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    def params(self) -> list:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """k x k convolution on (N, H, W, C): window gather + one sgemm."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1,
                 pad: int | None = None, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "conv"):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = (k - 1) // 2 if pad is None else pad
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = Param(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype),
                       name + ".w")
        self.b = Param(np.zeros(cout, dtype=dtype), name + ".b")
        self._idx_cache: dict = {}
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def _wmat(self):
        # columns ordered (cin, ky, kx) to match the window gather below
        return np.ascontiguousarray(
            self.w.data.transpose(1, 2, 3, 0).reshape(-1, self.cout))

    def _scatter_indices(self, hp, wp, ho, wo):
        key = (hp, wp)
        if key not in self._idx_cache:
            c, k, s = self.cin, self.k, self.stride
            ky, kx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
            ci = np.arange(c)
            base = ((ky[None] * wp + kx[None]) * c
                    + ci[:, None, None]).reshape(-1)          # (c*k*k,)
            oy, ox = np.meshgrid(np.arange(ho) * s, np.arange(wo) * s,
                                 indexing="ij")
            start = ((oy * wp + ox) * c).reshape(-1)          # (L,)
            self._idx_cache[key] = (start[:, None] + base[None, :]).ravel()
        return self._idx_cache[key]

    def forward(self, x):
        n, h, w, c = x.shape
        k, s, p = self.k, self.stride, self.pad
        if k == 1 and s == 1 and p == 0:
            cols = x.reshape(-1, c)
            out = cols @ self._wmat() + self.b.data
            self._cache = ("1x1", cols, (n, h, w))
            return out.reshape(n, h, w, self.cout)
        xpad = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        hp, wp = h + 2 * p, w + 2 * p
        ho = (hp - k) // s + 1
        wo = (wp - k) // s + 1
        win = sliding_window_view(xpad, (k, k), axis=(1, 2))[:, ::s, ::s]
        cols = np.ascontiguousarray(win).reshape(n * ho * wo, c * k * k)
        out = cols @ self._wmat() + self.b.data
        self._cache = ("gen", cols, (n, h, w, hp, wp, ho, wo))
        return out.reshape(n, ho, wo, self.cout)

    def backward(self, gy):
        kind, cols, meta = self._cache
        gy2 = gy.reshape(-1, self.cout)
        gw = cols.T @ gy2                                    # (ckk, cout)
        self.w.grad += gw.reshape(self.cin, self.k, self.k, self.cout) \
            .transpose(3, 0, 1, 2)
        self.b.grad += gy2.sum(axis=0)
        gcols = gy2 @ self._wmat().T                         # (nL, ckk)
        if kind == "1x1":
            n, h, w = meta
            return np.ascontiguousarray(gcols.reshape(n, h, w, self.cin))
        n, h, w, hp, wp, ho, wo = meta
        idx = self._scatter_indices(hp, wp, ho, wo)
        size = hp * wp * self.cin
        per = gcols.reshape(n, -1)
        gx = np.empty((n, hp, wp, self.cin), dtype=gy.dtype)
        for i in range(n):
            gx[i] = np.bincount(idx, weights=per[i],
                                minlength=size).reshape(hp, wp, self.cin)
        p = self.pad
        if p:
            gx = gx[:, p:-p, p:-p, :]
        return np.ascontiguousarray(gx)


class ELU(Layer):
    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha
        self._cache = None

    def forward(self, x):
        neg = x < 0
        y = np.where(neg, self.alpha * np.expm1(np.minimum(x, 0.0)), x)
        self._cache = (neg, y)
        return y

    def backward(self, gy):
        neg, y = self._cache
        return gy * np.where(neg, y + self.alpha, 1.0)


class Bilinear(Layer):
    """Resize (N, H, W, C) to a fixed (out_h, out_w) with bilinear weights.

    The map is linear, so backward is multiplication by the transpose of the
    same sparse matrix.
    """

    def __init__(self, out_h: int, out_w: int):
        self.out_h, self.out_w = out_h, out_w
        self._mat_cache: dict = {}
        self._cache = None

    def _matrix(self, h, w, dtype):
        key = (h, w, np.dtype(dtype).str)
        if key in self._mat_cache:
            return self._mat_cache[key]
        oy = (np.arange(self.out_h) + 0.5) * h / self.out_h - 0.5
        ox = (np.arange(self.out_w) + 0.5) * w / self.out_w - 0.5
        y0 = np.clip(np.floor(oy).astype(int), 0, h - 1)
        x0 = np.clip(np.floor(ox).astype(int), 0, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = np.clip(oy - y0, 0.0, 1.0)
        wx = np.clip(ox - x0, 0.0, 1.0)
        rows, cols, vals = [], [], []
        out_idx = np.arange(self.out_h * self.out_w).reshape(self.out_h,
                                                             self.out_w)
        for sy, yy in ((1 - wy, y0), (wy, y1)):
            for sx, xx in ((1 - wx, x0), (wx, x1)):
                rows.append(out_idx.ravel())
                cols.append((yy[:, None] * w + xx[None, :]).ravel())
                vals.append((sy[:, None] * sx[None, :]).ravel())
        m = scipy.sparse.csr_matrix(
            (np.concatenate(vals).astype(dtype),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.out_h * self.out_w, h * w))
        self._mat_cache[key] = (m, m.T.tocsr())
        return self._mat_cache[key]

    def forward(self, x):
        n, h, w, c = x.shape
        m, _ = self._matrix(h, w, x.dtype)
        out = np.empty((n, self.out_h * self.out_w, c), dtype=x.dtype)
        flat = x.reshape(n, h * w, c)
        for i in range(n):
            out[i] = m @ flat[i]
        self._cache = (n, h, w, c)
        return out.reshape(n, self.out_h, self.out_w, c)

    def backward(self, gy):
        n, h, w, c = self._cache
        _, mt = self._matrix(h, w, gy.dtype)
        flat = gy.reshape(n, -1, c)
        gx = np.empty((n, h * w, c), dtype=gy.dtype)
        for i in range(n):
            gx[i] = mt @ flat[i]
        return gx.reshape(n, h, w, c)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for lay in self.layers:
            out.extend(lay.params())
        return out

    def forward(self, x):
        for lay in self.layers:
            x = lay.forward(x)
        return x

    def backward(self, gy):
        for lay in reversed(self.layers):
            gy = lay.backward(gy)
        return gy


class Adam:
    """Adam with optional L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= upd.astype(p.data.dtype)


def flatten_params(params) -> tuple[list, np.ndarray]:
    """(layout, flat float32 vector) over params in registration order."""
    layout = [{"name": p.name, "shape": list(p.data.shape)} for p in params]
    if params:
        flat = np.concatenate([p.data.astype(np.float32).ravel()
                               for p in params])
    else:
        flat = np.zeros(0, dtype=np.float32)
    return layout, flat


def load_flat(params, layout, flat: np.ndarray) -> None:
    """Restore a flat vector produced by flatten_params."""
    if len(layout) != len(params):
        raise ValueError(f"layout has {len(layout)} entries for "
                         f"{len(params)} params")
    off = 0
    for p, ent in zip(params, layout):
        shape = tuple(ent["shape"])
        if shape != p.data.shape:
            raise ValueError(f"shape mismatch for {p.name}: "
                             f"{shape} vs {p.data.shape}")
        n = int(np.prod(shape)) if shape else 1
        p.data[...] = flat[off:off + n].reshape(shape).astype(p.data.dtype)
        off += n
    if off != flat.size:
        raise ValueError(f"flat vector length {flat.size}, consumed {off}")


def numeric_gradient(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, for tests."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = fn()
        x[i] = orig - step
        lo = fn()
        x[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
        it.iternext()
    return g
