"""Hot convolution and pooling kernels.

Two implementations of every kernel live here: numba-compiled patch
gather/scatter loops feeding a single GEMM, and a pure-numpy path built on
strided windows + tensordot.
``MMDISTILL_BACKEND`` selects one at import time (``numba`` or ``numpy``);
the default is numba when it imports cleanly. Both paths are exercised by the
test suite and compared in ``benchmarks/bench_kernels.py``.

All kernels take float64 C-contiguous arrays and return fresh arrays.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAS_NUMBA = False


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, Ci, Ho, Wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_np(x, w, stride, pad):
    co, ci, kh, kw = w.shape
    win = _windows(_pad(x, pad), kh, kw, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Co
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input_np(g, w, x_shape, stride, pad):
    n, ci, h, wd = x_shape
    co, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gx = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            # (N, Co, Ho, Wo) x (Co, Ci) -> (N, Ci, Ho, Wo)
            contrib = np.einsum("nohw,oc->nchw", g, w[:, :, i, j], optimize=True)
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gx)


def conv2d_grad_weight_np(x, g, w_shape, stride, pad):
    co, ci, kh, kw = w_shape
    win = _windows(_pad(x, pad), kh, kw, stride)
    ho, wo = g.shape[2], g.shape[3]
    win = win[:, :, :ho, :wo]
    return np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))


def avgpool2_np(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def upsample2_np(g):
    # adjoint of avgpool2: spread each value over its 2x2 block, scaled by 1/4
    return np.ascontiguousarray(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)


def group_norm_fwd_np(x, gamma, beta, groups, eps):
    n, c = x.shape[:2]
    xg = x.reshape(n, groups, -1)
    xc = xg - xg.mean(axis=2, keepdims=True)
    inv = (np.mean(xc * xc, axis=2, keepdims=True) + eps) ** -0.5
    xhat = (xc * inv).reshape(x.shape)
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, inv[:, :, 0]


def group_norm_bwd_np(gy, xhat, inv, gamma, groups):
    n = gy.shape[0]
    gh = (gy * gamma[None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dx = inv[:, :, None] * (gh - gh.mean(axis=2, keepdims=True)
                            - xh * np.mean(gh * xh, axis=2, keepdims=True))
    return dx.reshape(gy.shape), (gy * xhat).sum(axis=(0, 2, 3)), gy.sum(axis=(0, 2, 3))


def pair_sqdist_sum_np(a, b):
    # single running accumulator in (i, j, k) order; cumsum is strictly sequential
    d = a[:, None, :] - b[None, :, :]
    sq = (d * d).reshape(-1)
    return float(np.cumsum(sq)[-1]) if sq.size else 0.0


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
        # rows: (c, i, j) kernel taps; cols: (b, y, x) output sites; zero padding implicit
        n, ci, h, w = x.shape
        cols = np.zeros((ci * kh * kw, n * ho * wo))
        for c in range(ci):
            for i in range(kh):
                for j in range(kw):
                    r = (c * kh + i) * kw + j
                    for b in range(n):
                        base = b * ho * wo
                        for y in range(ho):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            src = x[b, c, sy]
                            off = base + y * wo
                            for z in range(wo):
                                sx = z * stride + j - pad
                                if 0 <= sx < w:
                                    cols[r, off + z] = src[sx]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, ci, h, w, kh, kw, stride, pad, ho, wo):
        x = np.zeros((n, ci, h, w))
        for c in range(ci):
            for i in range(kh):
                for j in range(kw):
                    r = (c * kh + i) * kw + j
                    for b in range(n):
                        base = b * ho * wo
                        for y in range(ho):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            dst = x[b, c, sy]
                            off = base + y * wo
                            for z in range(wo):
                                sx = z * stride + j - pad
                                if 0 <= sx < w:
                                    dst[sx] += cols[r, off + z]
        return x

    @njit(cache=True)
    def _conv2d_nb(x, w, stride, pad, ho, wo):
        n = x.shape[0]
        co, ci, kh, kw = w.shape
        cols = _im2col_nb(x, kh, kw, stride, pad, ho, wo)
        out = np.dot(w.reshape(co, ci * kh * kw), cols)  # (Co, N*Ho*Wo)
        return np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))

    @njit(cache=True)
    def _conv2d_grad_input_nb(g, w, h, wd, stride, pad):
        n, co, ho, wo = g.shape
        _, ci, kh, kw = w.shape
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        cols = np.dot(np.ascontiguousarray(w.reshape(co, ci * kh * kw).T), g2)
        return _col2im_nb(cols, n, ci, h, wd, kh, kw, stride, pad, ho, wo)

    @njit(cache=True)
    def _conv2d_grad_weight_nb(x, g, kh, kw, stride, pad):
        n, co, ho, wo = g.shape
        ci = x.shape[1]
        cols = _im2col_nb(x, kh, kw, stride, pad, ho, wo)
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        return np.dot(g2, cols.T).reshape(co, ci, kh, kw)

    @njit(cache=True)
    def _group_norm_fwd_nb(x, gamma, beta, groups, eps):
        n, c, h, w = x.shape
        cg = c // groups
        m = cg * h * w
        xhat = np.empty_like(x)
        y = np.empty_like(x)
        inv = np.empty((n, groups))
        for b in range(n):
            for g in range(groups):
                s = 0.0
                for k in range(g * cg, (g + 1) * cg):
                    for i in range(h):
                        for j in range(w):
                            s += x[b, k, i, j]
                mu = s / m
                v = 0.0
                for k in range(g * cg, (g + 1) * cg):
                    for i in range(h):
                        for j in range(w):
                            d = x[b, k, i, j] - mu
                            v += d * d
                iv = (v / m + eps) ** -0.5
                inv[b, g] = iv
                for k in range(g * cg, (g + 1) * cg):
                    gk, bk = gamma[k], beta[k]
                    for i in range(h):
                        for j in range(w):
                            xh = (x[b, k, i, j] - mu) * iv
                            xhat[b, k, i, j] = xh
                            y[b, k, i, j] = xh * gk + bk
        return y, xhat, inv

    @njit(cache=True)
    def _group_norm_bwd_nb(gy, xhat, inv, gamma, groups):
        n, c, h, w = gy.shape
        cg = c // groups
        m = cg * h * w
        dx = np.empty_like(gy)
        dgamma = np.zeros(c)
        dbeta = np.zeros(c)
        for b in range(n):
            for g in range(groups):
                s1 = 0.0
                s2 = 0.0
                for k in range(g * cg, (g + 1) * cg):
                    gk = gamma[k]
                    for i in range(h):
                        for j in range(w):
                            gv = gy[b, k, i, j]
                            xh = xhat[b, k, i, j]
                            gh = gv * gk
                            s1 += gh
                            s2 += gh * xh
                            dgamma[k] += gv * xh
                            dbeta[k] += gv
                m1 = s1 / m
                m2 = s2 / m
                iv = inv[b, g]
                for k in range(g * cg, (g + 1) * cg):
                    gk = gamma[k]
                    for i in range(h):
                        for j in range(w):
                            dx[b, k, i, j] = iv * (gy[b, k, i, j] * gk - m1 - xhat[b, k, i, j] * m2)
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _avgpool2_nb(x):
        n, c, h, w = x.shape
        out = np.empty((n, c, h // 2, w // 2))
        for b in range(n):
            for k in range(c):
                for y in range(h // 2):
                    for z in range(w // 2):
                        out[b, k, y, z] = 0.25 * (
                            x[b, k, 2 * y, 2 * z] + x[b, k, 2 * y, 2 * z + 1]
                            + x[b, k, 2 * y + 1, 2 * z] + x[b, k, 2 * y + 1, 2 * z + 1]
                        )
        return out

    @njit(cache=True)
    def _upsample2_nb(g):
        n, c, h, w = g.shape
        out = np.empty((n, c, 2 * h, 2 * w))
        for b in range(n):
            for k in range(c):
                for y in range(h):
                    for z in range(w):
                        v = 0.25 * g[b, k, y, z]
                        out[b, k, 2 * y, 2 * z] = v
                        out[b, k, 2 * y, 2 * z + 1] = v
                        out[b, k, 2 * y + 1, 2 * z] = v
                        out[b, k, 2 * y + 1, 2 * z + 1] = v
        return out

    @njit(cache=True)
    def _pair_sqdist_sum_nb(a, b):
        total = 0.0
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                for k in range(a.shape[1]):
                    d = a[i, k] - b[j, k]
                    total += d * d
        return total

    def pair_sqdist_sum_nb(a, b):
        return float(_pair_sqdist_sum_nb(np.ascontiguousarray(a), np.ascontiguousarray(b)))

    def conv2d_nb(x, w, stride, pad):
        ho = _out_size(x.shape[2], w.shape[2], stride, pad)
        wo = _out_size(x.shape[3], w.shape[3], stride, pad)
        return _conv2d_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad, ho, wo)

    def conv2d_grad_input_nb(g, w, x_shape, stride, pad):
        return _conv2d_grad_input_nb(np.ascontiguousarray(g), np.ascontiguousarray(w),
                                     x_shape[2], x_shape[3], stride, pad)

    def conv2d_grad_weight_nb(x, g, w_shape, stride, pad):
        return _conv2d_grad_weight_nb(np.ascontiguousarray(x), np.ascontiguousarray(g),
                                      w_shape[2], w_shape[3], stride, pad)

    def group_norm_fwd_nb(x, gamma, beta, groups, eps):
        return _group_norm_fwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(gamma),
                                  np.ascontiguousarray(beta), groups, eps)

    def group_norm_bwd_nb(gy, xhat, inv, gamma, groups):
        return _group_norm_bwd_nb(np.ascontiguousarray(gy), xhat, inv, np.ascontiguousarray(gamma), groups)

    def avgpool2_nb(x):
        return _avgpool2_nb(np.ascontiguousarray(x))

    def upsample2_nb(g):
        return _upsample2_nb(np.ascontiguousarray(g))


_NUMPY = {
    "conv2d": conv2d_np,
    "conv2d_grad_input": conv2d_grad_input_np,
    "conv2d_grad_weight": conv2d_grad_weight_np,
    "avgpool2": avgpool2_np,
    "upsample2": upsample2_np,
    "pair_sqdist_sum": pair_sqdist_sum_np,
    "group_norm_fwd": group_norm_fwd_np,
    "group_norm_bwd": group_norm_bwd_np,
}

if HAS_NUMBA:
    _NUMBA = {
        "conv2d": conv2d_nb,
        "conv2d_grad_input": conv2d_grad_input_nb,
        "conv2d_grad_weight": conv2d_grad_weight_nb,
        "avgpool2": avgpool2_nb,
        "upsample2": upsample2_nb,
        "pair_sqdist_sum": pair_sqdist_sum_nb,
        "group_norm_fwd": group_norm_fwd_nb,
        "group_norm_bwd": group_norm_bwd_nb,
    }
else:  # pragma: no cover
    _NUMBA = {}


def kernel_table(backend: str) -> dict:
    if backend == "numpy":
        return _NUMPY
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("MMDISTILL_BACKEND=numba but numba is not importable")
        return _NUMBA
    raise ValueError(f"unknown kernel backend {backend!r}; expected 'numba' or 'numpy'")


BACKEND = os.environ.get("MMDISTILL_BACKEND", "numba" if HAS_NUMBA else "numpy").lower()
_active = kernel_table(BACKEND)

conv2d = _active["conv2d"]
conv2d_grad_input = _active["conv2d_grad_input"]
conv2d_grad_weight = _active["conv2d_grad_weight"]
avgpool2 = _active["avgpool2"]
upsample2 = _active["upsample2"]
pair_sqdist_sum = _active["pair_sqdist_sum"]
group_norm_fwd = _active["group_norm_fwd"]
group_norm_bwd = _active["group_norm_bwd"]
