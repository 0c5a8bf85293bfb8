"""Hot numeric kernels with an optional numba path.

Every kernel exists twice: a vectorised numpy version and a loop version
compiled with ``numba.njit``.  The loop versions are used when numba is
importable and ``POLYMOTION_DISABLE_NUMBA`` is unset (or "0").  Both paths
produce identical results; the loop versions accumulate in the same order
as the numpy versions so even floating-point sums agree bit for bit.
"""
import os

import numpy as np

try:
    from numba import njit

    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_INSTALLED = False

_flag = os.environ.get("POLYMOTION_DISABLE_NUMBA", "0").strip().lower()
USE_NUMBA = NUMBA_INSTALLED and _flag in ("", "0", "false", "no")


def optional_njit(*args, **kwargs):
    def decorator(func):
        if NUMBA_INSTALLED:
            return njit(*args, **kwargs)(func)
        return func

    return decorator


# --------------------------------------------------------------------------
# nearest codebook entry


def nearest_code_numpy(z, codebook, chunk=1 << 20):
    # explicit differences, not the |a|^2 - 2ab + |b|^2 expansion: the
    # expansion breaks exact ties through cancellation
    out = np.empty(z.shape[0], dtype=np.int64)
    rows = max(1, chunk // max(1, codebook.size))
    for s in range(0, z.shape[0], rows):
        d = ((z[s:s + rows, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
        out[s:s + rows] = np.argmin(d, axis=1)
    return out


@optional_njit(cache=True)
def nearest_code_loops(z, codebook):
    n, dim = z.shape
    k = codebook.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        best_j = 0
        for j in range(k):
            acc = 0.0
            for c in range(dim):
                diff = z[i, c] - codebook[j, c]
                acc += diff * diff
            if acc < best:
                best = acc
                best_j = j
        out[i] = best_j
    return out


# --------------------------------------------------------------------------
# pairwise euclidean distances between codebook rows


def pairwise_l2_numpy(e):
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


@optional_njit(cache=True)
def pairwise_l2_loops(e):
    k, dim = e.shape
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            acc = 0.0
            for c in range(dim):
                diff = e[i, c] - e[j, c]
                acc += diff * diff
            d = np.sqrt(acc)
            out[i, j] = d
            out[j, i] = d
    return out


# --------------------------------------------------------------------------
# im2col / col2im for channels-last 1D convolution
# x: (B, T, C) already padded; cols: (B, T_out, K, C)


def im2col_numpy(x, ksize, stride, t_out):
    b, _, c = x.shape
    cols = np.empty((b, t_out, ksize, c))
    stop = stride * (t_out - 1) + 1
    for k in range(ksize):
        cols[:, :, k, :] = x[:, k : k + stop : stride, :]
    return cols


@optional_njit(cache=True)
def im2col_loops(x, ksize, stride, t_out):
    b, _, c = x.shape
    cols = np.empty((b, t_out, ksize, c))
    for n in range(b):
        for t in range(t_out):
            base = t * stride
            for k in range(ksize):
                for ch in range(c):
                    cols[n, t, k, ch] = x[n, base + k, ch]
    return cols


def col2im_numpy(cols, t_in, stride):
    b, t_out, ksize, c = cols.shape
    x = np.zeros((b, t_in, c))
    stop = stride * (t_out - 1) + 1
    for k in range(ksize):
        x[:, k : k + stop : stride, :] += cols[:, :, k, :]
    return x


@optional_njit(cache=True)
def col2im_loops(cols, t_in, stride):
    b, t_out, ksize, c = cols.shape
    x = np.zeros((b, t_in, c))
    # k outermost to match the accumulation order of the numpy version
    for k in range(ksize):
        for n in range(b):
            for t in range(t_out):
                pos = t * stride + k
                for ch in range(c):
                    x[n, pos, ch] += cols[n, t, k, ch]
    return x


# --------------------------------------------------------------------------
# fused Adam update (in place)


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


@optional_njit(cache=True)
def _adam_flat(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    for i in range(p.size):
        m[i] = m[i] * beta1 + (1.0 - beta1) * g[i]
        v[i] = v[i] * beta2 + (1.0 - beta2) * (g[i] * g[i])
        mhat = m[i] / c1
        vhat = v[i] / c2
        p[i] -= lr * mhat / (np.sqrt(vhat) + eps)


def adam_update_loops(p, g, m, v, lr, beta1, beta2, eps, step):
    _adam_flat(
        p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
        lr, beta1, beta2, eps, 1.0 - beta1**step, 1.0 - beta2**step,
    )


if USE_NUMBA:
    nearest_code = nearest_code_loops
    pairwise_l2 = pairwise_l2_loops
    im2col = im2col_loops
    col2im = col2im_loops
    adam_update = adam_update_loops
else:
    nearest_code = nearest_code_numpy
    pairwise_l2 = pairwise_l2_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy
    adam_update = adam_update_numpy

KERNELS = {
    "nearest_code": (nearest_code_numpy, nearest_code_loops),
    "pairwise_l2": (pairwise_l2_numpy, pairwise_l2_loops),
    "im2col": (im2col_numpy, im2col_loops),
    "col2im": (col2im_numpy, col2im_loops),
    "adam_update": (adam_update_numpy, adam_update_loops),
}
