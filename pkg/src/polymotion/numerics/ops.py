"""Layer-level differentiable primitives.

Each primitive computes its own analytic backward instead of composing
the elementwise ops, which keeps tapes short and the numbers stable.
Convolutions are channels-last: sequences are ``(B, T, C)``.
"""
import numpy as np

from .. import _accel
from ..errors import DimensionError, NumericError
from .tensor import Tensor, ensure_tensor, matmul, unbroadcast


def softmax(x, axis=-1):
    x = ensure_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = ensure_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias
    return y


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data
    n = xd.shape[-1]

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = unbroadcast(g * xhat, gd.shape)
        if beta.requires_grad:
            gbeta = unbroadcast(g, bd.shape)
        if x.requires_grad:
            gh = g * gd
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True)
                            - xhat * (gh * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._from_op(xhat * gd + bd, (x, gamma, beta), backward)


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise DimensionError(f"embedding ids out of range [0, {n})")
    wshape = weight.shape

    def backward(g):
        out = np.zeros(wshape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (out,)

    return Tensor._from_op(weight.data[ids], (weight,), backward)


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-likelihood over non-ignored positions.

    ``logits`` is (..., V), ``targets`` integer (...).
    """
    logits = ensure_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    if flat.shape[0] != tflat.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    valid = np.ones_like(tflat, dtype=bool) if ignore_index is None else tflat != ignore_index
    count = int(valid.sum())
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe_t = np.where(valid, tflat, 0)
    if count == 0:
        loss = 0.0
    else:
        loss = -logp[np.arange(len(tflat)), safe_t][valid].sum() / count

    def backward(g):
        if count == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        p[np.arange(len(tflat)), safe_t] -= 1.0
        p *= valid[:, None] / count
        return ((p * g).reshape(logits.shape),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward)


def mse(pred, target):
    pred, target = ensure_tensor(pred), ensure_tensor(target)
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = 2.0 * g * diff / n
        return (
            unbroadcast(gd, pred.shape) if pred.requires_grad else None,
            unbroadcast(-gd, target.shape) if target.requires_grad else None,
        )

    return Tensor._from_op(np.asarray((diff * diff).mean()), (pred, target), backward)


def cosine_similarity(a, b, axis=-1, eps=1e-12):
    a, b = ensure_tensor(a), ensure_tensor(b)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    na_c = np.maximum(na, eps)
    nb_c = np.maximum(nb, eps)
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    cos = dot / (na_c * nb_c)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = g * (bd / (na_c * nb_c) - cos * ad / (na_c * na_c))
        if b.requires_grad:
            gb = g * (ad / (na_c * nb_c) - cos * bd / (nb_c * nb_c))
        return ga, gb

    return Tensor._from_op(np.squeeze(cos, axis=axis), (a, b), backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = ensure_tensor(x)
    xd = x.data
    n = np.maximum(np.sqrt((xd * xd).sum(axis=axis, keepdims=True)), eps)
    out = xd / n

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# 1D convolution, channels-last


def _conv_out_len(t, k, stride, padding):
    return (t + 2 * padding - k) // stride + 1


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """x: (B, T, Cin); weight: (K, Cin, Cout); returns (B, T_out, Cout)."""
    x = ensure_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"conv1d expects (B, T, C) input, got {x.shape}")
    k, cin, cout = weight.shape
    b, t, c = x.shape
    if c != cin:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape}, weight {weight.shape}")
    t_out = _conv_out_len(t, k, stride, padding)
    if t_out <= 0:
        raise DimensionError(f"conv1d input length {t} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    cols = _accel.im2col(xp, k, stride, t_out)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols.reshape(b * t_out, k * cin) @ w2
    out = out.reshape(b, t_out, cout)
    if bias is not None:
        out = out + bias.data
    t_pad = xp.shape[1]

    def backward(g):
        g2 = g.reshape(b * t_out, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.reshape(b * t_out, k * cin).T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, t_out, k, cin)
            gxp = _accel.col2im(gcols, t_pad, stride)
            gx = gxp[:, padding : padding + t, :] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def conv_transpose1d(x, weight, bias=None, stride=1, padding=0):
    """Adjoint of :func:`conv1d` w.r.t. its input.

    x: (B, T_in, Cin); weight: (K, Cout, Cin); returns (B, T_out, Cout) with
    ``T_out = (T_in - 1) * stride + K - 2 * padding``.
    """
    x = ensure_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"conv_transpose1d expects (B, T, C) input, got {x.shape}")
    k, cout, cin = weight.shape
    b, t_in, c = x.shape
    if c != cin:
        raise DimensionError(
            f"conv_transpose1d channel mismatch: input {x.shape}, weight {weight.shape}"
        )
    t_full = (t_in - 1) * stride + k
    t_out = t_full - 2 * padding
    if t_out <= 0:
        raise DimensionError(f"conv_transpose1d output length {t_out} is not positive")
    # (K, Cout, Cin) -> (Cin, K*Cout)
    w2 = weight.data.transpose(2, 0, 1).reshape(cin, k * cout)
    cols = (x.data.reshape(b * t_in, cin) @ w2).reshape(b, t_in, k, cout)
    full = _accel.col2im(cols, t_full, stride)
    out = full[:, padding : padding + t_out, :]
    if bias is not None:
        out = out + bias.data
    xd = x.data

    def backward(g):
        gx = gw = gb = None
        gfull = np.pad(g, ((0, 0), (padding, padding), (0, 0))) if padding else g
        gcols = _accel.im2col(np.ascontiguousarray(gfull), k, stride, t_in)
        gcols2 = gcols.reshape(b * t_in, k * cout)
        if x.requires_grad:
            gx = (gcols2 @ w2.T).reshape(b, t_in, cin)
        if weight.requires_grad:
            gw2 = xd.reshape(b * t_in, cin).T @ gcols2
            gw = gw2.reshape(cin, k, cout).transpose(1, 2, 0)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, backward)


def upsample_repeat(x, factor):
    """Nearest-neighbour temporal upsampling of (B, T, C)."""
    xd = x.data
    b, t, c = xd.shape

    def backward(g):
        return (g.reshape(b, t, factor, c).sum(axis=2),)

    return Tensor._from_op(np.repeat(xd, factor, axis=1), (x,), backward)


# ---------------------------------------------------------------------------
# attention


def causal_mask(n):
    """Additive (n, n) mask: 0 on and below the diagonal, -inf above."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def key_padding_mask(valid):
    """(B, Tk) validity booleans -> additive (B, 1, 1, Tk) mask."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, -np.inf)[:, None, None, :]


def attention(q, k, v, mask=None):
    """Scaled dot-product attention.

    q: (..., Tq, dh), k and v: (..., Tk, dh).  ``mask`` is an additive
    array broadcastable to (..., Tq, Tk); masked entries are -inf.
    """
    dh = q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        try:
            np.broadcast_shapes(mask.shape, scores.shape)
        except ValueError:
            raise DimensionError(
                f"attention mask shape {mask.shape} does not broadcast to scores {scores.shape}"
            ) from None
        if np.broadcast_shapes(mask.shape, scores.shape) != scores.shape:
            raise DimensionError(
                f"attention mask shape {mask.shape} does not broadcast to scores {scores.shape}"
            )
        scores = scores + mask
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)
