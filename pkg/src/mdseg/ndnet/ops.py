"""Differentiable primitives on ``(B, C, X, Y, Z)`` arrays.

Each primitive computes its forward value and, when a tape is supplied,
records a vector-Jacobian product for the backward pass. Reductions use
numpy's fixed pairwise order, so results are reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np

from .tape import NonFiniteError, Tape

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


def _finite(out: np.ndarray, node: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(node)
    return out


def _out_size(n: int, k: int, stride: int) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def _im2col(xp, k, stride, out_shape):
    """Gather one padded ``(C, Xp, Yp, Zp)`` sample into a ``(C*k^3, Xo*Yo*Zo)`` matrix."""
    C = xp.shape[0]
    Xo, Yo, Zo = out_shape
    col = np.empty((C, k, k, k, Xo, Yo, Zo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                col[:, i, j, l] = xp[:, i:i + stride * Xo:stride,
                                     j:j + stride * Yo:stride,
                                     l:l + stride * Zo:stride]
    return col.reshape(C * k ** 3, Xo * Yo * Zo)


def _col2im(w2t, g, x_shape, k, stride):
    """Scatter-add ``w2t @ g`` columns back onto the input grid (input gradient)."""
    B, Cin = x_shape[:2]
    spatial = x_shape[2:]
    p = k // 2
    out_shape = g.shape[2:]
    Xo, Yo, Zo = out_shape
    gx = np.empty(x_shape, dtype=g.dtype)
    gxp = np.empty((Cin,) + tuple(n + 2 * p for n in spatial), dtype=g.dtype)
    for b in range(B):
        dcol = (w2t @ g[b].reshape(g.shape[1], -1)).reshape((Cin, k, k, k) + out_shape)
        gxp[...] = 0
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxp[:, i:i + stride * Xo:stride,
                        j:j + stride * Yo:stride,
                        l:l + stride * Zo:stride] += dcol[:, i, j, l]
        gx[b] = gxp[:, p:p + spatial[0], p:p + spatial[1], p:p + spatial[2]]
    return gx


def _correlate(x, w, stride):
    """Forward correlation, one sample at a time so the gathered columns stay in cache.

    Returns ``(out, cols)`` where ``cols[b]`` is sample ``b``'s column matrix.
    """
    B, Cin = x.shape[:2]
    Cout, k = w.shape[0], w.shape[2]
    p = k // 2
    spatial = x.shape[2:]
    out_shape = tuple(_out_size(n, k, stride) for n in spatial)
    w2 = w.reshape(Cout, -1)
    out = np.empty((B, Cout) + out_shape, dtype=np.result_type(x, w))
    cols = []
    if p:
        xp = np.zeros((Cin,) + tuple(n + 2 * p for n in spatial), dtype=x.dtype)
    for b in range(B):
        if k == 1 and stride == 1:
            col = x[b].reshape(Cin, -1)
        else:
            if p:
                xp[:, p:p + spatial[0], p:p + spatial[1], p:p + spatial[2]] = x[b]
            else:
                xp = x[b]
            col = _im2col(xp, k, stride, out_shape)
        out[b] = (w2 @ col).reshape((Cout,) + out_shape)
        cols.append(col)
    return out, cols


def conv3d(x, w, b=None, stride=1, tape: Tape | None = None, name="conv3d",
           input_grad=True):
    """3-D cross-correlation with zero padding ``k // 2``.

    ``w`` has shape ``(C_out, C_in, k, k, k)`` with odd ``k``. At stride 1 the
    spatial size is preserved; at stride 2 it is ``ceil(n / 2)``. With
    ``input_grad=False`` the backward pass skips the gradient w.r.t. ``x``.
    """
    Cin = x.shape[1]
    Cout, Cin_w, k = w.shape[:3]
    if Cin_w != Cin:
        raise ValueError(f"{name}: input has {Cin} channels, kernel expects {Cin_w}")
    if k % 2 == 0 or w.shape[2:] != (k, k, k):
        raise ValueError(f"{name}: kernel must be cubic with odd size, got {w.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"{name}: stride must be 1 or 2")
    out, cols = _correlate(x, w, stride)
    if b is not None:
        out += b.reshape(1, Cout, 1, 1, 1)
    _finite(out, name)

    if tape is not None:
        def vjp(g):
            gw = np.zeros((Cout, cols[0].shape[0]), dtype=w.dtype)
            for gs, col in zip(g, cols):
                gw += gs.reshape(Cout, -1) @ col.T
            gw = gw.reshape(w.shape)
            gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
            if not input_grad:
                gx = None
            elif stride == 1:
                # correlate the upstream gradient with the flipped, channel-transposed kernel
                w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gx, _ = _correlate(g, w_flip, 1)
            else:
                gx = _col2im(w.reshape(Cout, -1).T, g, x.shape, k, stride)
            return gx, gw, gb

        tape.record("conv3d", (x, w, b), out, vjp, name)
    return out


def upsample2(x, tape: Tape | None = None, name="upsample2"):
    """Nearest-neighbour upsampling by 2 along each spatial axis."""
    B, C, X, Y, Z = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None, :, None],
                          (B, C, X, 2, Y, 2, Z, 2)).reshape(B, C, 2 * X, 2 * Y, 2 * Z)
    if tape is not None:
        def vjp(g):
            return (g.reshape(B, C, X, 2, Y, 2, Z, 2).sum(axis=(3, 5, 7)),)

        tape.record("upsample2", (x,), out, vjp, name)
    return out


def concat(xs, tape: Tape | None = None, name="concat"):
    """Concatenate along the channel axis."""
    out = np.concatenate(xs, axis=1)
    if tape is not None:
        bounds = np.cumsum([0] + [a.shape[1] for a in xs])

        def vjp(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

        tape.record("concat", tuple(xs), out, vjp, name)
    return out


def add(a, b, tape: Tape | None = None, name="add"):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    out = _finite(a + b, name)
    if tape is not None:
        tape.record("add", (a, b), out, lambda g: (g, g), name)
    return out


def leaky_relu(x, slope=LEAKY_SLOPE, tape: Tape | None = None, name="leaky_relu"):
    pos = x > 0
    out = np.where(pos, x, x * x.dtype.type(slope))
    if tape is not None:
        def vjp(g):
            return (np.where(pos, g, g * g.dtype.type(slope)),)

        tape.record("leaky_relu", (x,), out, vjp, name)
    return out


def instance_norm(x, gamma=None, beta=None, eps=NORM_EPS, tape: Tape | None = None,
                  name="instance_norm"):
    """Normalize each (sample, channel) over its spatial extent, then scale and shift."""
    axes = (2, 3, 4)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    C = x.shape[1]
    out = xhat
    if gamma is not None:
        out = out * gamma.reshape(1, C, 1, 1, 1)
    if beta is not None:
        out = out + beta.reshape(1, C, 1, 1, 1)
    _finite(out, name)
    if tape is not None:
        def vjp(g):
            ggamma = (g * xhat).sum(axis=(0,) + axes) if gamma is not None else None
            gbeta = g.sum(axis=(0,) + axes) if beta is not None else None
            dxhat = g * gamma.reshape(1, C, 1, 1, 1) if gamma is not None else g
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
            return gx, ggamma, gbeta

        tape.record("instance_norm", (x, gamma, beta), out, vjp, name)
    return out


def sigmoid(x, tape: Tape | None = None, name="sigmoid"):
    out = _stable_sigmoid(x)
    if tape is not None:
        tape.record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),), name)
    return out


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def softmax(x, axis=1, tape: Tape | None = None, name="softmax"):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    if tape is not None:
        def vjp(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        tape.record("softmax", (x,), out, vjp, name)
    return out


def reduce_sum(x, axis=None, tape: Tape | None = None, name="sum"):
    out = np.asarray(x.sum(axis=axis, keepdims=True))
    if tape is not None:
        tape.record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),), name)
    return out


def reduce_mean(x, axis=None, tape: Tape | None = None, name="mean"):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.mean(axis=axis, keepdims=True))
    if tape is not None:
        def vjp(g):
            return (np.broadcast_to(g / count, x.shape).copy(),)

        tape.record("mean", (x,), out, vjp, name)
    return out


def multiply(a, b, tape: Tape | None = None, name="multiply"):
    """Elementwise product (used to weight outputs in gradient checks)."""
    out = a * b
    if tape is not None:
        tape.record("multiply", (a, b), out, lambda g: (g * b, g * a), name)
    return out


def subsample2(x, tape: Tape | None = None, name="subsample2"):
    """Keep every second voxel per spatial axis (parameter-free strided identity)."""
    out = np.ascontiguousarray(x[:, :, ::2, ::2, ::2])
    if tape is not None:
        def vjp(g):
            gx = np.zeros_like(x)
            gx[:, :, ::2, ::2, ::2] = g
            return (gx,)

        tape.record("subsample2", (x,), out, vjp, name)
    return out
