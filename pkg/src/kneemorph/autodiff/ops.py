"""Differentiable ops over :class:`Tensor`.

Binary ops require identical shapes; the only broadcasting is by Python
scalar constants (``scale``, ``shift``) and the explicit per-channel add used
for time-embedding injection.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_op


def _same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


_sigmoid = expit


# ---------------------------------------------------------------- elementwise

def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("add", x, y)
    return make_op("add", x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("sub", x, y)
    return make_op("sub", x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("mul", x, y)
    xd, yd = x.data, y.data
    return make_op("mul", xd * yd, (x, y), lambda g: (g * yd, g * xd))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return make_op("shift", x.data + float(c), (x,), lambda g: (g,))


def negate(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise ValueError("sqrt of negative entry")
    out = np.sqrt(x.data)
    return make_op("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return make_op("swish", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


_UNARY = {"abs": abs_, "square": square, "sqrt": sqrt, "sigmoid": sigmoid, "swish": swish, "negate": negate}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, x: Tensor, y: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale (y is the constant), abs, square, sqrt, sigmoid, swish."""
    if kind in _BINARY:
        return _BINARY[kind](x, y)
    if kind == "scale":
        return scale(x, y)
    if kind in _UNARY:
        return _UNARY[kind](x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ------------------------------------------------------------------ reductions

def reduce_sum(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ValueError("reduce over empty tensor")
    shape = x.shape
    return make_op("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def reduce_mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ValueError("reduce over empty tensor")
    shape, n = x.shape, x.size
    return make_op("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def reduce(kind: str, x: Tensor) -> Tensor:
    if kind == "sum":
        return reduce_sum(x)
    if kind == "mean":
        return reduce_mean(x)
    raise ValueError(f"unknown reduction {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    area = h * w
    return make_op(
        "global_avg_pool",
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / area, (n, c, h, w)).copy(),),
    )


# ------------------------------------------------------------------ structure

def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ValueError("concat of nothing")
    if len(xs) == 1:
        return xs[0]
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ValueError(f"concat_channels: spatial/batch mismatch {xs[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_op("concat_channels", np.concatenate([t.data for t in xs], axis=1), xs, backward)


def add_per_channel(x: Tensor, v: Tensor) -> Tensor:
    """x (N, C, H, W) plus v (N, C) broadcast over space."""
    if v.shape != x.shape[:2]:
        raise ValueError(f"add_per_channel: {v.shape} does not match {x.shape[:2]}")
    return make_op(
        "add_per_channel",
        x.data + v.data[:, :, None, None],
        (x, v),
        lambda g: (g, g.sum(axis=(2, 3))),
    )


def detach(x: Tensor) -> Tensor:
    return x.detach()


# ----------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*k*k, N*ho*wo), rows ordered (c, i, j) to match weight.reshape(C_out, -1)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation. weight is (C_out, C_in, k, k)."""
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ValueError(f"kernel {k} larger than padded input {hp}x{wp}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    cols = _im2col(_pad(x.data, padding), k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= k - 1:
                # full correlation of the cotangent with the flipped, channel-swapped kernel
                gcols = _im2col(_pad(g, k - 1 - padding), k, 1, h, w)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gx = np.ascontiguousarray((wflip @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                dcols = (wmat.T @ gm).reshape(c, k, k, n, ho, wo)
                dxp = np.zeros((n, c, hp, wp))
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                            dcols[:, i, j].transpose(1, 0, 2, 3)
                        )
                gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Kernel-2, stride-2 transposed convolution (exact 2x upsampling).

    weight is (C_in, C_out, 2, 2); output pixel (2i+a, 2j+b) receives x[i, j] @ weight[:, :, a, b].
    """
    n, c, h, w = x.shape
    cin, cout, ka, kb = weight.shape
    if stride != 2 or (ka, kb) != (2, 2):
        raise ValueError("conv_transpose2d supports only kernel 2, stride 2")
    if cin != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weight expects {cin}")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = weight.data.reshape(cin, cout * 4)
    y = (xm @ wmat).reshape(n, h, w, cout, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gy = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        gx = (gy @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gy).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv_transpose2d", out, inputs, backward)


# --------------------------------------------------------------- normalization

def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % num_groups:
        raise ValueError(f"{c} channels not divisible into {num_groups} groups")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xg = x.data.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, num_groups, -1)
            xh = xhat.reshape(n, num_groups, -1)
            gx = rstd * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return make_op("group_norm", out, (x, gamma, beta), backward)


# ------------------------------------------------------------------ dense

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (N, in) or (in,), weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        if xd.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("linear", out, inputs, backward)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head spatial self-attention with a residual connection.

    Tokens are the H*W positions, features the C channels; all projections are (C, C).
    """
    n, c, h, w = x.shape
    for name, m in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if m.shape != (c, c):
            raise ValueError(f"self_attention: {name} must be ({c}, {c}), got {m.shape}")
    X = x.data.reshape(n, c, h * w).transpose(0, 2, 1)  # (n, L, c)
    q = X @ wq.data.T
    k = X @ wk.data.T
    v = X @ wv.data.T
    s = q @ k.transpose(0, 2, 1) / math.sqrt(c)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    a = p @ v
    o = a @ wo.data.T
    out = (X + o).transpose(0, 2, 1).reshape(n, c, h, w)

    def backward(g):
        G = g.reshape(n, c, h * w).transpose(0, 2, 1)
        gwo = np.einsum("nlo,nli->oi", G, a)
        ga = G @ wo.data
        gp = ga @ v.transpose(0, 2, 1)
        gv = p.transpose(0, 2, 1) @ ga
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) / math.sqrt(c)
        gq = gs @ k
        gk = gs.transpose(0, 2, 1) @ q
        gwq = np.einsum("nlo,nli->oi", gq, X)
        gwk = np.einsum("nlo,nli->oi", gk, X)
        gwv = np.einsum("nlo,nli->oi", gv, X)
        gX = G + gq @ wq.data + gk @ wk.data + gv @ wv.data
        gx = gX.transpose(0, 2, 1).reshape(n, c, h, w)
        return gx, gwq, gwk, gwv, gwo

    return make_op("self_attention", out, (x, wq, wk, wv, wo), backward)


# ------------------------------------------------------------ regularization

def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------ losses

def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of -log softmax(logits)[target] over the batch.

    logits is (K,) with an int target, or (N, K) with N targets.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    nb, k = z2.shape
    if tgt.shape != (nb,):
        raise ValueError(f"cross_entropy: {tgt.shape[0]} targets for {nb} rows")
    if (tgt < 0).any() or (tgt >= k).any():
        raise ValueError(f"cross_entropy: target out of range [0, {k})")
    zs = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(nb)
    loss = float(np.mean(logsum - zs[rows, tgt]))
    soft = np.exp(zs - logsum[:, None])

    def backward(g):
        d = soft.copy()
        d[rows, tgt] -= 1.0
        d *= float(g) / nb
        return (d[0] if single else d,)

    return make_op("cross_entropy", np.array(loss), (as_tensor(logits),), backward)
