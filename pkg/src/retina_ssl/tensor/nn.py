"""Layer primitives used by the U-Net and the projection head.

Convolutions use a flattened "shift and multiply" scheme instead of im2col:
the padded input of each image is stored as one flat row per channel, so every
kernel tap becomes a contiguous slice and one BLAS call. Output positions that
fall into the padding columns are computed and then discarded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError, Tensor, make_result


def _same_padding(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def _check_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected an NCHW tensor, got rank {x.ndim} shape {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation. ``w`` is O x I x kh x kw; ``padding`` is same|valid."""
    _check_nchw(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be O x I x kh x kw, got shape {w.shape}")
    N, C, H, W = x.shape
    O, I, kh, kw = w.shape
    if C != I:
        raise ShapeError(f"conv2d: channel axis 1 of input has {C} channels, weight expects {I}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias axis 0 has length {b.shape}, expected ({O},)")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + pt + pb, W + pl + pr
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if Ho < 1:
        raise ShapeError(f"conv2d: axis 2 (H={H}) smaller than kernel height {kh}")
    if Wo < 1:
        raise ShapeError(f"conv2d: axis 3 (W={W}) smaller than kernel width {kw}")

    xd, wd = x.data, w.data
    dtype = np.result_type(xd, wd)
    L = Ho * Wp
    flat = np.zeros((N, C, Hp * Wp + kw - 1), dtype)
    flat[:, :, :Hp * Wp].reshape(N, C, Hp, Wp)[:, :, pt:pt + H, pl:pl + W] = xd
    taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1), dtype=dtype)  # kh, kw, O, C
    offsets = [(i, j, i * Wp + j) for i in range(kh) for j in range(kw)]

    acc = np.zeros((N, O, L), dtype)
    tmp = np.empty_like(acc)
    for i, j, off in offsets:
        np.matmul(taps[i, j], flat[:, :, off:off + L], out=tmp)
        acc += tmp
    out = acc.reshape(N, O, Ho, Wp)[..., :Wo]
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)
    if stride > 1:
        out = out[:, :, ::stride, ::stride]
    out = np.ascontiguousarray(out)

    def backward(g):
        if stride > 1:
            full = np.zeros((N, O, Ho, Wo), g.dtype)
            full[:, :, ::stride, ::stride] = g
            g = full
        gpad = np.zeros((N, O, Ho, Wp), dtype)
        gpad[..., :Wo] = g
        gf = gpad.reshape(N, O, L)
        dw = np.empty((kh, kw, O, C), dtype)
        dflat = np.zeros_like(flat) if x.requires_grad else None
        for i, j, off in offsets:
            window = flat[:, :, off:off + L]
            dw[i, j] = np.matmul(gf, window.transpose(0, 2, 1)).sum(axis=0)
            if dflat is not None:
                dflat[:, :, off:off + L] += np.matmul(taps[i, j].T, gf)
        dx = None
        if dflat is not None:
            dx = dflat[:, :, :Hp * Wp].reshape(N, C, Hp, Wp)[:, :, pt:pt + H, pl:pl + W].copy()
        grads = [dx, dw.transpose(2, 3, 0, 1).copy()]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, "conv2d", backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution, kernel 2x2, stride 2. ``w`` is I x O x 2 x 2."""
    _check_nchw(x, "conv_transpose2d")
    N, C, H, W = x.shape
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d: weight must be I x O x 2 x 2, got {w.shape}")
    I, O = w.shape[:2]
    if C != I:
        raise ShapeError(f"conv_transpose2d: channel axis 1 of input has {C} channels, weight expects {I}")
    xd = x.data
    dtype = np.result_type(xd, w.data)
    wm = w.data.reshape(I, O * 4).T.astype(dtype, copy=False)
    xr = xd.reshape(N, C, H * W)
    y = np.matmul(wm, xr).reshape(N, O, 2, 2, H, W)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(N, O, 2 * H, 2 * W)
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)

    def backward(g):
        gr = g.reshape(N, O, H, 2, W, 2).transpose(0, 1, 3, 5, 2, 4).reshape(N, O * 4, H * W)
        dx = np.matmul(wm.T, gr).reshape(N, C, H, W) if x.requires_grad else None
        dw = np.matmul(xr, gr.transpose(0, 2, 1)).sum(axis=0).reshape(I, O, 2, 2)
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_result(np.ascontiguousarray(out), parents, "conv_transpose2d", backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""
    _check_nchw(x, "maxpool2")
    N, C, H, W = x.shape
    if H % 2:
        raise ShapeError(f"maxpool2: axis 2 (H={H}) is odd; pad or resize the input")
    if W % 2:
        raise ShapeError(f"maxpool2: axis 3 (W={W}) is odd; pad or resize the input")
    xd = x.data
    corners = [xd[:, :, a::2, b::2] for a in (0, 1) for b in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    # winner index per window, scanning corners in row-major order
    idx = np.full(out.shape, 3, np.int8)
    for k in (2, 1, 0):
        idx[corners[k] == out] = k

    def backward(g):
        gx = np.zeros((N, C, H, W), g.dtype)
        for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            gx[:, :, a::2, b::2] = g * (idx == k)
        return (gx,)

    return make_result(out, (x,), "maxpool2", backward)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, np.float32), requires_grad=True),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Batch normalisation over N, H, W.

    Train mode normalises by the (biased) batch statistics and folds them into
    the running estimates as ``running = momentum * running + (1 - momentum) *
    batch`` (the running variance uses the unbiased batch variance). Eval mode
    applies the running estimates.
    """
    _check_nchw(x, "batchnorm")
    N, C, H, W = x.shape
    gamma, beta = state.gamma, state.beta
    if gamma.shape != (C,):
        raise ShapeError(f"batchnorm: channel axis 1 has {C} channels, state has {gamma.shape[0]}")
    xd = x.data
    shape = (1, C, 1, 1)
    gd = gamma.data.reshape(shape)
    if train:
        m = N * H * W
        if m < 2:
            raise ShapeError(f"batchnorm: train mode needs N*H*W >= 2 per channel, got {m}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xhat = xd - mu
        var = np.einsum("nchw,nchw->c", xhat, xhat) / m
        inv = (1.0 / np.sqrt(var + state.eps)).astype(xhat.dtype).reshape(shape)
        xhat *= inv
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mu.ravel()
        state.running_var[...] = mom * state.running_var + (1 - mom) * var * (m / (m - 1))
        out = xhat * gd + beta.data.reshape(shape)

        def backward(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = np.einsum("nchw,nchw->c", g, xhat)
            dx = None
            if x.requires_grad:
                dx = g - (dbeta / m).reshape(shape)
                dx -= xhat * (dgamma / m).reshape(shape)
                dx *= gd * inv
            return dx, dgamma, dbeta
    else:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(shape)
        xhat = (xd - state.running_mean.reshape(shape)) * inv
        out = xhat * gd + beta.data.reshape(shape)

        def backward(g):
            dx = g * (gd * inv) if x.requires_grad else None
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gamma, beta), "batchnorm", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nchw(x, "global_avg_pool")
    N, C, H, W = x.shape

    def backward(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], (N, C, H, W)).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", backward)


def linear(v: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``v @ w + b`` with ``w`` shaped D x E."""
    if v.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear: expected N x D input and D x E weight, got {v.shape}, {w.shape}")
    if v.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: axis 1 of input ({v.shape[1]}) != axis 0 of weight ({w.shape[0]})")
    vd, wd = v.data, w.data
    out = vd @ wd
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ wd.T, vd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (v, w) if b is None else (v, w, b)
    return make_result(out, parents, "linear", backward)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit length; rows with norm below ``eps`` are divided by ``eps``."""
    vd = v.data
    norm = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = vd / denom
    live = norm > eps

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return make_result(out, (v,), "l2_normalize", backward)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of N x K logits against integer class targets."""
    z = logits.data
    n = z.shape[0]
    target = np.asarray(target, dtype=np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), target].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), target] -= 1.0
        return (p * (g / n),)

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), "cross_entropy", backward)


def binary_cross_entropy(p: Tensor, target: np.ndarray, weight: np.ndarray | None = None,
                         eps: float = 1e-7) -> Tensor:
    """Weighted mean of pixel-wise BCE; ``weight`` is typically a 0/1 FOV mask."""
    pd = p.data
    t = np.asarray(target, dtype=pd.dtype)
    w = np.ones_like(pd) if weight is None else np.broadcast_to(np.asarray(weight, pd.dtype), pd.shape)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("binary_cross_entropy: weight mask selects no pixels")
    pc = np.clip(pd, eps, 1.0 - eps)
    per = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    loss = (per * w).sum() / total

    def backward(g):
        return (g * w * (pc - t) / (pc * (1.0 - pc)) / total,)

    return make_result(np.asarray(loss, dtype=pd.dtype), (p,), "binary_cross_entropy", backward)
