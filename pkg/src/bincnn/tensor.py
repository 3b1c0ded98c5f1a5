"""Dense float32 tensor operations with explicit forward/backward pairs.

There is no autodiff tape: every op exposes its own backward, and the layer
classes wire them together for the fixed network topologies this engine
supports. All convolutions are cross-correlations (no kernel flip), zero
padded, bias free, and accumulate in float32.

Public ops take NCHW tensors (the engine's value-type convention). Each has
a channels-last (NHWC) twin, which is what the trainable layers use
internally: channels-last keeps every im2col tap a contiguous copy and every
channel broadcast a unit-stride operation, which on one core is the
difference between BLAS-bound and gather-bound convolution.
"""

import numpy as np

from .errors import ConfigError, ShapeError


def as_f32(x):
    return np.ascontiguousarray(x, dtype=np.float32)


def channel_sum(x):
    """Sum a channels-last tensor over all leading axes -> (C,). BLAS-backed:
    a ones-vector GEMV is several times faster than a strided ufunc reduce."""
    flat = x.reshape(-1, x.shape[-1])
    return np.ones(flat.shape[0], dtype=np.float32) @ flat


def nchw_to_nhwc(x):
    return np.ascontiguousarray(np.transpose(x, (0, 2, 3, 1)))


def nhwc_to_nchw(x):
    return np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))


def conv_out_hw(h, w, kh, kw, stride, pad):
    """Output spatial dims: floor((d + 2*pad - k)/stride) + 1 per axis."""
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv output would be {oh}x{ow} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    return oh, ow


def check_conv_args(cin, w, stride, pad, groups):
    if w.ndim != 4:
        raise ShapeError(f"expected (C_out, C_in/groups, k, k) weights, got {w.ndim} axes")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    cout, cin_g, _, _ = w.shape
    if groups < 1 or cin % groups != 0 or cout % groups != 0:
        raise ConfigError(f"groups={groups} must divide C_in={cin} and C_out={cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight axis C_in/groups is {cin_g}, expected {cin // groups} "
            f"(C_in={cin}, groups={groups})"
        )


def _pad_hw_nhwc(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=value)


def _im2col_nhwc(xp, kh, kw, stride, oh, ow, clo, chi):
    """Patch matrix (N*OH*OW, kh*kw*cg) from padded channels-last input."""
    n = xp.shape[0]
    cg = chi - clo
    cols = np.empty((n, oh, ow, kh, kw, cg), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                :, i : i + stride * oh : stride, j : j + stride * ow : stride, clo:chi
            ]
    return cols.reshape(n * oh * ow, kh * kw * cg)


def _weight2col(w, g, cog):
    """(kh*kw*cg, cog) GEMM operand for group g of NCHW-convention weights."""
    cout, cin_g, kh, kw = w.shape
    return np.ascontiguousarray(
        w[g * cog : (g + 1) * cog].transpose(2, 3, 1, 0)
    ).reshape(kh * kw * cin_g, cog)


def conv2d_nhwc(x, w, stride=1, pad=0, groups=1, cache=None):
    """Grouped cross-correlation on channels-last input.

    x: (N,H,W,C); w keeps the (C_out, C_in/groups, kh, kw) convention.
    cache, when a dict, keeps the patch matrices for conv2d_nhwc_backward.
    """
    x = as_f32(x)
    w = as_f32(w)
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got {x.ndim} axes")
    n, h, wd, cin = x.shape
    check_conv_args(cin, w, stride, pad, groups)
    cout, cin_g, kh, kw = w.shape
    oh, ow = conv_out_hw(h, wd, kh, kw, stride, pad)
    xp = _pad_hw_nhwc(x, pad)
    cog = cout // groups
    out = np.empty((n, oh, ow, cout), dtype=np.float32)
    cols_per_group = []
    for g in range(groups):
        cols = _im2col_nhwc(xp, kh, kw, stride, oh, ow, g * cin_g, (g + 1) * cin_g)
        out[..., g * cog : (g + 1) * cog] = (cols @ _weight2col(w, g, cog)).reshape(
            n, oh, ow, cog
        )
        if cache is not None:
            cols_per_group.append(cols)
    if cache is not None:
        cache["cols"] = cols_per_group
    return out


def conv2d_nhwc_backward(grad_out, x, w, stride=1, pad=0, groups=1, cache=None,
                         need_input_grad=True):
    """Gradients of conv2d_nhwc; grad_x is skipped when need_input_grad=False."""
    x = as_f32(x)
    w = as_f32(w)
    grad_out = as_f32(grad_out)
    n, h, wd, cin = x.shape
    check_conv_args(cin, w, stride, pad, groups)
    cout, cin_g, kh, kw = w.shape
    oh, ow = conv_out_hw(h, wd, kh, kw, stride, pad)
    if grad_out.shape != (n, oh, ow, cout):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, oh, ow, cout)}"
        )
    cog = cout // groups
    got = grad_out.reshape(n * oh * ow, cout)
    xp = None
    if cache is None or "cols" not in cache:
        xp = _pad_hw_nhwc(x, pad)
    gxp = None
    if need_input_grad:
        gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=np.float32)
    grad_w = np.empty_like(w)
    for g in range(groups):
        if xp is None:
            cols = cache["cols"][g]
        else:
            cols = _im2col_nhwc(xp, kh, kw, stride, oh, ow, g * cin_g, (g + 1) * cin_g)
        go_g = got[:, g * cog : (g + 1) * cog]
        gw2 = cols.T @ go_g  # (kh*kw*cg, cog)
        grad_w[g * cog : (g + 1) * cog] = (
            gw2.reshape(kh, kw, cin_g, cog).transpose(3, 2, 0, 1)
        )
        if not need_input_grad:
            continue
        gcols = (go_g @ _weight2col(w, g, cog).T).reshape(n, oh, ow, kh, kw, cin_g)
        for i in range(kh):
            for j in range(kw):
                gxp[
                    :, i : i + stride * oh : stride, j : j + stride * ow : stride,
                    g * cin_g : (g + 1) * cin_g,
                ] += gcols[:, :, :, i, j, :]
    if not need_input_grad:
        return None, grad_w
    if pad:
        gxp = gxp[:, pad : pad + h, pad : pad + wd, :]
    return gxp, grad_w


def conv2d(x, w, stride=1, pad=0, groups=1):
    """Grouped 2D cross-correlation on NCHW input, zero padded, no bias."""
    x = as_f32(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.ndim} axes")
    out = conv2d_nhwc(nchw_to_nhwc(x), w, stride, pad, groups)
    return nhwc_to_nchw(out)


def conv2d_backward(grad_out, x, w, stride=1, pad=0, groups=1):
    """Gradients of conv2d w.r.t. input and weights (NCHW convention)."""
    x = as_f32(x)
    grad_out = as_f32(grad_out)
    if x.ndim != 4 or grad_out.ndim != 4:
        raise ShapeError("expected NCHW tensors")
    gx, gw = conv2d_nhwc_backward(
        nchw_to_nhwc(grad_out), nchw_to_nhwc(x), w, stride, pad, groups
    )
    return nhwc_to_nchw(gx), gw


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def _check_pool_input(x, k, h, w):
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got {x.ndim} axes")
    if h < k or w < k:
        raise ShapeError(f"pooling window {k}x{k} does not fit input {h}x{w}")


def _sum_pool_nhwc(x, k, stride, pad):
    x = as_f32(x)
    n, h, w, c = x.shape
    _check_pool_input(x, k, h, w)
    oh, ow = conv_out_hw(h, w, k, k, stride, pad)
    xp = _pad_hw_nhwc(x, pad)
    acc = np.zeros((n, oh, ow, c), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            acc += xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    return acc


def _sum_pool_nhwc_backward(grad_out, xshape, k, stride, pad):
    n, h, w, c = xshape
    oh, ow = conv_out_hw(h, w, k, k, stride, pad)
    gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += grad_out
    if pad == 0:
        return gxp
    return gxp[:, pad : pad + h, pad : pad + w, :]


def avgpool_3x3_s2_nhwc(x):
    return _sum_pool_nhwc(x, 3, 2, 1) / np.float32(9.0)


def avgpool_3x3_s2_nhwc_backward(grad_out, xshape):
    return _sum_pool_nhwc_backward(grad_out / np.float32(9.0), xshape, 3, 2, 1)


def avgpool_3x3_s2(x):
    """3x3 mean pool, stride 2, pad 1, fixed divisor 9 (padding counted)."""
    return nhwc_to_nchw(avgpool_3x3_s2_nhwc(nchw_to_nhwc(as_f32(x))))


def avgpool_3x3_s2_backward(grad_out, xshape):
    n, c, h, w = xshape
    g = avgpool_3x3_s2_nhwc_backward(nchw_to_nhwc(as_f32(grad_out)), (n, h, w, c))
    return nhwc_to_nchw(g)


def avgpool_2x2_s2_nhwc(x):
    return _sum_pool_nhwc(x, 2, 2, 0) / np.float32(4.0)


def avgpool_2x2_s2_nhwc_backward(grad_out, xshape):
    return _sum_pool_nhwc_backward(grad_out / np.float32(4.0), xshape, 2, 2, 0)


def avgpool_2x2_s2(x):
    """2x2 mean pool, stride 2, no padding (downsampling-shortcut front end)."""
    return nhwc_to_nchw(avgpool_2x2_s2_nhwc(nchw_to_nhwc(as_f32(x))))


def avgpool_2x2_s2_backward(grad_out, xshape):
    n, c, h, w = xshape
    g = avgpool_2x2_s2_nhwc_backward(nchw_to_nhwc(as_f32(grad_out)), (n, h, w, c))
    return nhwc_to_nchw(g)


def maxpool_3x3_s2_nhwc(x, need_arg=True):
    """Returns (out, argmax); argmax is None when need_arg=False (inference)."""
    x = as_f32(x)
    n, h, w, c = x.shape
    _check_pool_input(x, 3, h, w)
    oh, ow = conv_out_hw(h, w, 3, 3, 2, 1)
    xp = _pad_hw_nhwc(x, 1, value=-np.inf)
    if not need_arg:
        out = xp[:, 0 : 2 * oh : 2, 0 : 2 * ow : 2, :].copy()
        for t in range(1, 9):
            i, j = divmod(t, 3)
            np.maximum(out, xp[:, i : i + 2 * oh : 2, j : j + 2 * ow : 2, :], out=out)
        return out, None
    taps = np.stack(
        [
            xp[:, i : i + 2 * oh : 2, j : j + 2 * ow : 2, :]
            for i in range(3)
            for j in range(3)
        ],
        axis=-1,
    )
    arg = taps.argmax(axis=-1).astype(np.uint8)
    return taps.max(axis=-1), arg


def maxpool_3x3_s2_nhwc_backward(grad_out, arg, xshape):
    n, h, w, c = xshape
    gxp = np.zeros((n, h + 2, w + 2, c), dtype=np.float32)
    oh, ow = grad_out.shape[1:3]
    for t in range(9):
        i, j = divmod(t, 3)
        gxp[:, i : i + 2 * oh : 2, j : j + 2 * ow : 2, :] += grad_out * (arg == t)
    return gxp[:, 1 : 1 + h, 1 : 1 + w, :]


def maxpool_3x3_s2(x):
    """3x3 max pool, stride 2, pad 1. Returns (out, argmax) for backward."""
    out, arg = maxpool_3x3_s2_nhwc(nchw_to_nhwc(as_f32(x)))
    return nhwc_to_nchw(out), np.ascontiguousarray(np.transpose(arg, (0, 3, 1, 2)))


def maxpool_3x3_s2_backward(grad_out, arg, xshape):
    n, c, h, w = xshape
    g = maxpool_3x3_s2_nhwc_backward(
        nchw_to_nhwc(as_f32(grad_out)),
        np.ascontiguousarray(np.transpose(arg, (0, 2, 3, 1))),
        (n, h, w, c),
    )
    return nhwc_to_nchw(g)


def global_avg_pool_nhwc(x):
    return as_f32(x).mean(axis=(1, 2))


def global_avg_pool_nhwc_backward(grad_out, xshape):
    n, h, w, c = xshape
    g = grad_out.astype(np.float32) / np.float32(h * w)
    return np.broadcast_to(g[:, None, None, :], xshape).copy()


def global_avg_pool(x):
    """(N,C,H,W) -> (N,C) spatial mean."""
    x = as_f32(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.ndim} axes")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, xshape):
    n, c, h, w = xshape
    g = grad_out.astype(np.float32) / np.float32(h * w)
    return np.broadcast_to(g[:, :, None, None], xshape).copy()


# ---------------------------------------------------------------------------
# Fully connected and losses
# ---------------------------------------------------------------------------


def linear(x, w, b):
    """Fully connected: (N,D) @ (K,D)^T + (K,)."""
    x = as_f32(x)
    if x.ndim != 2:
        raise ShapeError(f"expected (N, D) input, got {x.ndim} axes")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"feature axis mismatch: input D={x.shape[1]}, weight D={w.shape[1]}")
    return x @ w.T + b


def linear_backward(grad_out, x, w):
    grad_out = as_f32(grad_out)
    grad_x = grad_out @ w
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels=None, soft_targets=None):
    """Mean cross entropy and its logit gradient.

    Targets are either integer class labels or a (N, K) row-stochastic
    soft-label matrix (teacher outputs); exactly one must be given.
    """
    logits = as_f32(logits)
    n, k = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    p = np.exp(logp)
    if (labels is None) == (soft_targets is None):
        raise ConfigError("pass exactly one of labels / soft_targets")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
        t = np.zeros((n, k), dtype=np.float32)
        t[np.arange(n), labels] = 1.0
    else:
        t = as_f32(soft_targets)
        if t.shape != (n, k):
            raise ShapeError(f"soft targets shape {t.shape} does not match logits {(n, k)}")
    loss = float(-(t * logp).sum() / n)
    grad = (p - t) / np.float32(n)
    return loss, grad.astype(np.float32)
