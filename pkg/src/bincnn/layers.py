"""Trainable layer primitives with manual forward/backward.

Layers run on channels-last (N,H,W,C) activations; the Network converts at
its boundary. Weight tensors keep the (C_out, C_in/groups, k, k) convention
everywhere, so exported artifacts and the public tensor ops agree.

Each layer caches exactly what its own backward needs. Training is a
single-writer loop; the caches make layer instances stateful, so one layer
instance belongs to one network.
"""

import numpy as np

from . import tensor as T
from .binarize import (
    DEFAULT_CLIP_BOUND,
    binarize_weights,
    init_weights_xavier,
    sign_ternary,
    ste_mask,
)
from .errors import ShapeError


class Parameter:
    """A learnable array plus its gradient buffer.

    binary_proxy marks real-valued proxy weights whose sign is used in the
    forward pass; the optimizer applies zero weight decay to them.
    """

    __slots__ = ("name", "value", "grad", "binary_proxy")

    def __init__(self, name, value, binary_proxy=False):
        self.name = name
        self.value = np.asarray(value, dtype=np.float32)
        self.grad = np.zeros_like(self.value)
        self.binary_proxy = binary_proxy

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape}, binary_proxy={self.binary_proxy})"


class Layer:
    name = ""

    def parameters(self):
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0


class RealConv2d(Layer):
    def __init__(self, name, cin, cout, k, stride=1, pad=0, groups=1, rng=None):
        self.name = name
        self.stride, self.pad, self.groups = stride, pad, groups
        self.need_input_grad = True
        self.weight = Parameter(
            f"{name}.weight", init_weights_xavier((cout, cin // groups, k, k), rng=rng)
        )
        self._x = None
        self._cache = None

    def parameters(self):
        return [self.weight]

    def forward(self, x, train=False):
        self._x = x if train else None
        self._cache = {} if train else None
        return T.conv2d_nhwc(x, self.weight.value, self.stride, self.pad, self.groups,
                             cache=self._cache)

    def backward(self, grad_out):
        gx, gw = T.conv2d_nhwc_backward(grad_out, self._x, self.weight.value,
                                        self.stride, self.pad, self.groups,
                                        cache=self._cache,
                                        need_input_grad=self.need_input_grad)
        self.weight.grad += gw
        self._cache = None
        return gx


class BinaryConv2d(Layer):
    """Convolution on sign-binarized proxy weights with a clipped STE backward.

    The input is expected to be already binarized (or tanh-squashed during
    full-precision pretraining) by the preceding activation-quantization
    layer. With binarize=False the proxy weights are used directly, which is
    the real-weight stage of multi-step training.
    """

    def __init__(self, name, cin, cout, k, stride=1, pad=0, groups=1,
                 bound=DEFAULT_CLIP_BOUND, rng=None):
        self.name = name
        self.stride, self.pad, self.groups = stride, pad, groups
        self.bound = bound
        self.binarize = True
        self.weight = Parameter(
            f"{name}.weight",
            init_weights_xavier((cout, cin // groups, k, k), rng=rng),
            binary_proxy=True,
        )
        self._x = None
        self._cache = None

    def parameters(self):
        return [self.weight]

    def effective_weight(self):
        return binarize_weights(self.weight.value) if self.binarize else self.weight.value

    def forward(self, x, train=False):
        self._x = x if train else None
        self._cache = {} if train else None
        return T.conv2d_nhwc(x, self.effective_weight(), self.stride, self.pad,
                             self.groups, cache=self._cache)

    def backward(self, grad_out):
        gx, gw = T.conv2d_nhwc_backward(
            grad_out, self._x, self.effective_weight(), self.stride, self.pad,
            self.groups, cache=self._cache
        )
        if self.binarize:
            gw *= ste_mask(self.weight.value, self.bound)
        self.weight.grad += gw
        self._cache = None
        return gx


class ActQuant(Layer):
    """Activation binarization: ternary sign forward, clipped STE backward.

    mode="tanh" swaps in a tanh (the full-precision pretraining stage);
    backward then uses the true tanh derivative.
    """

    def __init__(self, name, bound=DEFAULT_CLIP_BOUND):
        self.name = name
        self.bound = bound
        self.mode = "sign"
        self._cache = None

    def forward(self, x, train=False):
        if self.mode == "sign":
            out = sign_ternary(x)
            if train:
                self._cache = ("sign", x)
        elif self.mode == "tanh":
            out = np.tanh(x)
            if train:
                self._cache = ("tanh", out)
        else:
            raise ValueError(f"unknown activation-quantization mode {self.mode!r}")
        return out

    def backward(self, grad_out):
        kind, c = self._cache
        if kind == "sign":
            return grad_out * ste_mask(c, self.bound)
        return grad_out * (1.0 - c * c)


class BatchNorm2d(Layer):
    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x, train=False):
        if x.shape[-1] != self.gamma.value.shape[0]:
            raise ShapeError(
                f"{self.name}: channel axis {x.shape[-1]} does not match "
                f"{self.gamma.value.shape[0]}"
            )
        if train:
            n = x.shape[0] * x.shape[1] * x.shape[2]
            mu = T.channel_sum(x) / np.float32(n)
            var = np.maximum(T.channel_sum(x * x) / np.float32(n) - mu * mu, 0.0)
            inv = (1.0 / np.sqrt(var + self.eps)).astype(np.float32)
            xhat = (x - mu) * inv
            m = self.momentum
            self.running_mean += m * (mu - self.running_mean)
            unbiased = var * (n / max(n - 1, 1))
            self.running_var += m * (unbiased - self.running_var)
            self._cache = (xhat, inv, n)
            return self.gamma.value * xhat + self.beta.value
        scale, shift = self.fold()
        return x * scale + shift

    def backward(self, grad_out):
        xhat, inv, n = self._cache
        sum_g_xhat = T.channel_sum(grad_out * xhat)
        self.gamma.grad += sum_g_xhat
        self.beta.grad += T.channel_sum(grad_out)
        g = self.gamma.value
        dxhat = grad_out * g
        mean_dxhat = T.channel_sum(dxhat) / np.float32(n)
        mean_dxhat_xhat = (g * sum_g_xhat) / np.float32(n)
        dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return dx.astype(np.float32, copy=False)

    def fold(self):
        """Inference affine (scale, shift): y = scale * x + shift, float64 fold."""
        inv = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        scale = self.gamma.value.astype(np.float64) * inv
        shift = self.beta.value.astype(np.float64) - self.running_mean.astype(np.float64) * scale
        return scale.astype(np.float32), shift.astype(np.float32)


class ReLU(Layer):
    def __init__(self, name=""):
        self.name = name
        self._mask = None

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._mask


class PReLU(Layer):
    """Single learnable negative slope, initialized at 0.25."""

    def __init__(self, name):
        self.name = name
        self.slope = Parameter(f"{name}.slope", np.array([0.25], dtype=np.float32))
        self._x = None

    def parameters(self):
        return [self.slope]

    def forward(self, x, train=False):
        if train:
            self._x = x
        return np.where(x > 0, x, self.slope.value[0] * x).astype(np.float32)

    def backward(self, grad_out):
        x = self._x
        neg = x <= 0
        self.slope.grad += np.array([(grad_out * x * neg).sum()], dtype=np.float32)
        return grad_out * np.where(x > 0, np.float32(1.0), self.slope.value[0])


class FPReLU(Layer):
    """Per-channel learnable slopes on both sides, initialized to identity."""

    def __init__(self, name, channels):
        self.name = name
        self.left = Parameter(f"{name}.left", np.ones(channels, dtype=np.float32))
        self.right = Parameter(f"{name}.right", np.ones(channels, dtype=np.float32))
        self._x = None
        self._pos = None

    def parameters(self):
        return [self.left, self.right]

    def forward(self, x, train=False):
        pos = x > 0
        if train:
            self._x = x
            self._pos = pos
        return x * np.where(pos, self.right.value, self.left.value)

    def backward(self, grad_out):
        x, pos = self._x, self._pos
        gx_term = grad_out * x
        right_sum = T.channel_sum(np.where(pos, gx_term, 0))
        self.right.grad += right_sum
        self.left.grad += T.channel_sum(gx_term) - right_sum
        return grad_out * np.where(pos, self.right.value, self.left.value)


class Identity(Layer):
    def __init__(self, name=""):
        self.name = name

    def forward(self, x, train=False):
        return x

    def backward(self, grad_out):
        return grad_out


class MaxPool3x3S2(Layer):
    def __init__(self, name=""):
        self.name = name
        self._cache = None

    def forward(self, x, train=False):
        out, arg = T.maxpool_3x3_s2_nhwc(x)
        if train:
            self._cache = (arg, x.shape)
        return out

    def backward(self, grad_out):
        arg, xshape = self._cache
        return T.maxpool_3x3_s2_nhwc_backward(grad_out, arg, xshape)


class AvgPool3x3S2(Layer):
    def __init__(self, name=""):
        self.name = name
        self._xshape = None

    def forward(self, x, train=False):
        self._xshape = x.shape
        return T.avgpool_3x3_s2_nhwc(x)

    def backward(self, grad_out):
        return T.avgpool_3x3_s2_nhwc_backward(grad_out, self._xshape)


class GlobalAvgPool(Layer):
    def __init__(self, name=""):
        self.name = name
        self._xshape = None

    def forward(self, x, train=False):
        self._xshape = x.shape
        return T.global_avg_pool_nhwc(x)

    def backward(self, grad_out):
        return T.global_avg_pool_nhwc_backward(grad_out, self._xshape)


class Flatten(Layer):
    def __init__(self, name=""):
        self.name = name
        self._xshape = None

    def forward(self, x, train=False):
        self._xshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._xshape)


class Linear(Layer):
    def __init__(self, name, in_features, out_features, rng=None):
        self.name = name
        self.weight = Parameter(
            f"{name}.weight", init_weights_xavier((out_features, in_features), gain=1.0, rng=rng)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype=np.float32))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        if train:
            self._x = x
        return T.linear(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        gx, gw, gb = T.linear_backward(grad_out, self._x, self.weight.value)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


def make_nonlinearity(name, kind, channels):
    if kind == "none":
        return Identity(name)
    if kind == "relu":
        return ReLU(name)
    if kind == "prelu":
        return PReLU(name)
    if kind == "fprelu":
        return FPReLU(name, channels)
    raise ValueError(f"unknown nonlinearity {kind!r}")
