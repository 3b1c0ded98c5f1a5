"""Sign functions, straight-through gradients, and channel-major bit packing.

Two sign semantics coexist: the float training path uses the ternary sign
(-1/0/+1, so an exact 0 stays 0), while the bit domain is strictly binary
(bit = 1 iff value > 0). The AND-popcount kernel variant exists to keep the
two paths equal when zeros occur (see bitkernels).
"""

from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, ShapeError

DEFAULT_CLIP_BOUND = 1.2

WORD_BITS = 64


def sign_ternary(x):
    """Elementwise -1/0/+1 sign; the float-domain reference semantics."""
    return np.sign(x, dtype=np.float32) if x.dtype == np.float32 else np.sign(x).astype(np.float32)


def ste_mask(x, bound=DEFAULT_CLIP_BOUND):
    """Clipping-surrogate pass mask: 1 where |x| <= bound (boundary inclusive)."""
    if bound <= 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    return (np.abs(x) <= bound).astype(np.float32)


def sign_ste_backward(grad_out, x, bound=DEFAULT_CLIP_BOUND):
    """Straight-through gradient of sign: pass where the clamp surrogate is live."""
    return grad_out * ste_mask(x, bound)


def binarize_weights(w, bound=DEFAULT_CLIP_BOUND):
    """Forward of weight binarization: the ternary sign of the proxy weights."""
    del bound  # forward is bound-free; the bound shapes only the backward
    return sign_ternary(w)


def binarize_weights_backward(grad_out, w, bound=DEFAULT_CLIP_BOUND):
    return grad_out * ste_mask(w, bound)


def init_weights_xavier(shape, gain=2.0, rng=None):
    """Zero-mean normal with std = gain * sqrt(2 / (fan_in + fan_out)).

    For conv weights (C_out, C_in/g, k, k): fan_in = C_in/g * k * k and
    fan_out = C_out * k * k.
    """
    if rng is None:
        rng = np.random.default_rng()
    if len(shape) == 4:
        cout, cin_g, kh, kw = shape
        fan_in = cin_g * kh * kw
        fan_out = cout * kh * kw
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        raise ShapeError(f"expected conv or linear weight shape, got {shape}")
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape).astype(np.float32)


@dataclass(frozen=True)
class BitTensor:
    """Channel-major bit-packed {0,1} tensor.

    `words[n, h, w, j]` holds channels j*64 .. j*64+63 at spatial site
    (n, h, w); bit position c % 64 (LSB = channel 0) is 1 iff the source
    float value was > 0. Trailing pad bits in the last word per site are
    always 0, which the whole-word popcount kernels rely on.
    """

    shape: tuple  # logical (N, C, H, W)
    words: np.ndarray  # uint64, (N, H, W, n_words)

    @property
    def n_words(self):
        return self.words.shape[-1]

    @property
    def pad_bits(self):
        return self.n_words * WORD_BITS - self.shape[1]


def words_per_site(channels):
    return (channels + WORD_BITS - 1) // WORD_BITS


def bitpack(x):
    """Pack a float NCHW tensor into bits: bit = 1 iff value > 0."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.ndim} axes")
    return bitpack_nhwc(x.transpose(0, 2, 3, 1))


def bitpack_nhwc(x):
    """bitpack for channels-last input (the packing-native layout)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got {x.ndim} axes")
    n, h, w, c = x.shape
    nw = words_per_site(c)
    bits = x > 0
    if nw * WORD_BITS != c:
        padded = np.zeros((n, h, w, nw * WORD_BITS), dtype=bool)
        padded[..., :c] = bits
        bits = padded
    packed = np.packbits(bits, axis=-1, bitorder="little")
    words = packed.view(np.uint64)
    return BitTensor(shape=(n, c, h, w), words=np.ascontiguousarray(words))


def bitunpack(xb):
    """Inverse of bitpack: {0,1} float mask. Fails if pad bits are corrupt."""
    n, c, h, w = xb.shape
    raw = np.unpackbits(xb.words.view(np.uint8), axis=-1, bitorder="little")
    if raw[..., c:].any():
        raise IntegrityError(
            f"nonzero padding bits in BitTensor with {c} channels per site"
        )
    return raw[..., :c].transpose(0, 3, 1, 2).astype(np.float32)


def lane_mask(channels, lo, hi):
    """uint64 word vector with bits [lo, hi) set; lanes >= channels stay 0."""
    nw = words_per_site(channels)
    bits = np.zeros(nw * WORD_BITS, dtype=bool)
    bits[lo:hi] = True
    return np.packbits(bits, bitorder="little").view(np.uint64)
