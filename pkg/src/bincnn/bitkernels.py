"""Integer convolution kernels over bit-packed tensors.

Two variants:

* XNOR: per output site, popcount(x xnor w) over the valid window, lifted to
  the signed dot product via 2*popcount - K. Correct when the pre-sign
  activations contain no exact zeros.
* AND: popcount(x and w) - popcount(x and not w). Already the signed sum, and
  it maps zero activations (ReLU-truncated values, zero padding) to a zero
  contribution, matching the ternary float path exactly.

Padding never enters a popcount: out-of-image taps are skipped per site, so
both kernels agree with the float reference (which zero-pads) at borders.
Group support works on whole words through per-group lane masks.
"""

import math
from dataclasses import dataclass

import numpy as np

from .binarize import BitTensor, lane_mask, words_per_site
from .errors import ConfigError, ShapeError
from .tensor import conv_out_hw

XNOR = "xnor"
AND = "and"

# Budget accounting hook: one AND-variant output element costs two bit ops
# per reduction lane (two popcounted products) versus one for XNOR.
VARIANT_BOP_FACTOR = {XNOR: 1, AND: 2}


@dataclass(frozen=True)
class BitConvPlan:
    stride: int = 1
    pad: int = 0
    groups: int = 1
    variant: str = XNOR

    def __post_init__(self):
        if self.variant not in (XNOR, AND):
            raise ConfigError(f"unknown bit-conv variant {self.variant!r}")
        if self.stride < 1 or self.pad < 0 or self.groups < 1:
            raise ConfigError(
                f"invalid plan: stride={self.stride}, pad={self.pad}, groups={self.groups}"
            )

    def reduction_length(self, cin, k):
        """Bits reduced per full-window output site: (C_in/groups) * k * k."""
        return (cin // self.groups) * k * k


def _check_geometry(xb, wb, plan):
    n, cin, h, w = xb.shape
    cout, cg, kh, kw = wb.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kh}x{kw}")
    if cin % plan.groups or cout % plan.groups:
        raise ConfigError(
            f"groups={plan.groups} must divide C_in={cin} and C_out={cout}"
        )
    if cg != cin // plan.groups:
        raise ShapeError(
            f"weight axis C_in/groups is {cg}, expected {cin // plan.groups}"
        )
    return n, cin, h, w, cout, cg, kh


def align_weight_words(wb: BitTensor, cin, groups):
    """Expand packed weights onto the activation word layout.

    Returns (words, masks): words[co, i, j, :] carries output channel co's
    weight bits placed in its group's channel lanes (zero elsewhere);
    masks[co, :] is the uint64 lane mask of that group.
    """
    cout, cg, k, _ = wb.shape
    wbits = (
        np.unpackbits(wb.words.view(np.uint8), axis=-1, bitorder="little")[..., :cg]
        .astype(bool)
    )  # (cout, k, k, cg)
    nw = words_per_site(cin)
    full = np.zeros((cout, k, k, nw * 64), dtype=bool)
    cog = cout // groups
    for g in range(groups):
        rows = slice(g * cog, (g + 1) * cog)
        full[rows, :, :, g * cg : (g + 1) * cg] = wbits[rows]
    words = np.packbits(full, axis=-1, bitorder="little").view(np.uint64)
    masks = np.empty((cout, nw), dtype=np.uint64)
    for g in range(groups):
        masks[g * cog : (g + 1) * cog] = lane_mask(cin, g * cg, (g + 1) * cg)
    return np.ascontiguousarray(words), masks


def _tap_ranges(out_dim, in_dim, tap, stride, pad):
    """Output index range [lo, hi) whose input row for this tap is in-image."""
    lo = max(0, math.ceil((pad - tap) / stride))
    hi = min(out_dim, (in_dim - 1 + pad - tap) // stride + 1)
    return lo, hi


def _popcount_conv(xb, wb, plan):
    """Shared tap loop. Returns (pos, neg, valid_taps) accumulators.

    pos/neg are (N, OH, OW, C_out) int32 popcount sums; for XNOR only pos is
    used. valid_taps is (OH, OW) int32: in-image taps per output site.
    """
    n, cin, h, w, cout, cg, k = _check_geometry(xb, wb, plan)
    oh, ow = conv_out_hw(h, w, k, k, plan.stride, plan.pad)
    wwords, masks = align_weight_words(wb, cin, plan.groups)
    x = xb.words
    pos = np.zeros((n, oh, ow, cout), dtype=np.int32)
    neg = np.zeros_like(pos) if plan.variant == AND else None
    valid = np.zeros((oh, ow), dtype=np.int32)
    not_w = (~wwords) & masks[:, None, None, :] if plan.variant == AND else None
    for i in range(k):
        olo, ohi = _tap_ranges(oh, h, i, plan.stride, plan.pad)
        if olo >= ohi:
            continue
        for j in range(k):
            wlo, whi = _tap_ranges(ow, w, j, plan.stride, plan.pad)
            if wlo >= whi:
                continue
            ih0 = olo * plan.stride - plan.pad + i
            iw0 = wlo * plan.stride - plan.pad + j
            xs = x[
                :,
                ih0 : ih0 + plan.stride * (ohi - olo) : plan.stride,
                iw0 : iw0 + plan.stride * (whi - wlo) : plan.stride,
                None,
                :,
            ]
            wt = wwords[:, i, j, :]
            if plan.variant == XNOR:
                m = (~(xs ^ wt)) & masks
                pos[:, olo:ohi, wlo:whi, :] += np.bitwise_count(m).sum(
                    axis=-1, dtype=np.int32
                )
            else:
                pos[:, olo:ohi, wlo:whi, :] += np.bitwise_count(xs & wt).sum(
                    axis=-1, dtype=np.int32
                )
                neg[:, olo:ohi, wlo:whi, :] += np.bitwise_count(
                    xs & not_w[:, i, j, :]
                ).sum(axis=-1, dtype=np.int32)
            valid[olo:ohi, wlo:whi] += 1
    return pos, neg, valid, cg


def conv2d_xnor(xb, wb, plan, return_popcount=False, channels_last=False):
    """XNOR-popcount convolution lifted to the signed domain (2*pop - K).

    With return_popcount=True also returns the raw per-site popcount map and
    the per-site valid reduction length K. channels_last=True skips the
    NCHW transposition of the outputs.
    """
    if plan.variant != XNOR:
        raise ConfigError(f"plan variant {plan.variant!r} passed to conv2d_xnor")
    pop, _, valid, cg = _popcount_conv(xb, wb, plan)
    kvalid = valid * cg  # (OH, OW)
    out = (2 * pop - kvalid[None, :, :, None]).astype(np.float32)
    if not channels_last:
        out = out.transpose(0, 3, 1, 2)
        pop = pop.transpose(0, 3, 1, 2)
    if return_popcount:
        return out, pop, kvalid
    return out


def conv2d_and(xb, wb, plan, channels_last=False):
    """AND-popcount convolution: popcount(x & w) - popcount(x & ~w)."""
    if plan.variant != AND:
        raise ConfigError(f"plan variant {plan.variant!r} passed to conv2d_and")
    pos, neg, _, _ = _popcount_conv(xb, wb, plan)
    out = (pos - neg).astype(np.float32)
    return out if channels_last else out.transpose(0, 3, 1, 2)


def discrepancy(real_out, bin_out):
    """Mean absolute difference between real-valued and binary conv outputs."""
    real_out = np.asarray(real_out)
    bin_out = np.asarray(bin_out)
    if real_out.shape != bin_out.shape:
        raise ShapeError(
            f"discrepancy operands differ in shape: {real_out.shape} vs {bin_out.shape}"
        )
    return float(np.abs(real_out.astype(np.float64) - bin_out).mean())
