"""FLOPs/BOPs/parameter auditor over a NetworkSpec.

Cost model (calibrated against the reported complexity tables of this model
family; see README):

* one multiply-accumulate = 1 FLOP (real conv, FC) or 1 BOP (binary conv);
* AND-variant binary convs cost 2x the BOPs of XNOR for the same geometry;
* batch-norm counts 1 FLOP per output element (its inference affine);
* pooling counts 1 FLOP per element in each window (9 for 3x3, 4 for 2x2,
  H*W per channel for global average pooling);
* residual adds and activation functions are not billed.

The effective budget folds BOPs into FLOP-equivalents at 1/64, and packed
parameter counts fold binary weights at 1/32.
"""

import csv
import io
import json
from dataclasses import dataclass, replace

from .bitkernels import VARIANT_BOP_FACTOR
from .errors import ConfigError
from .network import NetworkSpec, block_plan, make_spec, validate_spec, width_step
from .tensor import conv_out_hw

BOPS_PER_FLOP = 64
BITS_PER_FLOAT_PARAM = 32


@dataclass(frozen=True)
class BudgetRow:
    name: str
    kind: str
    flops: int
    bops: int
    params_float: int
    params_binary: int


@dataclass(frozen=True)
class BudgetReport:
    rows: tuple
    input_dims: tuple  # (C, H, W)

    @property
    def flops(self):
        return sum(r.flops for r in self.rows)

    @property
    def bops(self):
        return sum(r.bops for r in self.rows)

    @property
    def params_float(self):
        return sum(r.params_float for r in self.rows)

    @property
    def params_binary(self):
        return sum(r.params_binary for r in self.rows)

    @property
    def effective_flops(self):
        return self.flops + self.bops / BOPS_PER_FLOP

    @property
    def packed_params(self):
        return self.params_float + self.params_binary / BITS_PER_FLOAT_PARAM

    def to_dict(self):
        return {
            "input_dims": list(self.input_dims),
            "rows": [vars(r) for r in self.rows],
            "totals": {
                "flops": self.flops,
                "bops": self.bops,
                "effective_flops": self.effective_flops,
                "params_float": self.params_float,
                "params_binary": self.params_binary,
                "packed_params": self.packed_params,
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["name", "kind", "flops", "bops", "params_float", "params_binary"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, r.flops, r.bops, r.params_float, r.params_binary])
        writer.writerow(["total", "", self.flops, self.bops, self.params_float, self.params_binary])
        return buf.getvalue()

    def summary(self):
        return (
            f"FLOPs {self.flops / 1e6:.1f}M  BOPs {self.bops / 1e6:.0f}M  "
            f"effective {self.effective_flops / 1e6:.1f}M  "
            f"params {self.packed_params / 1e6:.2f}M packed "
            f"({self.params_float / 1e6:.2f}M float + {self.params_binary / 1e6:.2f}M binary)"
        )


def _nl_params(kind, channels):
    if kind == "fprelu":
        return 2 * channels
    if kind == "prelu":
        return 1
    return 0


def count(spec: NetworkSpec, input_dims=None) -> BudgetReport:
    """Audit a network spec. input_dims=(C,H,W) defaults to the preset input."""
    validate_spec(spec)
    if input_dims is None:
        input_dims = (spec.in_channels, *spec.in_hw)
    c, h, w = input_dims
    if c != spec.in_channels:
        raise ConfigError(
            f"input has {c} channels but spec expects {spec.in_channels}"
        )
    rows = []
    hw = (h, w)
    for b in block_plan(spec):
        flops = 0
        bops = 0
        pf = 0
        pb = 0
        if b.kind == "head":
            if b.head_pool == "gap":
                flops += hw[0] * hw[1] * b.cin  # one add per pooled element
                fc_in = b.cin
            else:
                ph, pw = conv_out_hw(hw[0], hw[1], 3, 3, 2, 1)
                flops += 9 * ph * pw * b.cin
                fc_in = b.cin * ph * pw
            flops += fc_in * b.fc_out
            pf += fc_in * b.fc_out + b.fc_out
            rows.append(BudgetRow(b.name, b.kind, flops, bops, pf, pb))
            continue

        oh, ow = conv_out_hw(hw[0], hw[1], b.k, b.k, b.stride, b.pad)
        macs = oh * ow * b.cout * (b.cin // b.groups) * b.k * b.k
        wparams = b.cout * (b.cin // b.groups) * b.k * b.k
        if b.binary:
            bops += macs * VARIANT_BOP_FACTOR[b.variant]
            pb += wparams
        else:
            flops += macs
            pf += wparams
        flops += oh * ow * b.cout  # BN inference affine
        pf += 2 * b.cout  # BN gamma/beta
        pf += _nl_params(b.nonlinearity, b.cout)

        if b.kind == "initial" and b.pool in ("max3", "avg3"):
            ph, pw = conv_out_hw(oh, ow, 3, 3, 2, 1)
            flops += 9 * ph * pw * b.cout
            oh, ow = ph, pw
        elif b.kind == "reduction_baseline":
            # 2x2 avgpool s2 -> real 1x1 conv -> BN
            sh, sw = conv_out_hw(hw[0], hw[1], 2, 2, 2, 0)
            flops += 4 * sh * sw * b.cin
            flops += oh * ow * b.cout * b.cin
            flops += oh * ow * b.cout
            pf += b.cout * b.cin + 2 * b.cout
        elif b.kind == "reduction_derived":
            # concat is free; 3x3 avgpool s2 over the duplicated volume
            flops += 9 * oh * ow * b.cout

        rows.append(BudgetRow(b.name, b.kind, flops, bops, pf, pb))
        hw = b.out_hw(hw)
    return BudgetReport(rows=tuple(rows), input_dims=tuple(input_dims))


def params(spec: NetworkSpec):
    """(float_count, binary_count, packed_equivalent) for a spec."""
    report = count(spec)
    return report.params_float, report.params_binary, report.packed_params


def tune_width(spec: NetworkSpec, target_mflops, max_width=8192):
    """Smallest-|error| integer width whose effective budget hits the target.

    Deterministic: scans valid widths upward until the effective budget
    crosses the target, then keeps the closer of the two candidates, breaking
    ties toward the smaller width.
    """
    if spec.arch in ("baseline18", "mnist_toy"):
        raise ConfigError(f"width tuning applies to derived archs, not {spec.arch}")
    step = width_step(spec)
    target = target_mflops * 1e6
    prev = None  # (width, |err|)
    width = step
    while width <= max_width:
        eff = count(replace(spec, width=width)).effective_flops
        err = abs(eff - target)
        if eff >= target:
            if prev is not None and prev[1] <= err:
                return prev[0]
            return width
        prev = (width, err)
        width += step
    raise ConfigError(
        f"no width <= {max_width} reaches {target_mflops}M effective FLOPs"
    )


def tuned_spec(arch, groups=1, target_mflops=None, **kw):
    """Preset helper: derived spec with width auto-tuned to a budget class."""
    spec = make_spec(arch, groups=groups, **kw)
    if spec.arch.startswith("derived") and spec.width == 0:
        if target_mflops is None:
            target_mflops = 135 if arch == "derived44" else 90
        spec = replace(spec, width=tune_width(spec, target_mflops))
    return spec
