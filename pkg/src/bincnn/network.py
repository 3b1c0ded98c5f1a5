"""Network topologies: block plans, presets, and the trainable graph.

A NetworkSpec describes a preset declaratively; block_plan() lowers it to a
list of BlockSpec records from which both the trainable network and the
budget report are derived, so the two can never disagree about topology.

Presets:

* baseline18: 7x7/64 stem + maxpool, 4 stages x 4 binary blocks
  (64/128/256/512), ReLU after every 4th block and FPReLU elsewhere,
  real-valued 1x1 downsampling shortcuts, global-avg-pool + FC head.
* derived18/34/44: 3x3/32 stem + maxpool, a bridge binary conv expanding the
  width to w, stages of grouped binary blocks (w/2w/4w/8w) with the same
  nonlinearity schedule and parameter-free duplicate-and-pool reduction
  shortcuts. Stage depths: (4,4,4,4), (6,8,12,6), (6,8,22,6).
* mnist_toy: one real 3x3/s2 conv stem + two blocks + FC, with a selectable
  per-block nonlinearity (none/relu/prelu/fprelu) and a real-conv switch
  that turns it into the fully linear control model.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .bitkernels import AND, XNOR
from .errors import ConfigError, ShapeError
from .layers import (
    ActQuant,
    AvgPool3x3S2,
    BatchNorm2d,
    BinaryConv2d,
    Flatten,
    GlobalAvgPool,
    Identity,
    Linear,
    MaxPool3x3S2,
    RealConv2d,
    make_nonlinearity,
)

ARCHS = ("baseline18", "derived18", "derived34", "derived44", "mnist_toy")
STAGE_DEPTHS = {
    "baseline18": (4, 4, 4, 4),
    "derived18": (4, 4, 4, 4),
    "derived34": (6, 8, 12, 6),
    "derived44": (6, 8, 22, 6),
}
NONLINEARITIES = ("none", "relu", "prelu", "fprelu")


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    width: int = 0  # derived: stage-1 width; toy: stem width; baseline: fixed 64
    groups: int = 1
    num_classes: int = 1000
    in_channels: int = 3
    in_hw: tuple = (224, 224)
    nonlinearity: str = "schedule"  # toy presets use a concrete kind
    relu_every: int = 4
    toy_real_conv: bool = False
    toy_stem_pool: bool = False
    toy_nl_placement: str = "final_only"  # final_only | first_only | per_block


def make_spec(arch, width=None, groups=1, nonlinearity=None, num_classes=None, **kw):
    """Preset constructor with per-arch defaults. Derived widths of 0 must be
    filled in (directly or by the budget auto-tuner) before building."""
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if arch == "mnist_toy":
        kw.setdefault("toy_stem_pool", True)
        spec = NetworkSpec(
            arch=arch,
            width=16 if width is None else width,
            groups=groups,
            num_classes=10 if num_classes is None else num_classes,
            in_channels=1,
            in_hw=(28, 28),
            nonlinearity="relu" if nonlinearity is None else nonlinearity,
            **kw,
        )
    elif arch == "baseline18":
        spec = NetworkSpec(
            arch=arch,
            width=64,
            groups=groups,
            num_classes=1000 if num_classes is None else num_classes,
            nonlinearity="schedule" if nonlinearity is None else nonlinearity,
            **kw,
        )
    else:
        spec = NetworkSpec(
            arch=arch,
            width=0 if width is None else width,
            groups=groups,
            num_classes=1000 if num_classes is None else num_classes,
            nonlinearity="schedule" if nonlinearity is None else nonlinearity,
            **kw,
        )
    validate_spec(spec, allow_unset_width=spec.width == 0)
    return spec


def reduction_groups(groups):
    """Reduction blocks fall back to 2 groups when the net is ungrouped."""
    return 2 if groups == 1 else groups


def width_step(spec):
    """Widths must keep every stage divisible by its conv groups."""
    if spec.arch == "mnist_toy" or spec.arch == "baseline18":
        return max(1, spec.groups)
    g = spec.groups
    return int(np.lcm(g, reduction_groups(g)))


def validate_spec(spec, allow_unset_width=False):
    if spec.arch not in ARCHS:
        raise ConfigError(f"unknown arch {spec.arch!r}")
    if spec.nonlinearity not in NONLINEARITIES + ("schedule",):
        raise ConfigError(f"unknown nonlinearity {spec.nonlinearity!r}")
    if spec.arch == "mnist_toy":
        if spec.nonlinearity == "schedule":
            raise ConfigError("mnist_toy needs a concrete nonlinearity, not a schedule")
        if spec.width % max(1, spec.groups):
            raise ConfigError(f"toy width {spec.width} not divisible by groups {spec.groups}")
        return
    if spec.width == 0:
        if not allow_unset_width:
            raise ConfigError(f"{spec.arch} width is unset; pass width= or auto-tune it")
        return
    step = width_step(spec)
    if spec.width % step:
        raise ConfigError(
            f"width {spec.width} must be a multiple of {step} for groups={spec.groups}"
        )


@dataclass(frozen=True)
class BlockSpec:
    """One element of the lowered network plan."""

    kind: str  # initial | bridge | normal | reduction_baseline | reduction_derived | head
    name: str
    cin: int
    cout: int
    k: int = 3
    stride: int = 1
    pad: int = 1
    groups: int = 1
    nonlinearity: str = "none"
    variant: str = XNOR  # bit-kernel variant for the block's binary conv
    binary: bool = True  # binary (sign/STE) conv vs real conv
    pool: str = ""  # stems: "max3" or "avg3" after conv+BN
    head_pool: str = "gap"  # heads: "gap" | "avg3flat"
    fc_out: int = 0  # heads: number of classes

    def out_hw(self, hw):
        h, w = hw
        if self.kind == "head":
            return (1, 1)
        oh, ow = T.conv_out_hw(h, w, self.k, self.k, self.stride, self.pad)
        if self.pool in ("max3", "avg3"):
            oh, ow = T.conv_out_hw(oh, ow, 3, 3, 2, 1)
        return (oh, ow)


def _schedule_nonlinearity(spec, index):
    """Global 1-based block index -> nonlinearity kind."""
    if spec.nonlinearity != "schedule":
        return spec.nonlinearity
    return "relu" if index % spec.relu_every == 0 else "fprelu"


def block_plan(spec):
    """Lower a NetworkSpec to the ordered BlockSpec list."""
    validate_spec(spec)
    blocks = []
    if spec.arch == "baseline18":
        blocks.append(
            BlockSpec("initial", "stem", spec.in_channels, 64, k=7, stride=2, pad=3,
                      binary=False, pool="max3")
        )
        stage_width = [64, 128, 256, 512]
    elif spec.arch.startswith("derived"):
        blocks.append(
            BlockSpec("initial", "stem", spec.in_channels, 32, k=3, stride=2, pad=1,
                      binary=False, pool="max3")
        )
        blocks.append(
            BlockSpec("bridge", "bridge", 32, spec.width, nonlinearity="fprelu")
        )
        stage_width = [spec.width * (1 << s) for s in range(4)]
    else:  # mnist_toy
        blocks.append(
            BlockSpec("initial", "stem", spec.in_channels, spec.width, k=3, stride=2,
                      pad=1, binary=False, pool="avg3" if spec.toy_stem_pool else "")
        )
        if spec.toy_nl_placement not in ("per_block", "first_only", "final_only"):
            raise ConfigError(f"unknown toy_nl_placement {spec.toy_nl_placement!r}")
        for b in range(2):
            if spec.toy_nl_placement == "per_block":
                nl = spec.nonlinearity
            elif spec.toy_nl_placement == "first_only":
                nl = spec.nonlinearity if b == 0 else "none"
            else:
                nl = spec.nonlinearity if b == 1 else "none"
            blocks.append(
                BlockSpec(
                    "normal", f"block{b + 1}", spec.width, spec.width,
                    groups=spec.groups,
                    nonlinearity=nl,
                    binary=not spec.toy_real_conv,
                )
            )
        blocks.append(
            BlockSpec("head", "head", spec.width, spec.width, head_pool="avg3flat",
                      fc_out=spec.num_classes)
        )
        return _assign_variants(blocks)

    depths = STAGE_DEPTHS[spec.arch]
    index = 0
    cin = 64 if spec.arch == "baseline18" else spec.width
    for s, depth in enumerate(depths):
        cout = stage_width[s]
        for b in range(depth):
            index += 1
            nl = _schedule_nonlinearity(spec, index)
            name = f"stage{s + 1}.block{b + 1}"
            if s > 0 and b == 0:
                kind = "reduction_baseline" if spec.arch == "baseline18" else "reduction_derived"
                g = spec.groups if spec.arch == "baseline18" else reduction_groups(spec.groups)
                blocks.append(
                    BlockSpec(kind, name, cin, cout, stride=2, groups=g, nonlinearity=nl)
                )
            else:
                blocks.append(
                    BlockSpec("normal", name, cout, cout, groups=spec.groups, nonlinearity=nl)
                )
            cin = cout
    blocks.append(BlockSpec("head", "head", cin, cin, head_pool="gap", fc_out=spec.num_classes))
    return _assign_variants(blocks)


def _assign_variants(blocks):
    """AND-popcount is required exactly when the previous block ends in ReLU."""
    out = []
    prev_nl = "none"
    for b in blocks:
        if b.binary and b.kind in ("bridge", "normal", "reduction_baseline", "reduction_derived"):
            b = replace(b, variant=AND if prev_nl == "relu" else XNOR)
        if b.kind != "head":
            prev_nl = b.nonlinearity
        out.append(b)
    return out


# ---------------------------------------------------------------------------
# Trainable blocks
# ---------------------------------------------------------------------------


def _per_sample_discrepancy(real_out, bin_out):
    """Mean |real - binary| conv output per sample, for feature dumps."""
    d = np.abs(real_out - bin_out)
    return d.reshape(d.shape[0], -1).mean(axis=1)


class _BlockBase:
    def __init__(self, spec: BlockSpec):
        self.spec = spec
        self.name = spec.name

    def parameters(self):
        return [p for layer in self._layers() for p in layer.parameters()]

    def _layers(self):
        raise NotImplementedError

    def forward(self, x, train=False, stats=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class StemBlock(_BlockBase):
    def __init__(self, spec, rng):
        super().__init__(spec)
        self.conv = RealConv2d(f"{spec.name}.conv", spec.cin, spec.cout, spec.k,
                               spec.stride, spec.pad, rng=rng)
        self.conv.need_input_grad = False  # stems are first; skip grad_x
        self.bn = BatchNorm2d(f"{spec.name}.bn", spec.cout)
        if spec.pool == "max3":
            self.pool = MaxPool3x3S2(f"{spec.name}.pool")
        elif spec.pool == "avg3":
            self.pool = AvgPool3x3S2(f"{spec.name}.pool")
        else:
            self.pool = None

    def _layers(self):
        return [self.conv, self.bn]

    def forward(self, x, train=False, stats=None):
        y = self.bn.forward(self.conv.forward(x, train), train)
        if self.pool is not None:
            y = self.pool.forward(y, train)
        return y

    def backward(self, grad):
        if self.pool is not None:
            grad = self.pool.backward(grad)
        return self.conv.backward(self.bn.backward(grad))


class BridgeBlock(_BlockBase):
    """Sign -> binary conv (width expansion) -> BN -> nonlinearity; no shortcut."""

    def __init__(self, spec, rng):
        super().__init__(spec)
        self.act = ActQuant(f"{spec.name}.sign")
        self.conv = BinaryConv2d(f"{spec.name}.conv", spec.cin, spec.cout, spec.k,
                                 spec.stride, spec.pad, spec.groups, rng=rng)
        self.bn = BatchNorm2d(f"{spec.name}.bn", spec.cout)
        self.nl = make_nonlinearity(f"{spec.name}.nl", spec.nonlinearity, spec.cout)

    def _layers(self):
        return [self.conv, self.bn, self.nl]

    def forward(self, x, train=False, stats=None):
        a = self.act.forward(x, train)
        y = self.conv.forward(a, train)
        if stats is not None:
            stats["discrepancy"][self.name] = _per_sample_discrepancy(
                T.conv2d_nhwc(x, self.conv.weight.value, self.spec.stride,
                              self.spec.pad, self.spec.groups), y)
        return self.nl.forward(self.bn.forward(y, train), train)

    def backward(self, grad):
        g = self.bn.backward(self.nl.backward(grad))
        return self.act.backward(self.conv.backward(g))


class NormalBlock(_BlockBase):
    """nonlin(BN(conv(sign(x))) + x); the real-conv flavour drops the sign."""

    def __init__(self, spec, rng):
        super().__init__(spec)
        conv_cls = BinaryConv2d if spec.binary else RealConv2d
        self.act = ActQuant(f"{spec.name}.sign") if spec.binary else None
        self.conv = conv_cls(f"{spec.name}.conv", spec.cin, spec.cout, spec.k,
                             spec.stride, spec.pad, spec.groups, rng=rng)
        self.bn = BatchNorm2d(f"{spec.name}.bn", spec.cout)
        self.nl = make_nonlinearity(f"{spec.name}.nl", spec.nonlinearity, spec.cout)

    def _layers(self):
        return [self.conv, self.bn, self.nl]

    def forward(self, x, train=False, stats=None):
        a = self.act.forward(x, train) if self.act is not None else x
        y = self.conv.forward(a, train)
        if stats is not None and self.spec.binary:
            stats["discrepancy"][self.name] = _per_sample_discrepancy(
                T.conv2d_nhwc(x, self.conv.weight.value, self.spec.stride,
                              self.spec.pad, self.spec.groups), y)
        z = self.bn.forward(y, train) + x
        return self.nl.forward(z, train)

    def backward(self, grad):
        g = self.nl.backward(grad)
        gm = self.conv.backward(self.bn.backward(g))
        if self.act is not None:
            gm = self.act.backward(gm)
        return gm + g


class ReductionBlock(_BlockBase):
    """Stride-2, channel-doubling block.

    Baseline shortcut: 2x2 avgpool s2 -> real 1x1 conv -> BN.
    Derived shortcut: concat(x, x) -> 3x3 avgpool s2 (parameter-free).
    """

    def __init__(self, spec, rng):
        super().__init__(spec)
        self.act = ActQuant(f"{spec.name}.sign")
        self.conv = BinaryConv2d(f"{spec.name}.conv", spec.cin, spec.cout, spec.k,
                                 spec.stride, spec.pad, spec.groups, rng=rng)
        self.bn = BatchNorm2d(f"{spec.name}.bn", spec.cout)
        self.nl = make_nonlinearity(f"{spec.name}.nl", spec.nonlinearity, spec.cout)
        self.baseline = spec.kind == "reduction_baseline"
        if self.baseline:
            self.sc_conv = RealConv2d(f"{spec.name}.sc_conv", spec.cin, spec.cout, 1,
                                      stride=1, pad=0, rng=rng)
            self.sc_bn = BatchNorm2d(f"{spec.name}.sc_bn", spec.cout)
        self._x_shape = None

    def _layers(self):
        base = [self.conv, self.bn, self.nl]
        if self.baseline:
            base += [self.sc_conv, self.sc_bn]
        return base

    def shortcut_parameters(self):
        if self.baseline:
            return self.sc_conv.parameters() + self.sc_bn.parameters()
        return []

    def forward(self, x, train=False, stats=None):
        a = self.act.forward(x, train)
        y = self.conv.forward(a, train)
        if stats is not None:
            stats["discrepancy"][self.name] = _per_sample_discrepancy(
                T.conv2d_nhwc(x, self.conv.weight.value, self.spec.stride,
                              self.spec.pad, self.spec.groups), y)
        y = self.bn.forward(y, train)
        self._x_shape = x.shape
        if self.baseline:
            sc = T.avgpool_2x2_s2_nhwc(x)
            self._sc_in_shape = x.shape
            sc = self.sc_bn.forward(self.sc_conv.forward(sc, train), train)
        else:
            cat = np.concatenate([x, x], axis=-1)
            self._cat_shape = cat.shape
            sc = T.avgpool_3x3_s2_nhwc(cat)
        return self.nl.forward(y + sc, train)

    def backward(self, grad):
        g = self.nl.backward(grad)
        gm = self.act.backward(self.conv.backward(self.bn.backward(g)))
        if self.baseline:
            gsc = self.sc_conv.backward(self.sc_bn.backward(g))
            gsc = T.avgpool_2x2_s2_nhwc_backward(gsc, self._sc_in_shape)
        else:
            gcat = T.avgpool_3x3_s2_nhwc_backward(g, self._cat_shape)
            c = self._x_shape[-1]
            gsc = gcat[..., :c] + gcat[..., c:]
        return gm + gsc


class HeadBlock(_BlockBase):
    """Feature pooling + real-valued fully connected classifier."""

    def __init__(self, spec, in_hw, rng):
        super().__init__(spec)
        if spec.head_pool == "gap":
            self.pool = GlobalAvgPool(f"{spec.name}.gap")
            self.flatten = None
            fc_in = spec.cin
        elif spec.head_pool == "avg3flat":
            self.pool = AvgPool3x3S2(f"{spec.name}.pool")
            self.flatten = Flatten(f"{spec.name}.flatten")
            oh, ow = T.conv_out_hw(in_hw[0], in_hw[1], 3, 3, 2, 1)
            fc_in = spec.cin * oh * ow
        else:
            raise ConfigError(f"unknown head pooling {spec.head_pool!r}")
        self.fc = Linear(f"{spec.name}.fc", fc_in, spec.fc_out, rng=rng)
        self.features = None  # set on forward: FC input, for feature dumps

    def _layers(self):
        return [self.fc]

    def forward(self, x, train=False, stats=None):
        y = self.pool.forward(x, train)
        if self.flatten is not None:
            y = self.flatten.forward(y, train)
        self.features = y
        return self.fc.forward(y, train)

    def backward(self, grad):
        g = self.fc.backward(grad)
        if self.flatten is not None:
            g = self.flatten.backward(g)
        return self.pool.backward(g)


_BLOCK_BUILDERS = {
    "initial": StemBlock,
    "bridge": BridgeBlock,
    "normal": NormalBlock,
    "reduction_baseline": ReductionBlock,
    "reduction_derived": ReductionBlock,
}


class Network:
    """Fixed-topology trainable network (single-writer during training)."""

    def __init__(self, spec: NetworkSpec, seed=0):
        validate_spec(spec)
        self.spec = spec
        self.plan = block_plan(spec)
        rng = np.random.default_rng(seed)
        self.blocks = []
        hw = spec.in_hw
        for bs in self.plan:
            if bs.kind == "head":
                self.blocks.append(HeadBlock(bs, hw, rng))
            else:
                self.blocks.append(_BLOCK_BUILDERS[bs.kind](bs, rng))
            hw = bs.out_hw(hw)

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def forward(self, x, train=False, stats=None):
        x = T.as_f32(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected (N,{self.spec.in_channels},H,W) input, got {x.shape}"
            )
        x = T.nchw_to_nhwc(x)  # layers run channels-last
        for b in self.blocks:
            x = b.forward(x, train=train, stats=stats)
        return x

    def backward(self, grad_logits):
        g = grad_logits
        for b in reversed(self.blocks):
            g = b.backward(g)
        return g

    @property
    def features(self):
        return self.blocks[-1].features

    def set_stage(self, act_mode="sign", weight_mode="binary"):
        """Multi-step training switches: activation sign/tanh, weights binary/real."""
        if act_mode not in ("sign", "tanh") or weight_mode not in ("binary", "real"):
            raise ConfigError(f"bad stage modes: {act_mode!r}/{weight_mode!r}")
        for b in self.blocks:
            for attr in ("act",):
                act = getattr(b, attr, None)
                if isinstance(act, ActQuant):
                    act.mode = act_mode
            conv = getattr(b, "conv", None)
            if isinstance(conv, BinaryConv2d):
                conv.binarize = weight_mode == "binary"

    # -- state serialization ------------------------------------------------

    def state_arrays(self):
        """Ordered (name, array) pairs: parameters plus BN running stats."""
        out = []
        for b in self.blocks:
            for p in b.parameters():
                out.append((p.name, p.value))
            for layer in _bn_layers(b):
                out.append((f"{layer.name}.running_mean", layer.running_mean))
                out.append((f"{layer.name}.running_var", layer.running_var))
        return out

    def load_state_arrays(self, mapping):
        for b in self.blocks:
            for p in b.parameters():
                arr = mapping[p.name]
                if arr.shape != p.value.shape:
                    raise ShapeError(
                        f"{p.name}: checkpoint shape {arr.shape} != model {p.value.shape}"
                    )
                p.value[...] = arr
            for layer in _bn_layers(b):
                layer.running_mean[...] = mapping[f"{layer.name}.running_mean"]
                layer.running_var[...] = mapping[f"{layer.name}.running_var"]

    def find_first_nonfinite(self, x):
        """Name of the first block whose output is non-finite, for diagnostics."""
        x = T.nchw_to_nhwc(T.as_f32(x))
        for b in self.blocks:
            x = b.forward(x, train=False)
            if not np.isfinite(x).all():
                return b.name
        return None


def _bn_layers(block):
    out = []
    for attr in ("bn", "sc_bn"):
        layer = getattr(block, attr, None)
        if isinstance(layer, BatchNorm2d):
            out.append(layer)
    return out


def build_network(spec, seed=0):
    return Network(spec, seed=seed)


# ---------------------------------------------------------------------------
# Plain-text spec config (key=value), consumed by the CLI
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {
    "arch": str,
    "width": int,
    "groups": int,
    "num_classes": int,
    "in_channels": int,
    "in_h": int,
    "in_w": int,
    "nonlinearity": str,
    "relu_every": int,
    "toy_real_conv": bool,
    "toy_stem_pool": bool,
    "toy_nl_placement": str,
}


def format_config(spec):
    h, w = spec.in_hw
    values = {
        "arch": spec.arch, "width": spec.width, "groups": spec.groups,
        "num_classes": spec.num_classes, "in_channels": spec.in_channels,
        "in_h": h, "in_w": w, "nonlinearity": spec.nonlinearity,
        "relu_every": spec.relu_every,
        "toy_real_conv": str(spec.toy_real_conv).lower(),
        "toy_stem_pool": str(spec.toy_stem_pool).lower(),
        "toy_nl_placement": spec.toy_nl_placement,
    }
    return "".join(f"{k}={values[k]}\n" for k in _CONFIG_FIELDS)


def parse_config(text):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        kind = _CONFIG_FIELDS[key]
        if kind is bool:
            if value.lower() not in ("true", "false", "0", "1"):
                raise ConfigError(f"config line {lineno}: bad bool {value!r}")
            raw[key] = value.lower() in ("true", "1")
        else:
            raw[key] = kind(value)
    if "arch" not in raw:
        raise ConfigError("config is missing required key 'arch'")
    spec = make_spec(
        raw.pop("arch"),
        width=raw.pop("width", 0) or None,
        groups=raw.pop("groups", 1),
        nonlinearity=raw.pop("nonlinearity", None),
        num_classes=raw.pop("num_classes", None),
    )
    if "in_h" in raw or "in_w" in raw:
        h, w = spec.in_hw
        raw["in_hw"] = (raw.pop("in_h", h), raw.pop("in_w", w))
    if raw:
        spec = replace(spec, **raw)
    validate_spec(spec, allow_unset_width=spec.width == 0)
    return spec
