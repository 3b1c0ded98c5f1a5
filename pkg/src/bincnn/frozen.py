"""FrozenModel: the exported inference artifact and its bit-domain runner.

File layout (all integers little-endian):

    magic "FTBN" | version u16 | topology hash u64 | config_len u32 |
    config text (key=value network spec) | record_count u32 | records... |
    CRC32 u32 over every preceding byte

Each record: kind u8, name (u16 length + utf8), then kind-specific payload.
Binary conv weights are stored as one contiguous bit stream ordered
(c_out, kh, kw, c_in/g) with the channel axis fastest, packed LSB-first into
little-endian 64-bit words (bit 0 of word 0 = channel 0); trailing pad bits
are zero. Batch norm is stored folded: per-channel float32 scale and shift.

Inference uses the XNOR/AND popcount kernels for every binary conv and
plain float32 math for everything else, so a frozen model never touches the
proxy weights.
"""

import hashlib
import struct
import zlib

import numpy as np

from . import tensor as T
from .binarize import bitpack, bitpack_nhwc
from .bitkernels import AND, XNOR, BitConvPlan, conv2d_and, conv2d_xnor
from .errors import ConfigError, IntegrityError, ShapeError
from .layers import BinaryConv2d
from .network import Network, format_config, parse_config

MAGIC = b"FTBN"
VERSION = 1

KIND_STEM = 1
KIND_BRIDGE = 2
KIND_NORMAL = 3
KIND_REDUCTION_BASELINE = 4
KIND_REDUCTION_DERIVED = 5
KIND_HEAD = 6

NL_TAGS = {"none": 0, "relu": 1, "prelu": 2, "fprelu": 3}
NL_NAMES = {v: k for k, v in NL_TAGS.items()}
VARIANT_TAGS = {"none": 0, XNOR: 1, AND: 2}
VARIANT_NAMES = {v: k for k, v in VARIANT_TAGS.items()}


# ---------------------------------------------------------------------------
# Bit stream helpers
# ---------------------------------------------------------------------------


def pack_weight_bits(w):
    """Sign bits of (C_out, C_in/g, kh, kw) weights as a contiguous word
    stream ordered (c_out, kh, kw, c); bit = 1 iff weight > 0."""
    bits = (w > 0).transpose(0, 2, 3, 1).reshape(-1)
    pad = (-bits.size) % 64
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=bool)])
    return np.packbits(bits, bitorder="little").view("<u8")


def unpack_weight_bits(words, shape):
    """Inverse of pack_weight_bits -> float32 {-1,+1} weights."""
    cout, cg, kh, kw = shape
    total = cout * cg * kh * kw
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")
    if bits[total:].any():
        raise IntegrityError("nonzero padding bits in packed weight stream")
    signs = bits[:total].reshape(cout, kh, kw, cg).transpose(0, 3, 1, 2)
    return (signs.astype(np.float32) * 2.0 - 1.0)


# ---------------------------------------------------------------------------
# Record construction from a trained network
# ---------------------------------------------------------------------------


def _nl_record(block):
    spec = block.spec
    rec = {"nonlinearity": spec.nonlinearity}
    if spec.nonlinearity == "prelu":
        rec["slope"] = block.nl.slope.value.copy()
    elif spec.nonlinearity == "fprelu":
        rec["left"] = block.nl.left.value.copy()
        rec["right"] = block.nl.right.value.copy()
    return rec


def _conv_payload(block, nudge_zeros):
    spec = block.spec
    conv = block.conv
    binary = isinstance(conv, BinaryConv2d)
    w = conv.weight.value
    rec = {
        "cin": spec.cin, "cout": spec.cout, "k": spec.k,
        "stride": spec.stride, "pad": spec.pad, "groups": spec.groups,
        "binary": binary,
        "variant": spec.variant if binary else "none",
    }
    if binary:
        if (w == 0).any():
            if not nudge_zeros:
                raise ConfigError(
                    f"{conv.name}: exact-zero proxy weights cannot be exported "
                    "to the strictly binary domain; re-run with nudge_zeros"
                )
            w = np.where(w == 0, np.float32(-1e-6), w)
        rec["weight_bits"] = pack_weight_bits(w)
    else:
        rec["weight"] = w.copy()
    scale, shift = block.bn.fold()
    rec["bn_scale"] = scale
    rec["bn_shift"] = shift
    return rec


def export_records(network: Network, nudge_zeros=False):
    """Lower a trained network to FrozenModel records."""
    records = []
    for block in network.blocks:
        bs = block.spec
        if bs.kind == "initial":
            rec = _conv_payload(block, nudge_zeros)
            rec.update(kind=KIND_STEM, name=bs.name, pool=bs.pool, nonlinearity="none")
            records.append(rec)
        elif bs.kind == "bridge":
            rec = _conv_payload(block, nudge_zeros)
            rec.update(kind=KIND_BRIDGE, name=bs.name, **_nl_record(block))
            records.append(rec)
        elif bs.kind == "normal":
            rec = _conv_payload(block, nudge_zeros)
            rec.update(kind=KIND_NORMAL, name=bs.name, **_nl_record(block))
            records.append(rec)
        elif bs.kind in ("reduction_baseline", "reduction_derived"):
            rec = _conv_payload(block, nudge_zeros)
            kind = (KIND_REDUCTION_BASELINE if bs.kind == "reduction_baseline"
                    else KIND_REDUCTION_DERIVED)
            rec.update(kind=kind, name=bs.name, **_nl_record(block))
            if bs.kind == "reduction_baseline":
                rec["sc_weight"] = block.sc_conv.weight.value.copy()
                sc_scale, sc_shift = block.sc_bn.fold()
                rec["sc_bn_scale"] = sc_scale
                rec["sc_bn_shift"] = sc_shift
            records.append(rec)
        elif bs.kind == "head":
            records.append({
                "kind": KIND_HEAD, "name": bs.name, "head_pool": bs.head_pool,
                "fc_weight": block.fc.weight.value.copy(),
                "fc_bias": block.fc.bias.value.copy(),
            })
        else:
            raise ConfigError(f"cannot export block kind {bs.kind!r}")
    return records


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _w_str(buf, s):
    raw = s.encode()
    buf += struct.pack("<H", len(raw))
    buf += raw


def _w_f32(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf += struct.pack("<I", arr.size)
    buf += arr.tobytes()


def _w_shape(buf, shape):
    buf += struct.pack("<B", len(shape))
    buf += struct.pack(f"<{len(shape)}I", *shape)


def _serialize_record(buf, rec):
    buf += struct.pack("<B", rec["kind"])
    _w_str(buf, rec["name"])
    if rec["kind"] == KIND_HEAD:
        buf += struct.pack("<B", 0 if rec["head_pool"] == "gap" else 1)
        _w_shape(buf, rec["fc_weight"].shape)
        _w_f32(buf, rec["fc_weight"])
        _w_f32(buf, rec["fc_bias"])
        return
    buf += struct.pack(
        "<6I", rec["cin"], rec["cout"], rec["k"], rec["stride"], rec["pad"], rec["groups"]
    )
    buf += struct.pack("<BB", int(rec["binary"]), VARIANT_TAGS[rec["variant"]])
    if rec["binary"]:
        words = np.ascontiguousarray(rec["weight_bits"], dtype="<u8")
        buf += struct.pack("<I", words.size)
        buf += words.tobytes()
    else:
        _w_f32(buf, rec["weight"])
    _w_f32(buf, rec["bn_scale"])
    _w_f32(buf, rec["bn_shift"])
    if rec["kind"] == KIND_STEM:
        pool_tag = {"": 0, "max3": 1, "avg3": 2}[rec.get("pool", "")]
        buf += struct.pack("<B", pool_tag)
        return
    buf += struct.pack("<B", NL_TAGS[rec["nonlinearity"]])
    if rec["nonlinearity"] == "prelu":
        _w_f32(buf, rec["slope"])
    elif rec["nonlinearity"] == "fprelu":
        _w_f32(buf, rec["left"])
        _w_f32(buf, rec["right"])
    if rec["kind"] == KIND_REDUCTION_BASELINE:
        _w_shape(buf, rec["sc_weight"].shape)
        _w_f32(buf, rec["sc_weight"])
        _w_f32(buf, rec["sc_bn_scale"])
        _w_f32(buf, rec["sc_bn_shift"])


class _Reader:
    def __init__(self, blob, offset):
        self.blob = blob
        self.o = offset

    def take(self, n, what):
        if self.o + n > len(self.blob):
            raise IntegrityError(f"truncated FrozenModel at byte {self.o}: {what}")
        out = self.blob[self.o : self.o + n]
        self.o += n
        return out

    def u8(self, what="u8"):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what="u16"):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self):
        n = self.u16("string length")
        return self.take(n, "string").decode()

    def f32(self, what="f32 array"):
        n = self.u32(what)
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").copy()

    def shape(self):
        rank = self.u8("shape rank")
        return struct.unpack(f"<{rank}I", self.take(4 * rank, "shape"))


def _deserialize_record(r: _Reader):
    kind = r.u8("record kind")
    name = r.string()
    if kind == KIND_HEAD:
        pool = "gap" if r.u8("head pool") == 0 else "avg3flat"
        shape = r.shape()
        fc_w = r.f32("fc weight").reshape(shape)
        fc_b = r.f32("fc bias")
        return {"kind": kind, "name": name, "head_pool": pool,
                "fc_weight": fc_w, "fc_bias": fc_b}
    cin, cout, k, stride, pad, groups = struct.unpack("<6I", r.take(24, "conv dims"))
    binary = bool(r.u8("binary flag"))
    variant = VARIANT_NAMES[r.u8("variant tag")]
    rec = {"kind": kind, "name": name, "cin": cin, "cout": cout, "k": k,
           "stride": stride, "pad": pad, "groups": groups,
           "binary": binary, "variant": variant}
    if binary:
        nwords = r.u32("weight word count")
        rec["weight_bits"] = np.frombuffer(r.take(8 * nwords, "weight words"), dtype="<u8").view("<u8").copy()
    else:
        rec["weight"] = r.f32("real weights").reshape(cout, cin // groups, k, k)
    rec["bn_scale"] = r.f32("bn scale")
    rec["bn_shift"] = r.f32("bn shift")
    if kind == KIND_STEM:
        rec["pool"] = {0: "", 1: "max3", 2: "avg3"}[r.u8("stem pool")]
        rec["nonlinearity"] = "none"
        return rec
    rec["nonlinearity"] = NL_NAMES[r.u8("nonlinearity tag")]
    if rec["nonlinearity"] == "prelu":
        rec["slope"] = r.f32("prelu slope")
    elif rec["nonlinearity"] == "fprelu":
        rec["left"] = r.f32("fprelu left")
        rec["right"] = r.f32("fprelu right")
    if kind == KIND_REDUCTION_BASELINE:
        shape = r.shape()
        rec["sc_weight"] = r.f32("shortcut weights").reshape(shape)
        rec["sc_bn_scale"] = r.f32("shortcut bn scale")
        rec["sc_bn_shift"] = r.f32("shortcut bn shift")
    return rec


def topology_hash(config_text, records):
    h = hashlib.sha256(config_text.encode())
    for rec in records:
        h.update(struct.pack("<B", rec["kind"]))
        h.update(rec["name"].encode())
        if rec["kind"] != KIND_HEAD:
            h.update(struct.pack("<6I", rec["cin"], rec["cout"], rec["k"],
                                 rec["stride"], rec["pad"], rec["groups"]))
    return struct.unpack("<Q", h.digest()[:8])[0]


def serialize(config_text, records):
    body = bytearray()
    body += MAGIC
    body += struct.pack("<HQ", VERSION, topology_hash(config_text, records))
    raw_cfg = config_text.encode()
    body += struct.pack("<I", len(raw_cfg))
    body += raw_cfg
    body += struct.pack("<I", len(records))
    for rec in records:
        _serialize_record(body, rec)
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def deserialize(blob):
    if len(blob) < 22 or blob[:4] != MAGIC:
        raise IntegrityError("not a FrozenModel file (bad magic at byte 0)")
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise IntegrityError(
            f"FrozenModel checksum mismatch at byte {len(blob) - 4}"
        )
    r = _Reader(blob, 4)
    version = r.u16("version")
    if version != VERSION:
        raise IntegrityError(f"unsupported FrozenModel version {version}")
    stored_hash = struct.unpack("<Q", r.take(8, "topology hash"))[0]
    cfg_len = r.u32("config length")
    config_text = r.take(cfg_len, "config text").decode()
    n = r.u32("record count")
    records = [_deserialize_record(r) for _ in range(n)]
    if r.o != len(blob) - 4:
        raise IntegrityError(f"trailing bytes at {r.o} in FrozenModel")
    if topology_hash(config_text, records) != stored_hash:
        raise IntegrityError("topology hash does not match records")
    _validate_variants(records)
    return config_text, records


def _validate_variants(records):
    """Variant tags must encode the preceding record's nonlinearity."""
    prev_nl = "none"
    for rec in records:
        if rec["kind"] == KIND_HEAD:
            continue
        if rec["binary"]:
            expected = AND if prev_nl == "relu" else XNOR
            if rec["variant"] != expected:
                raise IntegrityError(
                    f"record {rec['name']!r}: variant {rec['variant']} is "
                    f"inconsistent with preceding nonlinearity {prev_nl!r}"
                )
        prev_nl = rec["nonlinearity"]
    return records


# ---------------------------------------------------------------------------
# Runtime
# ---------------------------------------------------------------------------


def _apply_nl(rec, x):
    nl = rec["nonlinearity"]
    if nl == "none":
        return x
    if nl == "relu":
        return np.maximum(x, 0)
    if nl == "prelu":
        return np.where(x > 0, x, rec["slope"][0] * x)
    return x * np.where(x > 0, rec["right"], rec["left"])


class FrozenModel:
    """Loaded inference artifact; binary layers run on the bit kernels."""

    def __init__(self, config_text, records):
        self.config_text = config_text
        self.spec = parse_config(config_text)
        self.records = records
        self._weights = {}
        for rec in records:
            if rec["kind"] != KIND_HEAD and rec["binary"]:
                shape = (rec["cout"], rec["cin"] // rec["groups"], rec["k"], rec["k"])
                w_pm1 = unpack_weight_bits(rec["weight_bits"], shape)
                self._weights[rec["name"]] = bitpack(w_pm1)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(serialize(self.config_text, self.records))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            blob = f.read()
        config_text, records = deserialize(blob)
        return cls(config_text, records)

    def _conv(self, rec, x):
        """x: NHWC float activations -> NHWC conv output (pre-BN)."""
        if rec["binary"]:
            plan = BitConvPlan(rec["stride"], rec["pad"], rec["groups"], rec["variant"])
            xb = bitpack_nhwc(x)
            wb = self._weights[rec["name"]]
            if rec["variant"] == AND:
                return conv2d_and(xb, wb, plan, channels_last=True)
            return conv2d_xnor(xb, wb, plan, channels_last=True)
        return T.conv2d_nhwc(x, rec["weight"], rec["stride"], rec["pad"], rec["groups"])

    def forward(self, x):
        """NCHW float input batch -> logits."""
        x = T.as_f32(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected (N,{self.spec.in_channels},H,W) input, got {x.shape}"
            )
        x = T.nchw_to_nhwc(x)
        for rec in self.records:
            kind = rec["kind"]
            if kind == KIND_HEAD:
                if rec["head_pool"] == "gap":
                    feat = T.global_avg_pool_nhwc(x)
                else:
                    feat = T.avgpool_3x3_s2_nhwc(x).reshape(x.shape[0], -1)
                self.features = feat
                return T.linear(feat, rec["fc_weight"], rec["fc_bias"])
            y = self._conv(rec, x) * rec["bn_scale"] + rec["bn_shift"]
            if kind == KIND_STEM:
                x = y
                if rec.get("pool") == "max3":
                    x, _ = T.maxpool_3x3_s2_nhwc(x, need_arg=False)
                elif rec.get("pool") == "avg3":
                    x = T.avgpool_3x3_s2_nhwc(x)
            elif kind == KIND_BRIDGE:
                x = _apply_nl(rec, y)
            elif kind == KIND_NORMAL:
                x = _apply_nl(rec, y + x)
            elif kind == KIND_REDUCTION_DERIVED:
                sc = T.avgpool_3x3_s2_nhwc(np.concatenate([x, x], axis=-1))
                x = _apply_nl(rec, y + sc)
            elif kind == KIND_REDUCTION_BASELINE:
                sc = T.avgpool_2x2_s2_nhwc(x)
                sc = T.conv2d_nhwc(sc, rec["sc_weight"], 1, 0, 1)
                sc = sc * rec["sc_bn_scale"] + rec["sc_bn_shift"]
                x = _apply_nl(rec, y + sc)
            else:
                raise IntegrityError(f"unknown record kind {kind}")
        raise IntegrityError("FrozenModel has no head record")

    def predict(self, images, batch_size=512):
        """Deterministic batched top-1 classification of NCHW images."""
        out = np.empty(images.shape[0], dtype=np.int64)
        for lo in range(0, images.shape[0], batch_size):
            logits = self.forward(images[lo : lo + batch_size])
            out[lo : lo + batch_size] = logits.argmax(axis=1)
        return out


def export_frozen(network: Network, path, nudge_zeros=False):
    """Serialize a trained network's inference form to path."""
    records = export_records(network, nudge_zeros=nudge_zeros)
    _validate_variants(records)
    blob = serialize(format_config(network.spec), records)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load_frozen(path):
    return FrozenModel.load(path)
