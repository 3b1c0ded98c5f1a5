"""Desk-scale optimization: Adam, schedules, staged binarization, metrics.

The recipe follows the engine's training defaults: Adam from scratch,
starting lr 0.01, either a multistep decay (10x at epochs 45 and 55) or a
per-step cosine decay to zero, and zero weight decay on every binary conv
proxy weight regardless of the configured decay.
"""

import json
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .data import DataBundle, Dataset
from .errors import ConfigError, DivergenceError, FormatError
from .network import Network, NetworkSpec, build_network, format_config, parse_config
from .tensor import softmax, softmax_cross_entropy

CHECKPOINT_MAGIC = b"BNCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # never applied to binary conv proxies
    schedule: str = "multistep"  # "multistep" | "cosine"
    milestones: tuple = (45, 55)
    decay_factor: float = 0.1
    epochs: int = 60
    batch_size: int = 128


class Adam:
    def __init__(self, params, config: OptimConfig):
        self.params = list(params)
        self.config = config
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr):
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if c.weight_decay and not p.binary_proxy:
                g = g + c.weight_decay * p.value
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def lr_at(config: OptimConfig, epoch, step, steps_per_epoch):
    """Learning rate for global (epoch, step). Cosine decays per step to 0."""
    if config.schedule == "multistep":
        drops = sum(epoch >= m for m in config.milestones)
        return config.lr * config.decay_factor**drops
    if config.schedule == "cosine":
        total = config.epochs * steps_per_epoch
        s = epoch * steps_per_epoch + step
        if total <= 1:
            return 0.0
        return 0.5 * config.lr * (1.0 + np.cos(np.pi * s / (total - 1)))
    raise ConfigError(f"unknown schedule {config.schedule!r}")


STAGE_MODES = {
    "full_precision_tanh": ("tanh", "real"),
    "stage1_real_weights": ("sign", "real"),
    "stage2_binary": ("sign", "binary"),
}


@dataclass(frozen=True)
class StagePlan:
    """Multi-step training: stages run in order with parameter carry-over.

    When a teacher network is set, the loss is cross entropy against the
    teacher's softmax outputs (soft labels) instead of the hard labels.
    """

    stages: tuple = ("stage1_real_weights", "stage2_binary")
    teacher: object = None

    def __post_init__(self):
        for s in self.stages:
            if s not in STAGE_MODES:
                raise ConfigError(f"unknown stage {s!r}; expected one of {sorted(STAGE_MODES)}")


def evaluate(network: Network, dataset: Dataset, batch_size=1000):
    """Top-1 accuracy over a split (eval mode, deterministic)."""
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        x = dataset.images[lo : lo + batch_size]
        logits = network.forward(x, train=False)
        hits += int((logits.argmax(axis=1) == dataset.labels[lo : lo + batch_size]).sum())
    return hits / len(dataset)


def _teacher_soft_labels(teacher, x):
    return softmax(teacher.forward(x, train=False))


def train(spec_or_network, optim: OptimConfig, data: DataBundle, plan: StagePlan = None,
          seed=0, log_path=None, eval_each_epoch=True, verbose=False):
    """Train a network; returns (network, metrics).

    metrics is a list of per-epoch dicts {stage, epoch, lr, train_loss,
    eval_acc}; the same records go to log_path as JSON lines when given.
    Identical seed and config give bit-identical trajectories.
    """
    if isinstance(spec_or_network, NetworkSpec):
        network = build_network(spec_or_network, seed=seed)
    else:
        network = spec_or_network
    stages = plan.stages if plan is not None else (None,)
    teacher = plan.teacher if plan is not None else None
    rng = np.random.default_rng(seed)
    metrics = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for stage in stages:
            if stage is not None:
                network.set_stage(*STAGE_MODES[stage])
            opt = Adam(network.parameters(), optim)
            n = len(data.train)
            steps = (n + optim.batch_size - 1) // optim.batch_size
            for epoch in range(optim.epochs):
                order = rng.permutation(n)
                losses = 0.0
                lr = optim.lr
                for step in range(steps):
                    idx = order[step * optim.batch_size : (step + 1) * optim.batch_size]
                    x = data.train.images[idx]
                    y = data.train.labels[idx]
                    logits = network.forward(x, train=True)
                    if teacher is not None:
                        loss, grad = softmax_cross_entropy(
                            logits, soft_targets=_teacher_soft_labels(teacher, x)
                        )
                    else:
                        loss, grad = softmax_cross_entropy(logits, labels=y)
                    if not np.isfinite(loss):
                        bad = network.find_first_nonfinite(x)
                        raise DivergenceError(
                            f"non-finite loss at epoch {epoch} step {step}; "
                            f"first non-finite output in layer {bad!r}"
                        )
                    network.zero_grad()
                    network.backward(grad)
                    lr = lr_at(optim, epoch, step, steps)
                    opt.step(lr)
                    losses += loss
                record = {
                    "stage": stage or "single",
                    "epoch": epoch,
                    "lr": float(lr),
                    "train_loss": losses / steps,
                    "eval_acc": evaluate(network, data.test) if eval_each_epoch else None,
                }
                metrics.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if verbose:
                    acc = record["eval_acc"]
                    print(
                        f"[{record['stage']}] epoch {epoch}: loss {record['train_loss']:.4f}"
                        + (f" acc {acc:.4f}" if acc is not None else "")
                    )
    finally:
        if log_file:
            log_file.close()
    return network, metrics


# ---------------------------------------------------------------------------
# Nonlinearity ablation harness (toy models, several seeds)
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    # name -> (toy_real_conv, nonlinearity)
    "linear": (True, "none"),
    "binary": (False, "none"),
    "prelu": (False, "prelu"),
    "relu": (False, "relu"),
    "fprelu": (False, "fprelu"),
}


def toy_spec_for_variant(variant, width=None, **kw):
    from .network import make_spec

    real_conv, nl = ABLATION_VARIANTS[variant]
    spec = make_spec("mnist_toy", width=width, nonlinearity=nl, **kw)
    return replace(spec, toy_real_conv=real_conv)


def nonlinearity_ablation(data: DataBundle, variants=("linear", "binary", "prelu", "relu"),
                          seeds=(0, 1, 2, 3, 4), epochs=10, lr=0.01, width=None,
                          batch_size=128, verbose=False):
    """Train each toy variant over several seeds; returns accuracy and mean
    binary-conv discrepancy per run."""
    optim = OptimConfig(lr=lr, epochs=epochs, schedule="multistep",
                        milestones=(), batch_size=batch_size)
    results = {v: {"acc": [], "disc": []} for v in variants}
    for variant in variants:
        for seed in seeds:
            spec = toy_spec_for_variant(variant, width=width)
            network, _ = train(spec, optim, data, seed=seed,
                               eval_each_epoch=False, verbose=False)
            acc = evaluate(network, data.test)
            stats = {"discrepancy": {}}
            network.forward(data.test.images[:1000], train=False, stats=stats)
            disc = (float(np.mean(list(stats["discrepancy"].values())))
                    if stats["discrepancy"] else 0.0)
            results[variant]["acc"].append(acc)
            results[variant]["disc"].append(disc)
            if verbose:
                print(f"{variant} seed {seed}: acc {acc:.4f} disc {disc:.3f}")
    return results


# ---------------------------------------------------------------------------
# Checkpoints: float parameters with a versioned header
# ---------------------------------------------------------------------------


def save_checkpoint(path, network: Network, meta=None):
    arrays = network.state_arrays()
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": format_config(network.spec),
        "arrays": [
            {"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in arrays
        ],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<HI", CHECKPOINT_VERSION, len(hbytes))
    payload += hbytes
    for _, a in arrays:
        payload += np.ascontiguousarray(a, dtype=np.float32).tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    with open(path, "wb") as f:
        f.write(bytes(payload))


def load_checkpoint(path):
    """Returns (spec, mapping name->array, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint file (bad magic at byte 0): {path}")
    crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError(f"checkpoint checksum mismatch at byte {len(blob) - 4}: {path}")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    header = json.loads(blob[10 : 10 + hlen].decode())
    spec = parse_config(header["spec"])
    offset = 10 + hlen
    mapping = {}
    for rec in header["arrays"]:
        size = int(np.prod(rec["shape"])) if rec["shape"] else 1
        nbytes = size * 4
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype=np.float32)
        if arr.size != size:
            raise FormatError(f"truncated checkpoint at byte {offset}: {rec['name']}")
        mapping[rec["name"]] = arr.reshape(rec["shape"]).copy()
        offset += nbytes
    return spec, mapping, header.get("meta", {})


def restore_network(path):
    spec, mapping, meta = load_checkpoint(path)
    network = build_network(spec, seed=0)
    network.load_state_arrays(mapping)
    return network, meta
