"""Optimizer, schedules, training-loop invariants, and checkpoints."""

import json

import numpy as np
import pytest

from bincnn.data import DataBundle, Dataset
from bincnn.errors import ConfigError, DivergenceError, FormatError
from bincnn.layers import Parameter
from bincnn.network import build_network, make_spec
from bincnn.training import (
    Adam,
    OptimConfig,
    StagePlan,
    evaluate,
    load_checkpoint,
    lr_at,
    restore_network,
    save_checkpoint,
    train,
)

RNG = np.random.default_rng


def tiny_bundle(n=96, n_test=32, seed=0, hw=28):
    """Small synthetic image bundle; class = which half carries the blob."""
    rng = RNG(seed)
    x = rng.normal(scale=0.3, size=(n + n_test, 1, hw, hw)).astype(np.float32)
    y = rng.integers(0, 2, n + n_test)
    for i, label in enumerate(y):
        if label:
            x[i, 0, : hw // 2] += 1.0
        else:
            x[i, 0, hw // 2 :] += 1.0
    return DataBundle(
        Dataset(x[:n], y[:n].astype(np.int64)),
        Dataset(x[n:], y[n:].astype(np.int64)),
        0.0,
    )


class TestAdam:
    def test_matches_reference_formula(self):
        # closed-form first step: m/(1-b1) = g, v/(1-b2) = g^2 -> step = lr*sign(g)
        p = Parameter("w", np.array([1.0, -2.0], np.float32))
        p.grad[:] = [0.5, -3.0]
        opt = Adam([p], OptimConfig(lr=0.1))
        opt.step(0.1)
        expect = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -3.0]) / (
            np.abs([0.5, -3.0]) + 1e-8
        )
        assert np.allclose(p.value, expect, atol=1e-6)

    def test_two_steps_against_manual_rollout(self):
        rng = RNG(1)
        w0 = rng.normal(size=4).astype(np.float32)
        grads = [rng.normal(size=4).astype(np.float32) for _ in range(2)]
        p = Parameter("w", w0.copy())
        cfg = OptimConfig(lr=0.01)
        opt = Adam([p], cfg)
        for g in grads:
            p.grad[:] = g
            opt.step(cfg.lr)
        m = np.zeros(4)
        v = np.zeros(4)
        w = w0.astype(np.float64).copy()
        for t, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            w -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(p.value, w, atol=1e-5)

    def test_weight_decay_skips_binary_proxies(self):
        real = Parameter("r", np.array([2.0], np.float32))
        proxy = Parameter("b", np.array([2.0], np.float32), binary_proxy=True)
        opt = Adam([real, proxy], OptimConfig(lr=0.1, weight_decay=0.1))
        # all-zero loss gradient step
        opt.step(0.1)
        assert proxy.value[0] == 2.0  # untouched: zero decay on proxies
        assert real.value[0] < 2.0  # decayed toward zero


class TestSchedules:
    def test_multistep_exact_drops(self):
        cfg = OptimConfig(lr=0.01, schedule="multistep", milestones=(45, 55), epochs=60)
        assert lr_at(cfg, 0, 0, 100) == 0.01
        assert lr_at(cfg, 44, 99, 100) == 0.01
        assert lr_at(cfg, 45, 0, 100) == pytest.approx(0.001)
        assert lr_at(cfg, 54, 0, 100) == pytest.approx(0.001)
        assert lr_at(cfg, 55, 0, 100) == pytest.approx(0.0001)
        assert lr_at(cfg, 59, 0, 100) == pytest.approx(0.0001)

    def test_cosine_reaches_zero(self):
        cfg = OptimConfig(lr=0.01, schedule="cosine", epochs=60)
        steps = 469
        first = lr_at(cfg, 0, 0, steps)
        last = lr_at(cfg, 59, steps - 1, steps)
        assert first == pytest.approx(0.01)
        assert last < 1e-5 * cfg.lr
        mid = lr_at(cfg, 30, 0, steps)
        assert 0 < mid < first

    def test_cosine_monotone_decreasing(self):
        cfg = OptimConfig(lr=0.01, schedule="cosine", epochs=3)
        vals = [lr_at(cfg, e, s, 10) for e in range(3) for s in range(10)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_unknown_schedule(self):
        with pytest.raises(ConfigError):
            lr_at(OptimConfig(schedule="linear"), 0, 0, 10)


class TestTrainLoop:
    def test_determinism_bit_identical(self):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="relu", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=2, milestones=(), batch_size=32)
        net1, m1 = train(spec, cfg, data, seed=7)
        net2, m2 = train(spec, cfg, data, seed=7)
        assert m1 == m2
        for (n1, a1), (n2, a2) in zip(net1.state_arrays(), net2.state_arrays()):
            assert n1 == n2
            assert np.array_equal(a1, a2)

    def test_zero_learning_rate_freezes_parameters(self):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="relu", num_classes=2)
        cfg = OptimConfig(lr=0.0, epochs=1, milestones=(), batch_size=32)
        net = build_network(spec, seed=3)
        before = {n: a.copy() for n, a in net.state_arrays() if "running" not in n}
        train(net, cfg, data, seed=3, eval_each_epoch=False)
        after = dict(net.state_arrays())
        for name, arr in before.items():
            assert np.array_equal(arr, after[name]), name

    def test_loss_decreases_on_learnable_task(self):
        data = tiny_bundle(n=256)
        spec = make_spec("mnist_toy", width=8, nonlinearity="relu", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=3, milestones=(), batch_size=32)
        _, metrics = train(spec, cfg, data, seed=0, eval_each_epoch=False)
        assert metrics[-1]["train_loss"] < metrics[0]["train_loss"]
        assert metrics[-1]["train_loss"] < 0.3

    def test_metrics_log_jsonl(self, tmp_path):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="none", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=2, milestones=(), batch_size=32)
        log = tmp_path / "metrics.jsonl"
        _, metrics = train(spec, cfg, data, seed=0, log_path=str(log))
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert lines == metrics
        assert set(lines[0]) == {"stage", "epoch", "lr", "train_loss", "eval_acc"}

    def test_divergence_names_layer(self):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="relu", num_classes=2)
        net = build_network(spec, seed=0)
        net.blocks[2].bn.gamma.value[:] = np.nan
        cfg = OptimConfig(lr=0.01, epochs=1, milestones=(), batch_size=32)
        with pytest.raises(DivergenceError, match="block2"):
            train(net, cfg, data, seed=0, eval_each_epoch=False)

    def test_multistep_schedule_applied_in_loop(self):
        data = tiny_bundle(n=64)
        spec = make_spec("mnist_toy", width=8, nonlinearity="none", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=3, schedule="multistep", milestones=(1, 2),
                          batch_size=32)
        _, metrics = train(spec, cfg, data, seed=0, eval_each_epoch=False)
        assert metrics[0]["lr"] == pytest.approx(0.01)
        assert metrics[1]["lr"] == pytest.approx(0.001)
        assert metrics[2]["lr"] == pytest.approx(0.0001)


class TestStagedTraining:
    def test_stage_carry_over_and_soft_labels(self):
        data = tiny_bundle(n=96)
        spec = make_spec("mnist_toy", width=8, nonlinearity="fprelu", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=1, milestones=(), batch_size=32)
        teacher, _ = train(spec, OptimConfig(lr=0.01, epochs=2, milestones=(), batch_size=32),
                           data, seed=1, eval_each_epoch=False)
        plan = StagePlan(stages=("full_precision_tanh", "stage1_real_weights",
                                 "stage2_binary"), teacher=teacher)
        net, metrics = train(spec, cfg, data, plan=plan, seed=2, eval_each_epoch=False)
        stages_seen = [m["stage"] for m in metrics]
        assert stages_seen == ["full_precision_tanh", "stage1_real_weights",
                               "stage2_binary"]
        # after the final stage the network is back in fully binary mode
        for b in net.blocks:
            conv = getattr(b, "conv", None)
            if conv is not None and hasattr(conv, "binarize"):
                assert conv.binarize

    def test_stage_names_validated(self):
        with pytest.raises(ConfigError):
            StagePlan(stages=("warmup",))

    def test_plain_vs_staged_differ(self):
        data = tiny_bundle(n=64)
        spec = make_spec("mnist_toy", width=8, nonlinearity="none", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=1, milestones=(), batch_size=32)
        plain, _ = train(spec, cfg, data, seed=5, eval_each_epoch=False)
        staged, _ = train(spec, cfg, data, seed=5, eval_each_epoch=False,
                          plan=StagePlan(stages=("stage1_real_weights", "stage2_binary")))
        diff = any(
            not np.array_equal(a1, a2)
            for (_, a1), (_, a2) in zip(plain.state_arrays(), staged.state_arrays())
        )
        assert diff


class TestEvaluate:
    def test_perfect_memorization(self):
        data = tiny_bundle(n=64, n_test=8)
        spec = make_spec("mnist_toy", width=8, nonlinearity="relu", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=8, milestones=(), batch_size=16)
        net, _ = train(spec, cfg, data, seed=0, eval_each_epoch=False)
        train_acc = evaluate(net, data.train)
        assert train_acc > 0.95

    def test_shuffled_labels_near_chance(self):
        rng = RNG(9)
        n = 600
        x = rng.normal(size=(n, 1, 28, 28)).astype(np.float32)
        y = rng.integers(0, 10, n).astype(np.int64)
        spec = make_spec("mnist_toy", width=8, nonlinearity="none")
        net = build_network(spec, seed=1)  # untrained network vs random labels
        acc = evaluate(net, Dataset(x, y))
        # binomial three-sigma bound around 1/10
        sigma = np.sqrt(0.1 * 0.9 / n)
        assert abs(acc - 0.1) < 3 * sigma + 0.05

    def test_deterministic(self):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="relu", num_classes=2)
        net = build_network(spec, seed=2)
        assert evaluate(net, data.test) == evaluate(net, data.test)


class TestCheckpoints:
    def test_roundtrip_restores_function(self, tmp_path):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="prelu", num_classes=2)
        cfg = OptimConfig(lr=0.01, epochs=1, milestones=(), batch_size=32)
        net, _ = train(spec, cfg, data, seed=0, eval_each_epoch=False)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, meta={"note": "test"})
        restored, meta = restore_network(path)
        assert meta["note"] == "test"
        x = data.test.images[:8]
        assert np.array_equal(net.forward(x), restored.forward(x))

    def test_versioned_header(self, tmp_path):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="none", num_classes=2)
        net = build_network(spec, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, net)
        spec_read, mapping, _ = load_checkpoint(path)
        assert spec_read == spec
        assert all(isinstance(v, np.ndarray) for v in mapping.values())

    def test_corruption_detected(self, tmp_path):
        data = tiny_bundle()
        spec = make_spec("mnist_toy", width=8, nonlinearity="none", num_classes=2)
        net = build_network(spec, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, net)
        blob = bytearray(path.read_bytes())
        blob[50] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)
