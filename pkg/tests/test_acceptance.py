"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line (visible with ``pytest -s``) and
asserts the criterion at its stated tolerance:

  1. gradient checks for every operator (rtol 1e-4) and a full toy
     hierarchical model (rtol 1e-3), 64-bit, h = 1e-4
  2. conv2d/conv3d vs the naive summation oracle, 100 cases each, 1e-10
  3. conversion shape theorem over 500 fuzzed shape pairs plus the
     full-scale stage-1 kernel (2,32)
  4. metric implementations vs brute-force definitions, 1000 vectors,
     1e-12 (pairwise AUC vs trapezoidal ROC at 1e-10)
  5. synthetic fusion ordering (512 train / 256 test, fixed seed,
     2-stage toy backbones, 40 epochs)
  6. Adam vs an independent reference, 100 draws, 1e-12, plus the
     quadratic convergence run
  7. bytewise training reproducibility and checkpoint round-trips
  8. ensemble identity and mean properties
"""

import numpy as np
import pytest

from mmfusion import ops
from mmfusion.backbones import BackboneSpec, FeatureShape
from mmfusion.config import AugmentConfig, BackboneConfig, RunConfig
from mmfusion.errors import ConfigError
from mmfusion.fusion_models import (FusionConfig, build_model, conversion_params,
                                    grid_align_params, predict)
from mmfusion.metrics import auc, cohen_kappa, sens_spec
from mmfusion.nn import Conv
from mmfusion.seeds import substream
from mmfusion.tensor import Tensor
from mmfusion.training import Adam, OptimConfig, ensemble_predict

from support import (check_op_gradients, finite_diff, naive_conv2d, naive_conv3d,
                     pairwise_auc, reference_adam, counted_sens_spec, direct_kappa,
                     trapezoid_auc)


def _report(name: str, ok: bool) -> None:
    print(f"[acceptance] {name}: {'PASS' if ok else 'FAIL'}")
    assert ok, name


# -- criterion 1: gradient suite -------------------------------------------


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(20240101)

    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    # One representative draw per operator at op tolerance (the per-op
    # 20-draw suites live in test_autodiff.py and run with this suite).
    check_op_gradients(lambda x, w, b: ops.conv2d(x, w, b, (2, 1), (1, 0)),
                       [t(2, 2, 6, 5), t(3, 2, 3, 3), t(3)], rng)
    check_op_gradients(lambda x, w, b: ops.conv3d(x, w, b, (1, 2, 2), 1),
                       [t(1, 2, 4, 5, 5), t(2, 2, 3, 3, 3), t(2)], rng)
    check_op_gradients(ops.relu, [t(4, 4)], rng)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    check_op_gradients(
        lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True),
        [t(3, 3, 4, 4), gamma, t(3)], rng, rtol=5e-4)
    check_op_gradients(lambda x: ops.max_pool2d(x, 3, 2, 1), [t(1, 2, 6, 6)], rng)
    check_op_gradients(lambda x: ops.max_pool3d(x, 2, 2, 0), [t(1, 1, 4, 4, 4)], rng)
    check_op_gradients(lambda x: ops.avg_pool2d(x, 2, 2), [t(1, 2, 4, 4)], rng)
    check_op_gradients(ops.global_avg_pool, [t(2, 3, 4, 4)], rng)
    check_op_gradients(ops.linear, [t(3, 5), t(4, 5), t(4)], rng)
    check_op_gradients(lambda a, b: ops.concat([a, b], axis=1), [t(2, 2, 3), t(2, 4, 3)], rng)
    check_op_gradients(ops.add, [t(3, 3), t(3, 3)], rng)
    check_op_gradients(ops.mul, [t(3, 3), t(3, 3)], rng)

    # Full toy hierarchical model at 64-bit: every parameter element.
    spec2d = BackboneSpec(FeatureShape(1, (16, 16)), 2, (2, 3), (1, 1),
                          "residual-basic", 3)
    spec3d = BackboneSpec(FeatureShape(1, (8, 8, 8)), 2, (2, 3), (1, 1),
                          "residual-basic", 3)
    cfg = FusionConfig("hierarchical", ("image2d", "volume3d"),
                       {"image2d": spec2d, "volume3d": spec3d}, 2)
    model = build_model(cfg, dtype=np.float64, rng=substream(42, "init"))
    model.train()
    batch = {
        "image2d": rng.standard_normal((2, 1, 16, 16)),
        "volume3d": rng.standard_normal((2, 1, 8, 8, 8)),
    }
    labels = np.array([0, 1])

    def loss_value():
        return float(ops.softmax_cross_entropy(model.forward(batch), labels).data)

    loss = ops.softmax_cross_entropy(model.forward(batch), labels)
    model.zero_grad()
    loss.backward()

    params = list(model.named_parameters())
    arrays = [p.data for _, p in params]
    numeric = finite_diff(loss_value, arrays, h=1e-4)
    worst = 0.0
    for (name, p), num in zip(params, numeric):
        rel = np.abs(p.grad - num) / (np.abs(p.grad) + 1e-8)
        worst = max(worst, float(rel.max()))
        assert rel.max() < 1e-3, f"{name}: max relative error {rel.max():.2e}"
    print(f"  model gradcheck over {sum(a.size for a in arrays)} parameters, "
          f"worst relative error {worst:.2e}")
    _report("criterion 1 (gradient suite)", True)


# -- criterion 2: convolution oracle ----------------------------------------


def test_criterion_2_convolution_oracle():
    rng = np.random.default_rng(20240202)
    for _ in range(100):
        n, ci, co = (int(rng.integers(1, 4)) for _ in range(3))
        h, w = int(rng.integers(3, 13)), int(rng.integers(3, 13))
        kh = int(rng.integers(1, min(5, h) + 1))
        kw = int(rng.integers(1, min(5, w) + 1))
        stride = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        pad = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
        x = rng.standard_normal((n, ci, h, w))
        wt = rng.standard_normal((co, ci, kh, kw))
        b = rng.standard_normal(co)
        got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
        want = naive_conv2d(x, wt, b, stride, pad)
        assert np.abs(got - want).max() <= 1e-10
    for _ in range(100):
        ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        d, h, w = (int(rng.integers(2, 8)) for _ in range(3))
        k = int(rng.integers(1, min(3, d, h, w) + 1))
        stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
        x = rng.standard_normal((1, ci, d, h, w))
        wt = rng.standard_normal((co, ci, k, k, k))
        got = ops.conv3d(Tensor(x), Tensor(wt), None, stride, 1).data
        want = naive_conv3d(x, wt, None, stride, (1, 1, 1))
        assert np.abs(got - want).max() <= 1e-10
    _report("criterion 2 (convolution oracle, 100 cases each)", True)


# -- criterion 3: conversion shape theorem -----------------------------------


def test_criterion_3_conversion_shape_theorem():
    rng = np.random.default_rng(20240303)
    built = 0
    rejected = 0
    for _ in range(500):
        c = int(rng.integers(1, 8))
        z = int(rng.integers(1, 16))
        x3, y3 = int(rng.integers(1, 24)), int(rng.integers(1, 24))
        if rng.random() < 0.7:
            x2 = 2 * x3 - 1 + int(rng.integers(0, 16))
            y2 = 2 * y3 - 1 + int(rng.integers(0, 16))
        else:  # deliberately undersized in at least one axis
            x2 = max(1, 2 * x3 - 1 - int(rng.integers(1, 6)))
            y2 = int(rng.integers(1, 2 * y3 + 8))
        shape2d = FeatureShape(c, (x2, y2))
        shape3d = FeatureShape(c, (z, x3, y3))
        admissible = x2 >= 2 * x3 - 1 and y2 >= 2 * y3 - 1
        if not admissible:
            with pytest.raises(ConfigError, match="minimal admissible"):
                conversion_params(shape2d, shape3d)
            rejected += 1
            continue
        p3, p2 = conversion_params(shape2d, shape3d)
        conv2 = Conv(2, c, c, p2.kernel, p2.stride, p2.padding, bias=False,
                     rng=substream(0, "a"))
        assert conv2(Tensor(np.zeros((1, c, x2, y2), np.float32))).shape == (1, c, x3, y3)
        conv3 = Conv(3, c, c, p3.kernel, p3.stride, p3.padding, bias=False,
                     rng=substream(0, "b"))
        assert conv3(Tensor(np.zeros((1, c, z, x3, y3), np.float32))).shape == (1, c, 1, x3, y3)
        built += 1
    assert built >= 200 and rejected >= 50

    # Full-scale check: 448x448 image and 256x224x164 volume meet at
    # stage 1 with a (2,32) kernel.
    _, p2 = conversion_params(FeatureShape(64, (112, 112)), FeatureShape(64, (64, 56, 41)))
    assert p2.kernel == (2, 32) and p2.stride == (2, 2)
    _report(f"criterion 3 (conversion theorem: {built} built, {rejected} rejected)", True)


# -- criterion 4: metric oracles ---------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(20240404)
    for _ in range(1000):
        n = int(rng.integers(4, 220))
        k = int(rng.integers(2, 5))
        y_true = rng.integers(0, k, n)
        y_pred = rng.integers(0, k, n)
        assert abs(cohen_kappa(y_true, y_pred, k)
                   - direct_kappa(y_true.tolist(), y_pred.tolist(), k)) < 1e-12

        y_bin = rng.integers(0, 2, n)
        if y_bin.min() == y_bin.max():
            y_bin[0] = 1 - y_bin[0]
        scores = np.round(rng.random(n), 2)
        got = auc(y_bin, scores)
        assert abs(got - pairwise_auc(y_bin, scores)) < 1e-12
        assert abs(got - trapezoid_auc(y_bin, scores)) < 1e-10
        thr = float(rng.random())
        assert sens_spec(y_bin, scores, thr) == \
            counted_sens_spec(y_bin.tolist(), scores.tolist(), thr)
    _report("criterion 4 (metric oracles, 1000 vectors)", True)


# -- criterion 5: synthetic fusion ordering ----------------------------------


def test_criterion_5_fusion_ordering(tmp_path):
    from mmfusion.experiments import fusion_ordering

    result = fusion_ordering(tmp_path / "ordering", seed=7, epochs=40,
                             n_train=512, n_val=128, n_test=256)
    acc = result.accuracies
    print()
    print(result.table())

    checks = {
        "(a) single 2D at chance": acc["single_image2d"] <= 0.65,
        "(a) single 3D at chance": acc["single_volume3d"] <= 0.65,
        "(b) intermediate >= 0.85": acc["intermediate_misregistered"] >= 0.85,
        "(c) hierarchical >= intermediate - 0.02":
            acc["hierarchical_misregistered"] >= acc["intermediate_misregistered"] - 0.02,
        "(c) hierarchical >= 0.85": acc["hierarchical_misregistered"] >= 0.85,
        "(d) early registered >= 0.85": acc["early_registered"] >= 0.85,
        "(d) early misregistered < intermediate":
            acc["early_misregistered"] < acc["intermediate_misregistered"],
    }
    for name, ok in checks.items():
        print(f"  {name}: {'PASS' if ok else 'FAIL'}")
    _report("criterion 5 (fusion ordering)", all(checks.values()))


# -- criterion 6: Adam reference ----------------------------------------------


def test_criterion_6_adam_reference():
    rng = np.random.default_rng(20240606)
    for _ in range(100):
        shape = tuple(int(rng.integers(1, 6)) for _ in range(int(rng.integers(1, 3))))
        steps = int(rng.integers(1, 6))
        lr = float(rng.choice([1e-4, 1e-3, 1e-2]))
        wd = float(rng.choice([0.0, 1e-4, 1e-2]))
        p0 = rng.standard_normal(shape)
        p = Tensor(p0.copy(), requires_grad=True, dtype=np.float64)
        opt = Adam([("p", p)], OptimConfig(lr=lr, weight_decay=wd))
        ref = [p0.copy()]
        state = ([np.zeros(shape)], [np.zeros(shape)], 0)
        for _ in range(steps):
            g = rng.standard_normal(shape)
            p.grad = g.copy()
            opt.step()
            ref, state = reference_adam(ref, [g], state, lr=lr, weight_decay=wd)
        assert np.abs(p.data - ref[0]).max() < 1e-12

    w = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    opt = Adam([("w", w)], OptimConfig(lr=1e-2, weight_decay=0.0))
    for _ in range(10_000):
        w.grad = w.data - 3.0
        opt.step()
    assert abs(float(w.data[0]) - 3.0) < 1e-2
    _report("criterion 6 (Adam reference + quadratic convergence)", True)


# -- criteria 7 and 8: reproducibility, ensembles -----------------------------


def _toy_cfg(tmp_path, manifest) -> RunConfig:
    return RunConfig(
        mode="intermediate", num_classes=2,
        modalities=("image2d", "volume3d"),
        backbones={
            "image2d": BackboneConfig((1, 32, 32), (4, 8), (1, 1), 4, 3),
            "volume3d": BackboneConfig((1, 12, 12, 12), (4, 8), (1, 1), 4, 3),
        },
        manifest=str(manifest), out_dir=str(tmp_path / "run"),
        seed=5, epochs=3, batch_size=8,
        augment=AugmentConfig(enabled=True),
        optim=OptimConfig(lr=1e-3),
    )


def test_criterion_7_reproducibility(tmp_path):
    from mmfusion.datapipe import SynthSpec, synth_generate
    from mmfusion.training import load_checkpoint, save_checkpoint, train_run

    synth_generate(SynthSpec(n_train=24, n_val=12, n_test=8, seed=5), tmp_path / "data")
    cfg = _toy_cfg(tmp_path, tmp_path / "data" / "manifest.csv")

    a = train_run(cfg, out_dir=tmp_path / "a")
    b = train_run(cfg, out_dir=tmp_path / "b")
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()

    # Checkpoint round trip is bitwise on a fixed batch.
    rng = np.random.default_rng(0)
    fusion_cfg = cfg.fusion_config()
    model = build_model(fusion_cfg, rng=substream(9, "init")).eval()
    batch = {
        "image2d": rng.random((4, 1, 32, 32)).astype(np.float32),
        "volume3d": rng.random((4, 1, 12, 12, 12)).astype(np.float32),
    }
    before = model.forward(batch).data.copy()
    path = tmp_path / "rt.mmck"
    save_checkpoint(path, model, None, cfg.model_digest(), 1, 9, 0.0)
    clone = build_model(fusion_cfg, rng=substream(10, "init"))
    load_checkpoint(path, clone, expected_digest=cfg.model_digest())
    clone.eval()
    assert np.array_equal(clone.forward(batch).data, before)
    _report("criterion 7 (bytewise reproducibility + checkpoint round trip)", True)


def test_criterion_8_ensemble_properties(tmp_path):
    rng = np.random.default_rng(1)
    cfg = FusionConfig("single", ("image2d",), {
        "image2d": BackboneSpec(FeatureShape(1, (16, 16)), 4, (4, 8), (1, 1),
                                "residual-basic", 3)}, 2)
    model = build_model(cfg, rng=substream(0, "init")).eval()
    batch = {"image2d": rng.random((6, 1, 16, 16)).astype(np.float32)}

    single = predict(model, batch)
    assert np.array_equal(ensemble_predict([model], batch), single)
    assert np.allclose(ensemble_predict([model] * 4, batch), single, atol=1e-12)

    class Stub:
        num_classes = 2
        training = False

        def __init__(self, row):
            self.row = np.asarray(row, dtype=np.float64)

        def forward(self, _):
            return Tensor(np.log(np.tile(self.row, (3, 1))))

    probs = ensemble_predict([Stub([1 - 1e-12, 1e-12]), Stub([1e-12, 1 - 1e-12])], {})
    assert np.abs(probs - 0.5).max() < 1e-9
    assert np.abs(ensemble_predict([model], batch).sum(axis=1) - 1.0).max() < 1e-6
    _report("criterion 8 (ensemble identity and mean)", True)
