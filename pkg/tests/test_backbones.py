"""Backbone shape inference, taps, parameter counting and symmetry."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfusion import ops
from mmfusion.backbones import (Backbone, BackboneSpec, FeatureShape, preset_spec,
                                stage_shapes, stem_shape)
from mmfusion.errors import ConfigError, InputError
from mmfusion.seeds import substream
from mmfusion.tensor import Tensor


def spec2d(x=64, y=64, channels=(8, 16), blocks=(1, 1), kind="residual-basic",
           stem=None, stem_kernel=3, in_ch=1, growth=None):
    return BackboneSpec(FeatureShape(in_ch, (x, y)), stem or channels[0],
                        channels, blocks, kind, stem_kernel, growth)


class TestStageShapes:
    def test_full_scale_2d_taps(self):
        spec = preset_spec("resnet34", FeatureShape(3, (448, 448)))
        got = [s.spatial for s in stage_shapes(spec)]
        assert got == [(112, 112), (56, 56), (28, 28), (14, 14)]
        assert [s.channels for s in stage_shapes(spec)] == [64, 128, 256, 512]

    def test_full_scale_3d_first_tap(self):
        spec = preset_spec("resnet34", FeatureShape(1, (256, 224, 164)))
        first = stage_shapes(spec)[0]
        assert first.as_tuple() == (64, 64, 56, 41)

    def test_toy_2d_taps(self):
        got = stage_shapes(spec2d(64, 64, (8, 16), (1, 1)))
        assert [s.as_tuple() for s in got] == [(8, 16, 16), (16, 8, 8)]

    def test_zero_extent_names_stage(self):
        # 8x8 input: stem brings it to 2x2, stages 1..3 shrink to 1x1,
        # a dense stage 4 (2x2 avg pool) would hit zero.
        spec = BackboneSpec(FeatureShape(1, (8, 8)), 4, (4, 4, 4, 4), (1, 1, 1, 1),
                            "dense", 3)
        with pytest.raises(ConfigError, match="stage"):
            stage_shapes(spec)

    def test_runtime_matches_inference(self, rng):
        spec = spec2d(40, 28, (4, 8), (1, 2))
        model = Backbone(spec, rng=substream(0, "init")).eval()
        x = Tensor(rng.standard_normal((2, 1, 40, 28)).astype(np.float32))
        _, taps = model(x)
        for tap, want in zip(taps, stage_shapes(spec)):
            assert tap.shape[1:] == want.as_tuple()


@settings(max_examples=50, deadline=None)
@given(
    x=st.integers(12, 80), y=st.integers(12, 80),
    c0=st.integers(1, 8), c1=st.integers(1, 8),
    b0=st.integers(1, 2), b1=st.integers(1, 2),
    kind=st.sampled_from(["residual-basic", "residual-bottleneck", "dense"]),
    dim3=st.booleans(), z=st.integers(12, 40),
)
def test_inference_agrees_with_runtime_fuzzed(x, y, c0, c1, b0, b1, kind, dim3, z):
    shape = FeatureShape(1, (z, x, y) if dim3 else (x, y))
    spec = BackboneSpec(shape, c0, (c0, c1), (b0, b1), kind, 3)
    model = Backbone(spec, rng=substream(7, "init")).eval()
    data = np.zeros((1, 1, *shape.spatial), np.float32)
    _, taps = model(Tensor(data))
    for tap, want in zip(taps, stage_shapes(spec)):
        assert tap.shape[1:] == want.as_tuple()


class TestForwardContract:
    def test_tap_count_and_pooled_width(self, rng):
        spec = spec2d(32, 32, (4, 8, 8), (1, 1, 1))
        model = Backbone(spec, rng=substream(1, "init")).eval()
        pooled, taps = model(Tensor(rng.standard_normal((3, 1, 32, 32)).astype(np.float32)))
        assert len(taps) == 3
        assert pooled.shape == (3, 8)

    def test_eval_forward_deterministic(self, rng):
        spec = spec2d(32, 32)
        model = Backbone(spec, rng=substream(2, "init")).eval()
        x = Tensor(rng.standard_normal((2, 1, 32, 32)).astype(np.float32))
        a, _ = model(x)
        b, _ = model(x)
        assert np.array_equal(a.data, b.data)

    def test_wrong_input_shape_rejected(self):
        model = Backbone(spec2d(32, 32), rng=substream(3, "init"))
        with pytest.raises(InputError):
            model(Tensor(np.zeros((1, 1, 16, 16), np.float32)))

    def test_pooled_equals_tap_mean(self, rng):
        spec = spec2d(32, 32)
        model = Backbone(spec, rng=substream(4, "init")).eval()
        x = Tensor(rng.standard_normal((2, 1, 32, 32)).astype(np.float32))
        pooled, taps = model(x)
        assert np.allclose(pooled.data, taps[-1].data.mean(axis=(2, 3)), atol=1e-6)


# --- independent closed-form parameter counting ---------------------------

def _conv_params(cin, cout, kernel_elems, bias=False):
    return cin * cout * kernel_elems + (cout if bias else 0)


def _bn_params(c):
    return 2 * c


def _basic_block_params(cin, cout, k3, downsample):
    total = _conv_params(cin, cout, k3) + _bn_params(cout)
    total += _conv_params(cout, cout, k3) + _bn_params(cout)
    if downsample or cin != cout:
        total += _conv_params(cin, cout, 1) + _bn_params(cout)
    return total


def _bottleneck_params(cin, cout, k3, downsample):
    mid = max(1, cout // 4)
    total = _conv_params(cin, mid, 1) + _bn_params(mid)
    total += _conv_params(mid, mid, k3) + _bn_params(mid)
    total += _conv_params(mid, cout, 1) + _bn_params(cout)
    if downsample or cin != cout:
        total += _conv_params(cin, cout, 1) + _bn_params(cout)
    return total


def expected_backbone_params(spec: BackboneSpec) -> int:
    d = spec.dim
    k3 = 3 ** d
    total = _conv_params(spec.input_shape.channels, spec.stem_channels,
                         spec.stem_kernel ** d)
    total += _bn_params(spec.stem_channels)
    cin = spec.stem_channels
    for s, (cout, blocks) in enumerate(zip(spec.stage_channels, spec.blocks_per_stage)):
        if spec.block_kind == "dense":
            g = spec.stage_growth(s)
            c = cin
            for _ in range(blocks):
                total += _bn_params(c) + _conv_params(c, g, k3)
                c += g
            total += _conv_params(c, cout, 1) + _bn_params(cout)
        else:
            fn = _basic_block_params if spec.block_kind == "residual-basic" \
                else _bottleneck_params
            for i in range(blocks):
                total += fn(cin if i == 0 else cout, cout, k3,
                            downsample=(i == 0 and s > 0))
        cin = cout
    return total


@pytest.mark.parametrize("kind", ["residual-basic", "residual-bottleneck", "dense"])
@pytest.mark.parametrize("dim3", [False, True])
def test_parameter_count_matches_oracle(kind, dim3):
    shape = FeatureShape(2, (24, 24, 24) if dim3 else (48, 48))
    spec = BackboneSpec(shape, 6, (6, 12), (2, 1), kind, 3, growth_rate=4)
    model = Backbone(spec, rng=substream(5, "init"))
    assert model.parameter_count() == expected_backbone_params(spec)


def test_parameter_count_fuzzed(rng):
    for _ in range(10):
        kind = ["residual-basic", "residual-bottleneck", "dense"][int(rng.integers(3))]
        channels = tuple(int(rng.integers(2, 10)) for _ in range(int(rng.integers(1, 4))))
        blocks = tuple(int(rng.integers(1, 3)) for _ in channels)
        spec = BackboneSpec(FeatureShape(1, (64, 64)), int(rng.integers(2, 8)),
                            channels, blocks, kind, 3)
        model = Backbone(spec, rng=substream(6, "init"))
        assert model.parameter_count() == expected_backbone_params(spec)


def test_zero_input_gives_symmetric_logits():
    # Zero input, zero-init biases and default running stats keep every
    # activation at zero, so a zero-bias classifier emits equal logits.
    from mmfusion.nn import Linear

    spec = spec2d(32, 32)
    model = Backbone(spec, rng=substream(8, "init")).eval()
    head = Linear(16, 3, dtype=np.float32, rng=substream(8, "head"))
    pooled, _ = model(Tensor(np.zeros((2, 1, 32, 32), np.float32)))
    logits = ops.linear(pooled, head.weight, head.bias).data
    assert np.allclose(logits, logits[:, :1], atol=1e-7)
