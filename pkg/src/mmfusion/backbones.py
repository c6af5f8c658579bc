"""Configurable 2D/3D classification backbones with per-stage feature taps.

A backbone is a stride-2 stem convolution plus a stride-2 max pool
(spatial /4), followed by S stages. Stage 0 keeps the stem resolution;
every later stage halves each spatial extent in its entry block. The
forward pass returns both the globally pooled feature vector and the
list of per-stage tap features, whose shapes are known statically from
the spec (``stage_shapes``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .errors import ConfigError, InputError
from .tensor import Tensor

BLOCK_KINDS = ("residual-basic", "residual-bottleneck", "dense")


@dataclass(frozen=True)
class FeatureShape:
    """Channel count plus spatial extents: (X, Y) for 2D, (Z, X, Y) for 3D."""

    channels: int
    spatial: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "spatial", tuple(int(e) for e in self.spatial))
        if len(self.spatial) not in (2, 3):
            raise ConfigError(f"feature shape needs 2 or 3 spatial extents, got {self.spatial}")
        if self.channels < 1 or any(e < 1 for e in self.spatial):
            raise ConfigError(f"feature shape extents must be positive: {self}")

    @property
    def dim(self) -> int:
        return len(self.spatial)

    def as_tuple(self) -> tuple[int, ...]:
        return (self.channels, *self.spatial)

    def __str__(self) -> str:
        return "x".join(str(e) for e in self.as_tuple())


@dataclass(frozen=True)
class BackboneSpec:
    input_shape: FeatureShape
    stem_channels: int
    stage_channels: tuple[int, ...]
    blocks_per_stage: tuple[int, ...]
    block_kind: str = "residual-basic"
    stem_kernel: int = 7
    growth_rate: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.block_kind!r}; expected one of {BLOCK_KINDS}")
        if not self.stage_channels:
            raise ConfigError("backbone needs at least one stage")
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigError("stage_channels and blocks_per_stage must have equal length")
        if self.stem_channels < 1 or any(c < 1 for c in self.stage_channels) \
                or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("backbone channel and block counts must be positive")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError(f"stem kernel must be odd and positive, got {self.stem_kernel}")
        if self.growth_rate is not None and self.growth_rate < 1:
            raise ConfigError("growth_rate must be positive")

    @property
    def dim(self) -> int:
        return self.input_shape.dim

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def stage_growth(self, stage: int) -> int:
        if self.growth_rate is not None:
            return self.growth_rate
        return max(1, self.stage_channels[stage] // 4)


def _shrink(extent: int, kernel: int, stride: int, pad: int, label: str) -> int:
    if kernel > extent + 2 * pad:
        raise ConfigError(f"{label}: kernel {kernel} exceeds padded extent {extent + 2 * pad}")
    out = (extent + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ConfigError(f"{label}: spatial extent would reach 0")
    return out


def stem_shape(spec: BackboneSpec) -> FeatureShape:
    """Shape after the stem convolution and max pool (input / 4)."""
    k = spec.stem_kernel
    spatial = tuple(_shrink(e, k, 2, k // 2, "stem convolution") for e in spec.input_shape.spatial)
    spatial = tuple(_shrink(e, 3, 2, 1, "stem pool") for e in spatial)
    return FeatureShape(spec.stem_channels, spatial)


def stage_shapes(spec: BackboneSpec) -> list[FeatureShape]:
    """Statically inferred tap shape for every stage; mirrors the runtime ops."""
    cur = stem_shape(spec).spatial
    shapes: list[FeatureShape] = []
    for s in range(spec.num_stages):
        if s > 0:
            label = f"stage {s + 1}"
            if spec.block_kind == "dense":
                cur = tuple(_shrink(e, 2, 2, 0, label) for e in cur)
            else:
                cur = tuple(_shrink(e, 3, 2, 1, label) for e in cur)
        shapes.append(FeatureShape(spec.stage_channels[s], cur))
    return shapes


class _ResidualStage(nn.Module):
    def __init__(self, dim: int, in_channels: int, out_channels: int, blocks: int,
                 kind: str, entry_stride: int, *, dtype, rng):
        super().__init__()
        cls = nn.BasicBlock if kind == "residual-basic" else nn.BottleneckBlock
        self.blocks = [
            cls(dim, in_channels if i == 0 else out_channels, out_channels,
                entry_stride if i == 0 else 1, dtype=dtype, rng=rng)
            for i in range(blocks)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class _DenseStage(nn.Module):
    """Dense layers plus a 1x1 projection onto the stage width."""

    def __init__(self, dim: int, in_channels: int, out_channels: int, layers: int,
                 growth: int, pool_entry: bool, *, dtype, rng):
        super().__init__()
        self.dim = dim
        self.pool_entry = pool_entry
        self.layers = [
            nn.DenseLayer(dim, in_channels + i * growth, growth, dtype=dtype, rng=rng)
            for i in range(layers)
        ]
        self.proj = nn.Conv(dim, in_channels + layers * growth, out_channels, 1,
                            bias=False, dtype=dtype, rng=rng)
        self.proj_bn = nn.BatchNorm(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.pool_entry:
            pool = ops.avg_pool2d if self.dim == 2 else ops.avg_pool3d
            x = pool(x, 2, 2)
        for layer in self.layers:
            x = layer(x)
        return ops.relu(self.proj_bn(self.proj(x)))


class Backbone(nn.Module):
    """Feature extractor exposing per-stage taps and a pooled feature vector."""

    def __init__(self, spec: BackboneSpec, *, dtype=np.float32, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.tap_shapes = stage_shapes(spec)
        d = spec.dim
        k = spec.stem_kernel
        self.stem_conv = nn.Conv(d, spec.input_shape.channels, spec.stem_channels,
                                 k, 2, k // 2, bias=False, dtype=dtype, rng=rng)
        self.stem_bn = nn.BatchNorm(spec.stem_channels, dtype=dtype)
        stages = []
        in_ch = spec.stem_channels
        for s in range(spec.num_stages):
            out_ch = spec.stage_channels[s]
            if spec.block_kind == "dense":
                stage = _DenseStage(d, in_ch, out_ch, spec.blocks_per_stage[s],
                                    spec.stage_growth(s), pool_entry=s > 0,
                                    dtype=dtype, rng=rng)
            else:
                stage = _ResidualStage(d, in_ch, out_ch, spec.blocks_per_stage[s],
                                       spec.block_kind, entry_stride=2 if s > 0 else 1,
                                       dtype=dtype, rng=rng)
            stages.append(stage)
            in_ch = out_ch
        self.stages = stages

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        expected = self.spec.input_shape.as_tuple()
        if x.shape[1:] != expected:
            raise InputError(f"backbone expects input {expected} per sample, got {x.shape[1:]}")
        pool = ops.max_pool2d if self.spec.dim == 2 else ops.max_pool3d
        y = pool(ops.relu(self.stem_bn(self.stem_conv(x))), 3, 2, (1,) * self.spec.dim)
        taps: list[Tensor] = []
        for stage in self.stages:
            y = stage(y)
            taps.append(y)
        return ops.global_avg_pool(y), taps


def forward_with_taps(backbone: Backbone, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    return backbone(x)


# Named depth presets at the conventional widths. Acceptance-scale runs
# use much smaller specs; these exist so full-size configurations are
# expressible (e.g. for shape checks at dataset resolution).
PRESETS: dict[str, dict] = {
    "resnet34": dict(block_kind="residual-basic", stem_channels=64,
                     stage_channels=(64, 128, 256, 512), blocks_per_stage=(3, 4, 6, 3)),
    "resnet50": dict(block_kind="residual-bottleneck", stem_channels=64,
                     stage_channels=(256, 512, 1024, 2048), blocks_per_stage=(3, 4, 6, 3)),
    "resnet101": dict(block_kind="residual-bottleneck", stem_channels=64,
                      stage_channels=(256, 512, 1024, 2048), blocks_per_stage=(3, 4, 23, 3)),
    "resnet152": dict(block_kind="residual-bottleneck", stem_channels=64,
                      stage_channels=(256, 512, 1024, 2048), blocks_per_stage=(3, 8, 36, 3)),
    "densenet121": dict(block_kind="dense", stem_channels=64, growth_rate=32,
                        stage_channels=(128, 256, 512, 1024), blocks_per_stage=(6, 12, 24, 16)),
    "densenet169": dict(block_kind="dense", stem_channels=64, growth_rate=32,
                        stage_channels=(128, 256, 640, 1664), blocks_per_stage=(6, 12, 32, 32)),
}


def preset_spec(name: str, input_shape: FeatureShape) -> BackboneSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown backbone preset {name!r}; available: {sorted(PRESETS)}")
    return BackboneSpec(input_shape=input_shape, **PRESETS[name])
