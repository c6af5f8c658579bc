"""Early, intermediate and hierarchical fusion of 2D and 3D modalities.

The hierarchical model aligns per-stage branch features of different
dimensionality with conversion convolutions derived from the feature
shapes themselves:

  * a 3D tap C x Z x X x Y is collapsed to C x 1 x X x Y by a
    convolution with kernel (Z, 1, 1) and stride (1, 1, 1);
  * a 2D tap C x X2 x Y2 is mapped onto exactly the 3D grid (X3, Y3) by
    a stride-(2, 2), zero-padding-free convolution with kernel
    (X2 - 2*(X3 - 1), Y2 - 2*(Y3 - 1)), which requires X2 >= 2*X3 - 1.

A third branch concatenates the converted taps at each stage (plus the
downsampled previous fusion feature) and processes them with one 2D
residual block; the final classifier sees the pooled features of every
branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import nn, ops
from .backbones import Backbone, BackboneSpec, FeatureShape, stage_shapes
from .errors import ConfigError, InputError, UsageError
from .tensor import Tensor, no_grad

FUSION_MODES = ("early", "intermediate", "hierarchical", "single")


@dataclass(frozen=True)
class ConversionParams:
    """Kernel/stride/padding of one conversion layer, derived from shapes."""

    mode: str  # "conv3d-depth-collapse" | "conv2d-align"
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    in_channels: int
    out_channels: int

    def output_spatial(self, spatial: tuple[int, ...]) -> tuple[int, ...]:
        return tuple((e + 2 * p - k) // s + 1
                     for e, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))

    def describe(self) -> str:
        kern = ",".join(str(k) for k in self.kernel)
        strd = ",".join(str(s) for s in self.stride)
        return f"kernel=({kern}) stride=({strd}) in={self.in_channels} out={self.out_channels}"


def depth_collapse_params(shape3d: FeatureShape, out_channels: int | None = None) -> ConversionParams:
    if shape3d.dim != 3:
        raise ConfigError(f"depth collapse needs a 3D feature shape, got {shape3d}")
    z = shape3d.spatial[0]
    return ConversionParams("conv3d-depth-collapse", (z, 1, 1), (1, 1, 1), (0, 0, 0),
                            shape3d.channels, out_channels or shape3d.channels)


def grid_align_params(shape2d: FeatureShape, grid: tuple[int, int],
                      out_channels: int | None = None) -> ConversionParams:
    if shape2d.dim != 2:
        raise ConfigError(f"grid alignment needs a 2D feature shape, got {shape2d}")
    x2, y2 = shape2d.spatial
    x3, y3 = grid
    kx = x2 - 2 * (x3 - 1)
    ky = y2 - 2 * (y3 - 1)
    if kx < 1 or ky < 1:
        raise ConfigError(
            f"2D feature grid {x2}x{y2} is too small to align with 3D grid {x3}x{y3}: "
            f"the minimal admissible 2D extents are {2 * x3 - 1}x{2 * y3 - 1}")
    return ConversionParams("conv2d-align", (kx, ky), (2, 2), (0, 0),
                            shape2d.channels, out_channels or shape2d.channels)


def conversion_params(shape2d: FeatureShape, shape3d: FeatureShape,
                      out_channels: tuple[int, int] | None = None
                      ) -> tuple[ConversionParams, ConversionParams]:
    """Conversion parameters for one (2D tap, 3D tap) pair.

    Returns the depth-collapse parameters for the 3D feature first, then
    the grid-alignment parameters that map the 2D feature onto the 3D
    tap's en-face grid.
    """
    if shape3d.dim != 3:
        raise ConfigError(f"expected a 3D feature shape, got {shape3d}")
    out3, out2 = out_channels if out_channels is not None else (None, None)
    p3 = depth_collapse_params(shape3d, out3)
    p2 = grid_align_params(shape2d, shape3d.spatial[1:], out2)
    return p3, p2


@dataclass(frozen=True)
class FusionConfig:
    mode: str
    modalities: tuple[str, ...]
    backbones: Mapping[str, BackboneSpec]
    num_classes: int
    head_hidden: int = 0
    fusion_widths: tuple[int, ...] | None = None
    conversion_nonlinearity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; expected one of {FUSION_MODES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("modality names must be unique")
        missing = [m for m in self.modalities if m not in self.backbones]
        if missing:
            raise ConfigError(f"no backbone spec for modalities {missing}")
        if self.mode == "single":
            if len(self.modalities) != 1:
                raise ConfigError("single-modality mode takes exactly one modality")
        elif len(self.modalities) < 2:
            raise ConfigError(f"{self.mode} fusion needs at least two modalities")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.head_hidden < 0:
            raise ConfigError("head_hidden must be non-negative")

    def spec(self, modality: str) -> BackboneSpec:
        return self.backbones[modality]


class _Head(nn.Module):
    """Classifier head: optional hidden relu layer, then class logits."""

    def __init__(self, in_features: int, num_classes: int, hidden: int, *, dtype, rng):
        super().__init__()
        self.in_features = in_features
        self.hidden = nn.Linear(in_features, hidden, dtype=dtype, rng=rng) if hidden else None
        self.out = nn.Linear(hidden if hidden else in_features, num_classes,
                             dtype=dtype, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if self.hidden is not None:
            x = ops.relu(self.hidden(x))
        return self.out(x)


class FusionModel(nn.Module):
    """Common surface: ``forward(batch)`` maps modality arrays to logits."""

    mode: str

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        self.modalities = config.modalities
        self.num_classes = config.num_classes

    def _modality_tensor(self, batch: Mapping[str, np.ndarray], name: str,
                         dtype) -> Tensor:
        if name not in batch:
            raise InputError(f"batch is missing modality {name!r}")
        arr = np.asarray(batch[name])
        expected = self.config.spec(name).input_shape.as_tuple()
        if arr.shape[1:] != expected:
            raise InputError(f"modality {name!r} expects per-sample shape {expected}, "
                             f"got {arr.shape[1:]}")
        return Tensor(arr.astype(dtype, copy=False))

    def forward(self, batch: Mapping[str, np.ndarray]) -> Tensor:
        raise NotImplementedError


class SingleModalityModel(FusionModel):
    mode = "single"

    def __init__(self, config: FusionConfig, *, dtype=np.float32, rng):
        super().__init__(config)
        self.dtype = np.dtype(dtype)
        name = config.modalities[0]
        self.backbone = Backbone(config.spec(name), dtype=dtype, rng=rng)
        self.head = _Head(config.spec(name).stage_channels[-1], config.num_classes,
                          config.head_hidden, dtype=dtype, rng=rng)

    def forward(self, batch: Mapping[str, np.ndarray]) -> Tensor:
        x = self._modality_tensor(batch, self.modalities[0], self.dtype)
        pooled, _ = self.backbone(x)
        return self.head(pooled)


class EarlyFusionModel(FusionModel):
    """Channel-stacked 3D input into a single volumetric backbone.

    All modalities must live on one X,Y,Z grid; 2D modalities are
    duplicated along the depth axis at forward time. Channels stack in
    modality order.
    """

    mode = "early"

    def __init__(self, config: FusionConfig, *, dtype=np.float32, rng):
        super().__init__(config)
        self.dtype = np.dtype(dtype)
        volumes = [m for m in config.modalities if config.spec(m).dim == 3]
        if not volumes:
            raise ConfigError("early fusion needs at least one 3D modality")
        grid = config.spec(volumes[0]).input_shape.spatial
        for name in config.modalities:
            shape = config.spec(name).input_shape
            if shape.dim == 3 and shape.spatial != grid:
                raise ConfigError(f"early fusion: modality grids differ "
                                  f"({name} has {shape.spatial}, expected {grid})")
            if shape.dim == 2 and shape.spatial != grid[1:]:
                raise ConfigError(f"early fusion: modality grids differ "
                                  f"({name} has {shape.spatial}, expected {grid[1:]})")
        self.depth = grid[0]
        total = sum(config.spec(m).input_shape.channels for m in config.modalities)
        template = config.spec(volumes[0])
        merged = BackboneSpec(
            input_shape=FeatureShape(total, grid),
            stem_channels=template.stem_channels,
            stage_channels=template.stage_channels,
            blocks_per_stage=template.blocks_per_stage,
            block_kind=template.block_kind,
            stem_kernel=template.stem_kernel,
            growth_rate=template.growth_rate,
        )
        self.backbone = Backbone(merged, dtype=dtype, rng=rng)
        self.head = _Head(merged.stage_channels[-1], config.num_classes,
                          config.head_hidden, dtype=dtype, rng=rng)

    def forward(self, batch: Mapping[str, np.ndarray]) -> Tensor:
        stacked = []
        for name in self.modalities:
            arr = np.asarray(batch[name])
            expected = self.config.spec(name).input_shape.as_tuple()
            if arr.shape[1:] != expected:
                raise InputError(f"modality {name!r} expects per-sample shape {expected}, "
                                 f"got {arr.shape[1:]}")
            if self.config.spec(name).dim == 2:
                arr = np.repeat(arr[:, :, None], self.depth, axis=2)
            stacked.append(arr.astype(self.dtype, copy=False))
        x = Tensor(np.concatenate(stacked, axis=1))
        pooled, _ = self.backbone(x)
        return self.head(pooled)


class IntermediateFusionModel(FusionModel):
    """Per-modality branches; pooled features concatenated into the head."""

    mode = "intermediate"

    def __init__(self, config: FusionConfig, *, dtype=np.float32, rng):
        super().__init__(config)
        self.dtype = np.dtype(dtype)
        self.branches = {m: Backbone(config.spec(m), dtype=dtype, rng=rng)
                         for m in config.modalities}
        width = sum(config.spec(m).stage_channels[-1] for m in config.modalities)
        self.head = _Head(width, config.num_classes, config.head_hidden, dtype=dtype, rng=rng)

    def forward(self, batch: Mapping[str, np.ndarray]) -> Tensor:
        pooled = []
        for name in self.modalities:
            x = self._modality_tensor(batch, name, self.dtype)
            p, _ = self.branches[name](x)
            pooled.append(p)
        return self.head(ops.concat(pooled, axis=1))


class HierarchicalFusionModel(FusionModel):
    """Modality branches plus a multi-scale fusion branch.

    At stage s the fusion branch consumes the channel-concatenation of
    the converted taps of every modality (each brought to the fusion
    stage width by a 1x1 convolution when widths differ) and, from stage
    1 on, the stride-2 downsampled previous fusion feature. One basic 2D
    residual block processes the concatenation. The classifier input is
    the concatenation of all branch pooled features (in modality order)
    followed by the pooled fusion feature.
    """

    mode = "hierarchical"

    def __init__(self, config: FusionConfig, *, dtype=np.float32, rng):
        super().__init__(config)
        self.dtype = np.dtype(dtype)
        specs = {m: config.spec(m) for m in config.modalities}
        volumes = [m for m in config.modalities if specs[m].dim == 3]
        images = [m for m in config.modalities if specs[m].dim == 2]
        if not volumes or not images:
            raise ConfigError("hierarchical fusion needs at least one 2D and one 3D modality")
        stage_counts = {specs[m].num_stages for m in config.modalities}
        if len(stage_counts) > 1:
            raise ConfigError(f"hierarchical fusion needs equal stage counts, got {stage_counts}")
        self.num_stages = stage_counts.pop()

        taps = {m: stage_shapes(specs[m]) for m in config.modalities}
        ref = volumes[0]
        self.ref_grids = [taps[ref][s].spatial[1:] for s in range(self.num_stages)]
        for name in volumes[1:]:
            for s in range(self.num_stages):
                if taps[name][s].spatial[1:] != self.ref_grids[s]:
                    raise ConfigError(
                        f"stage {s + 1}: 3D modalities must share en-face grids "
                        f"({name} has {taps[name][s].spatial[1:]}, expected {self.ref_grids[s]})")

        widths = config.fusion_widths or specs[ref].stage_channels
        if len(widths) != self.num_stages:
            raise ConfigError(f"fusion_widths needs {self.num_stages} entries, got {len(widths)}")
        self.fusion_widths = tuple(widths)

        self.branches = {m: Backbone(specs[m], dtype=dtype, rng=rng)
                         for m in config.modalities}

        self.conversion_plan: dict[str, list[ConversionParams]] = {}
        self.converters: dict[str, list[nn.Conv]] = {}
        self.mappers: dict[str, list[nn.Conv | None]] = {}
        self.conversion_norms: dict[str, list[nn.BatchNorm | None]] = {}
        for name in config.modalities:
            plan, convs, maps, norms = [], [], [], []
            for s in range(self.num_stages):
                tap = taps[name][s]
                try:
                    if tap.dim == 3:
                        params = depth_collapse_params(tap)
                    else:
                        params = grid_align_params(tap, self.ref_grids[s])
                except ConfigError as err:
                    raise ConfigError(f"stage {s + 1} ({name}): {err}") from err
                plan.append(params)
                convs.append(nn.Conv(tap.dim, params.in_channels, params.out_channels,
                                     params.kernel, params.stride, params.padding,
                                     bias=False, dtype=dtype, rng=rng))
                if params.out_channels != self.fusion_widths[s]:
                    maps.append(nn.Conv(2, params.out_channels, self.fusion_widths[s], 1,
                                        bias=False, dtype=dtype, rng=rng))
                else:
                    maps.append(None)
                norms.append(nn.BatchNorm(self.fusion_widths[s], dtype=dtype)
                             if config.conversion_nonlinearity else None)
            self.conversion_plan[name] = plan
            self.converters[name] = convs
            self.mappers[name] = maps
            self.conversion_norms[name] = norms

        # Pooling kernels that map the previous fusion grid exactly onto
        # the current one: kernel = prev - 2*(next - 1), stride 2.
        self.down_kernels: list[tuple[int, int]] = [(0, 0)]
        for s in range(1, self.num_stages):
            kernel = tuple(prev - 2 * (nxt - 1) for prev, nxt
                           in zip(self.ref_grids[s - 1], self.ref_grids[s]))
            if any(k < 1 for k in kernel):
                raise ConfigError(f"stage {s + 1}: fusion grid {self.ref_grids[s - 1]} cannot be "
                                  f"stride-2 downsampled onto {self.ref_grids[s]}")
            self.down_kernels.append(kernel)

        self.fusion_blocks = []
        for s in range(self.num_stages):
            in_ch = len(config.modalities) * self.fusion_widths[s]
            if s > 0:
                in_ch += self.fusion_widths[s - 1]
            self.fusion_blocks.append(nn.BasicBlock(2, in_ch, self.fusion_widths[s],
                                                    stride=1, dtype=dtype, rng=rng))

        width = sum(specs[m].stage_channels[-1] for m in config.modalities)
        width += self.fusion_widths[-1]
        self.classifier = _Head(width, config.num_classes, config.head_hidden,
                                dtype=dtype, rng=rng)

    def forward(self, batch: Mapping[str, np.ndarray]) -> Tensor:
        pooled: list[Tensor] = []
        taps: dict[str, list[Tensor]] = {}
        for name in self.modalities:
            x = self._modality_tensor(batch, name, self.dtype)
            p, t = self.branches[name](x)
            pooled.append(p)
            taps[name] = t

        fused: Tensor | None = None
        for s in range(self.num_stages):
            parts: list[Tensor] = []
            for name in self.modalities:
                y = self.converters[name][s](taps[name][s])
                if self.conversion_plan[name][s].mode == "conv3d-depth-collapse":
                    n, c = y.shape[:2]
                    y = ops.reshape(y, (n, c, *y.shape[3:]))
                grid = tuple(y.shape[2:])
                if grid != self.ref_grids[s]:
                    raise ConfigError(f"stage {s + 1} ({name}): converted grid {grid} "
                                      f"does not match {self.ref_grids[s]}")
                mapper = self.mappers[name][s]
                if mapper is not None:
                    y = mapper(y)
                norm = self.conversion_norms[name][s]
                if norm is not None:
                    y = ops.relu(norm(y))
                parts.append(y)
            if fused is not None:
                parts.append(ops.max_pool2d(fused, self.down_kernels[s], 2))
            fused = self.fusion_blocks[s](ops.concat(parts, axis=1))

        pooled.append(ops.global_avg_pool(fused))
        return self.classifier(ops.concat(pooled, axis=1))


_BUILDERS = {
    "single": SingleModalityModel,
    "early": EarlyFusionModel,
    "intermediate": IntermediateFusionModel,
    "hierarchical": HierarchicalFusionModel,
}


def build_model(config: FusionConfig, *, dtype=np.float32,
                rng: np.random.Generator) -> FusionModel:
    return _BUILDERS[config.mode](config, dtype=dtype, rng=rng)


def build_early_fusion(config: FusionConfig, *, dtype=np.float32, rng) -> EarlyFusionModel:
    if config.mode != "early":
        raise ConfigError(f"config mode is {config.mode!r}, expected 'early'")
    return EarlyFusionModel(config, dtype=dtype, rng=rng)


def build_intermediate_fusion(config: FusionConfig, *, dtype=np.float32,
                              rng) -> IntermediateFusionModel:
    if config.mode != "intermediate":
        raise ConfigError(f"config mode is {config.mode!r}, expected 'intermediate'")
    return IntermediateFusionModel(config, dtype=dtype, rng=rng)


def build_hierarchical_fusion(config: FusionConfig, *, dtype=np.float32,
                              rng) -> HierarchicalFusionModel:
    if config.mode != "hierarchical":
        raise ConfigError(f"config mode is {config.mode!r}, expected 'hierarchical'")
    return HierarchicalFusionModel(config, dtype=dtype, rng=rng)


def predict(model: FusionModel, batch: Mapping[str, np.ndarray]) -> np.ndarray:
    """Class probabilities (rows sum to 1). The model must be in eval mode."""
    if model.training:
        raise UsageError("predict() requires eval mode; call model.eval() first")
    with no_grad():
        logits = model.forward(batch)
    return ops.softmax_probs(logits.data)


def format_shape_report(config: FusionConfig) -> str:
    """Deterministic per-stage table of tap shapes and conversion layers."""
    lines = [f"mode={config.mode}", f"num_classes={config.num_classes}"]
    taps = {m: stage_shapes(config.spec(m)) for m in config.modalities}
    for name in config.modalities:
        spec = config.spec(name)
        lines.append(f"modality {name}: input {spec.input_shape} "
                     f"({spec.block_kind}, stages={spec.num_stages})")
        for s, shape in enumerate(taps[name]):
            lines.append(f"  stage {s + 1} tap: {shape}")
    if config.mode == "hierarchical":
        volumes = [m for m in config.modalities if config.spec(m).dim == 3]
        images = [m for m in config.modalities if config.spec(m).dim == 2]
        if not volumes or not images:
            raise ConfigError("hierarchical fusion needs at least one 2D and one 3D modality")
        ref_taps = taps[volumes[0]]
        num_stages = config.spec(volumes[0]).num_stages
        widths = config.fusion_widths or config.spec(volumes[0]).stage_channels
        for s in range(num_stages):
            grid = ref_taps[s].spatial[1:]
            lines.append(f"conversion stage {s + 1}: target grid "
                         + "x".join(str(e) for e in grid))
            for name in config.modalities:
                tap = taps[name][s]
                try:
                    if tap.dim == 3:
                        params = depth_collapse_params(tap)
                        out = f"{params.out_channels}x1x" + "x".join(str(e) for e in grid)
                    else:
                        params = grid_align_params(tap, grid)
                        out = f"{params.out_channels}x" + "x".join(str(e) for e in grid)
                except ConfigError as err:
                    raise ConfigError(f"stage {s + 1} ({name}): {err}") from err
                lines.append(f"  {name}: {params.mode} {params.describe()} -> {out}")
            in_ch = len(config.modalities) * widths[s] + (widths[s - 1] if s > 0 else 0)
            lines.append(f"  fusion block: in_channels={in_ch} out_channels={widths[s]}")
        classifier = sum(config.spec(m).stage_channels[-1] for m in config.modalities)
        classifier += widths[-1]
        lines.append(f"classifier input width: {classifier}")
    elif config.mode == "intermediate":
        width = sum(config.spec(m).stage_channels[-1] for m in config.modalities)
        lines.append(f"classifier input width: {width}")
    elif config.mode == "early":
        total = sum(config.spec(m).input_shape.channels for m in config.modalities)
        volumes = [m for m in config.modalities if config.spec(m).dim == 3]
        if not volumes:
            raise ConfigError("early fusion needs at least one 3D modality")
        lines.append(f"stacked input channels: {total}")
        lines.append(f"classifier input width: {config.spec(volumes[0]).stage_channels[-1]}")
    else:
        lines.append(f"classifier input width: "
                     f"{config.spec(config.modalities[0]).stage_channels[-1]}")
    return "\n".join(lines) + "\n"
