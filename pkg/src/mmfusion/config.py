"""Run configuration: flat ``key = value`` text with dotted prefixes.

Example::

    run.mode = hierarchical
    run.num_classes = 2
    run.epochs = 40
    run.batch_size = 8
    run.seed = 7
    run.out = out/exp1
    data.manifest = out/synth/manifest.csv
    model.modalities = image2d,volume3d
    model.image2d.input_shape = 1x32x32
    model.image2d.stage_channels = 8,16
    model.image2d.blocks = 1,1
    model.volume3d.input_shape = 1x16x16x16
    model.volume3d.stage_channels = 8,16
    model.volume3d.blocks = 1,1
    optim.lr = 1e-3

Lines starting with ``#`` are comments. Unknown keys are rejected.
Paths are resolved relative to the config file's directory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbones import BLOCK_KINDS, PRESETS, BackboneSpec, FeatureShape
from .datapipe import AugmentPolicy
from .errors import ConfigError
from .fusion_models import FUSION_MODES, FusionConfig
from .training import OptimConfig


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, ...]
    stage_channels: tuple[int, ...] = ()
    blocks: tuple[int, ...] = ()
    stem_channels: int = 0          # 0 = stage_channels[0]
    stem_kernel: int = 7
    block_kind: str = "residual-basic"
    growth_rate: int = 0            # 0 = default (stage width / 4)
    preset: str = ""                # overrides the structural fields

    def spec(self) -> BackboneSpec:
        shape = FeatureShape(self.input_shape[0], self.input_shape[1:])
        if self.preset:
            if self.preset not in PRESETS:
                raise ConfigError(f"unknown backbone preset {self.preset!r}")
            return BackboneSpec(input_shape=shape, **PRESETS[self.preset])
        if not self.stage_channels or not self.blocks:
            raise ConfigError("backbone needs stage_channels and blocks (or a preset)")
        return BackboneSpec(
            input_shape=shape,
            stem_channels=self.stem_channels or self.stage_channels[0],
            stage_channels=self.stage_channels,
            blocks_per_stage=self.blocks,
            block_kind=self.block_kind,
            stem_kernel=self.stem_kernel,
            growth_rate=self.growth_rate or None,
        )


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    gamma_min: float = 0.7
    gamma_max: float = 1.5
    noise_sigma_max: float = 0.05
    flip_prob: float = 0.5


@dataclass
class RunConfig:
    mode: str
    num_classes: int
    modalities: tuple[str, ...]
    backbones: dict[str, BackboneConfig]
    manifest: str = ""
    out_dir: str = ""
    seed: int = 0
    epochs: int = 1
    batch_size: int = 8
    registered: bool = True
    crop: bool = False
    normalize: bool = True
    head_hidden: int = 0
    conversion_nonlinearity: bool = False
    fusion_widths: tuple[int, ...] | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            mode=self.mode,
            modalities=self.modalities,
            backbones={name: bc.spec() for name, bc in self.backbones.items()},
            num_classes=self.num_classes,
            head_hidden=self.head_hidden,
            fusion_widths=self.fusion_widths,
            conversion_nonlinearity=self.conversion_nonlinearity,
        )

    def augment_policy(self) -> AugmentPolicy | None:
        if not self.augment.enabled:
            return None
        return AugmentPolicy(
            gamma_range=(self.augment.gamma_min, self.augment.gamma_max),
            noise_sigma_range=(0.0, self.augment.noise_sigma_max),
            flip_prob=self.augment.flip_prob,
        )

    def model_digest(self) -> bytes:
        """Digest over everything that determines parameter layout."""
        lines = [
            f"mode={self.mode}",
            f"num_classes={self.num_classes}",
            f"head_hidden={self.head_hidden}",
            f"conversion_nonlinearity={self.conversion_nonlinearity}",
            f"fusion_widths={self.fusion_widths}",
            f"modalities={','.join(self.modalities)}",
        ]
        for name in self.modalities:
            lines.append(f"backbone.{name}={self.backbones[name]}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).digest()


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_int(raw: str, key: str) -> int:
    try:
        return int(raw.strip())
    except ValueError as err:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from err


def _parse_float(raw: str, key: str) -> float:
    try:
        return float(raw.strip())
    except ValueError as err:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from err


def _parse_int_list(raw: str, key: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{key}: expected a comma-separated integer list, got {raw!r}")
    return tuple(_parse_int(p, key) for p in parts)


def _parse_shape(raw: str, key: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.strip().lower().split("x") if p.strip()]
    dims = tuple(_parse_int(p, key) for p in parts)
    if len(dims) not in (3, 4):
        raise ConfigError(f"{key}: expected CxXxY or CxZxXxY, got {raw!r}")
    return dims


def _parse_str_list(raw: str, key: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in raw.split(",") if p.strip())
    if not parts:
        raise ConfigError(f"{key}: expected a comma-separated list, got {raw!r}")
    return parts


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    base_dir = Path(base_dir)
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()

    def take(key: str, default: str | None = None) -> str | None:
        return raw.pop(key, default)

    mode = take("run.mode")
    if mode is None:
        raise ConfigError("missing required key run.mode")
    if mode not in FUSION_MODES:
        raise ConfigError(f"run.mode must be one of {FUSION_MODES}, got {mode!r}")
    num_classes_raw = take("run.num_classes")
    if num_classes_raw is None:
        raise ConfigError("missing required key run.num_classes")
    num_classes = _parse_int(num_classes_raw, "run.num_classes")

    modalities_raw = take("model.modalities")
    if modalities_raw is None:
        raise ConfigError("missing required key model.modalities")
    modalities = _parse_str_list(modalities_raw, "model.modalities")

    backbones: dict[str, BackboneConfig] = {}
    for name in modalities:
        prefix = f"model.{name}."
        shape_raw = take(prefix + "input_shape")
        if shape_raw is None:
            raise ConfigError(f"missing required key {prefix}input_shape")
        kwargs = dict(input_shape=_parse_shape(shape_raw, prefix + "input_shape"))
        if (v := take(prefix + "stage_channels")) is not None:
            kwargs["stage_channels"] = _parse_int_list(v, prefix + "stage_channels")
        if (v := take(prefix + "blocks")) is not None:
            kwargs["blocks"] = _parse_int_list(v, prefix + "blocks")
        if (v := take(prefix + "stem_channels")) is not None:
            kwargs["stem_channels"] = _parse_int(v, prefix + "stem_channels")
        if (v := take(prefix + "stem_kernel")) is not None:
            kwargs["stem_kernel"] = _parse_int(v, prefix + "stem_kernel")
        if (v := take(prefix + "block_kind")) is not None:
            if v not in BLOCK_KINDS:
                raise ConfigError(f"{prefix}block_kind must be one of {BLOCK_KINDS}, got {v!r}")
            kwargs["block_kind"] = v
        if (v := take(prefix + "growth_rate")) is not None:
            kwargs["growth_rate"] = _parse_int(v, prefix + "growth_rate")
        if (v := take(prefix + "preset")) is not None:
            kwargs["preset"] = v
        backbones[name] = BackboneConfig(**kwargs)

    def resolve_path(value: str) -> str:
        return str(base_dir / value) if value and not Path(value).is_absolute() else value

    cfg = RunConfig(
        mode=mode,
        num_classes=num_classes,
        modalities=modalities,
        backbones=backbones,
        manifest=resolve_path(take("data.manifest", "") or ""),
        out_dir=resolve_path(take("run.out", "") or ""),
        seed=_parse_int(take("run.seed", "0"), "run.seed"),
        epochs=_parse_int(take("run.epochs", "1"), "run.epochs"),
        batch_size=_parse_int(take("run.batch_size", "8"), "run.batch_size"),
        registered=_parse_bool(take("data.registered", "true"), "data.registered"),
        crop=_parse_bool(take("data.crop", "false"), "data.crop"),
        normalize=_parse_bool(take("data.normalize", "true"), "data.normalize"),
        head_hidden=_parse_int(take("model.head_hidden", "0"), "model.head_hidden"),
        conversion_nonlinearity=_parse_bool(take("model.conversion_nonlinearity", "false"),
                                            "model.conversion_nonlinearity"),
        fusion_widths=(_parse_int_list(v, "model.fusion_widths")
                       if (v := take("model.fusion_widths")) else None),
        augment=AugmentConfig(
            enabled=_parse_bool(take("augment.enabled", "true"), "augment.enabled"),
            gamma_min=_parse_float(take("augment.gamma_min", "0.7"), "augment.gamma_min"),
            gamma_max=_parse_float(take("augment.gamma_max", "1.5"), "augment.gamma_max"),
            noise_sigma_max=_parse_float(take("augment.noise_sigma_max", "0.05"),
                                         "augment.noise_sigma_max"),
            flip_prob=_parse_float(take("augment.flip_prob", "0.5"), "augment.flip_prob"),
        ),
        optim=OptimConfig(
            lr=_parse_float(take("optim.lr", "1e-4"), "optim.lr"),
            beta1=_parse_float(take("optim.beta1", "0.9"), "optim.beta1"),
            beta2=_parse_float(take("optim.beta2", "0.999"), "optim.beta2"),
            eps=_parse_float(take("optim.eps", "1e-8"), "optim.eps"),
            weight_decay=_parse_float(take("optim.weight_decay", "1e-4"), "optim.weight_decay"),
            decoupled=_parse_bool(take("optim.decoupled", "false"), "optim.decoupled"),
        ),
    )
    if cfg.seed < 0:
        raise ConfigError("run.seed must be non-negative")
    if raw:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(raw))}")
    cfg.fusion_config()  # fail fast on structural problems
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


def override(cfg: RunConfig, *, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg
