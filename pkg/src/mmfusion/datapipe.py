"""Preprocessing, augmentation, dataset manifests and the synthetic benchmark.

Sample tensors live in MMFT files referenced from a plain CSV manifest
(header ``id,modality,path,label,split``; paths relative to the
manifest). The synthetic generator plants an XOR-of-latent-bits signal
across two modalities: the 2D image renders bit u as the orientation of
a centered bar-shaped stripe pattern, the 3D volume renders bit v as
the depth position of a bright slab inside a fixed en-face disk, and
the label is u XOR v, so neither modality alone carries label
information while the pair determines the label up to noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .seeds import substream
from .tensorfile import load_tensor, peek_tensor_header, save_tensor

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["id", "modality", "path", "label", "split"]


# ---------------------------------------------------------------------------
# core preprocessing


def crop_nonzero(x: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Crop to the minimal bounding box of values above ``threshold``.

    The box is computed per spatial axis over all channels; channels are
    kept whole.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise InputError(f"crop_nonzero expects (C, *spatial), got shape {x.shape}")
    mask = (x > threshold).any(axis=0)
    if not mask.any():
        raise InputError(f"no values above threshold {threshold}; nothing to crop to")
    slices = []
    for axis in range(mask.ndim):
        proj = mask.any(axis=tuple(a for a in range(mask.ndim) if a != axis))
        idx = np.flatnonzero(proj)
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return x[(slice(None), *slices)].copy()


def _linear_resample(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    src = arr.shape[axis]
    if target == src:
        return arr
    pos = np.linspace(0.0, src - 1.0, target)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    w = (pos - lo).reshape((1,) * axis + (target,) + (1,) * (arr.ndim - axis - 1))
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + (b - a) * w


def resize(x: np.ndarray, target: tuple[int, ...]) -> np.ndarray:
    """Corner-aligned separable linear interpolation to ``target`` extents.

    Separable per-axis linear resampling equals bilinear/trilinear
    interpolation on the corner-aligned sample grid.
    """
    x = np.asarray(x)
    target = tuple(int(t) for t in target)
    if x.ndim - 1 != len(target):
        raise InputError(f"resize target {target} does not match spatial rank of {x.shape}")
    if any(t < 1 for t in target):
        raise InputError(f"resize target extents must be positive, got {target}")
    if x.shape[1:] == target:
        return x.copy()
    out = x.astype(np.float64, copy=False)
    for axis, t in enumerate(target):
        out = _linear_resample(out, axis + 1, t)
    return out.astype(x.dtype, copy=False)


def duplicate_to_volume(image: np.ndarray, depth: int) -> np.ndarray:
    """Repeat a C,X,Y image ``depth`` times into a C,Z,X,Y volume."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"duplicate_to_volume expects (C, X, Y), got shape {image.shape}")
    if depth < 1:
        raise InputError(f"depth must be at least 1, got {depth}")
    return np.repeat(image[:, None], depth, axis=1)


def normalize_minmax(x: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant inputs map to zeros."""
    x = np.asarray(x, dtype=np.float32)
    lo = float(x.min())
    hi = float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# samples and augmentation


@dataclass
class Sample:
    id: str
    modalities: dict[str, np.ndarray]
    label: int
    registered: bool = True


@dataclass(frozen=True)
class AugmentPolicy:
    gamma_range: tuple[float, float] = (0.7, 1.5)
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)
    flip_prob: float = 0.5
    flip_axes_2d: tuple[str, ...] = ("y",)
    flip_axes_3d: tuple[str, ...] = ("x", "y")
    apply_gamma: bool = True
    apply_noise: bool = True
    apply_flips: bool = True


def _flippable_axes(arr: np.ndarray, policy: AugmentPolicy) -> dict[str, int]:
    # Logical axes: x,y are the en-face extents shared by 2D images
    # (C,X,Y) and 3D volumes (C,Z,X,Y).
    if arr.ndim == 3:
        allowed = {"x": 1, "y": 2}
        names = policy.flip_axes_2d
    elif arr.ndim == 4:
        allowed = {"x": 2, "y": 3}
        names = policy.flip_axes_3d
    else:
        raise InputError(f"augment expects (C,X,Y) or (C,Z,X,Y) arrays, got shape {arr.shape}")
    return {name: allowed[name] for name in names if name in allowed}


def augment(sample: Sample, seed: int, policy: AugmentPolicy) -> Sample:
    """Gamma, additive Gaussian noise and axis flips; label preserved.

    Flip decisions are shared across modalities of a registered sample
    (drawn once per logical axis) and drawn independently per modality
    otherwise. Gamma requires inputs normalized to [0, 1].
    """
    rng = substream(seed, "augment")
    names = list(sample.modalities)

    flip_plan: dict[str, dict[str, bool]] = {}
    if policy.apply_flips:
        if sample.registered:
            axes = sorted({ax for n in names
                           for ax in _flippable_axes(sample.modalities[n], policy)})
            shared = {ax: bool(rng.random() < policy.flip_prob) for ax in axes}
            for n in names:
                local = _flippable_axes(sample.modalities[n], policy)
                flip_plan[n] = {ax: shared[ax] for ax in local}
        else:
            for n in names:
                local = _flippable_axes(sample.modalities[n], policy)
                flip_plan[n] = {ax: bool(rng.random() < policy.flip_prob)
                                for ax in sorted(local)}

    out: dict[str, np.ndarray] = {}
    for n in names:
        arr = np.array(sample.modalities[n], dtype=np.float32)
        if policy.apply_gamma:
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise InputError(f"gamma augmentation needs intensities in [0, 1]; "
                                 f"modality {n!r} spans [{arr.min():.3g}, {arr.max():.3g}]")
            gamma = float(rng.uniform(*policy.gamma_range))
            arr = arr ** np.float32(gamma)
        if policy.apply_noise:
            sigma = float(rng.uniform(*policy.noise_sigma_range))
            if sigma > 0:
                arr = arr + rng.normal(0.0, sigma, arr.shape).astype(np.float32)
        if policy.apply_flips:
            local = _flippable_axes(arr, policy)
            for ax, do_flip in flip_plan.get(n, {}).items():
                if do_flip:
                    arr = np.flip(arr, axis=local[ax]).copy()
        out[n] = arr
    return Sample(sample.id, out, sample.label, sample.registered)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    modality: str
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.records:
            raise InputError("manifest has no records")
        seen: set[tuple[str, str]] = set()
        labels: dict[str, int] = {}
        splits: dict[str, str] = {}
        for rec in self.records:
            key = (rec.id, rec.modality)
            if key in seen:
                raise InputError(f"duplicate manifest row for {key}")
            seen.add(key)
            if rec.split not in SPLITS:
                raise InputError(f"unknown split {rec.split!r} for sample {rec.id}")
            if rec.id in labels and labels[rec.id] != rec.label:
                raise InputError(f"inconsistent labels for sample {rec.id}")
            if rec.id in splits and splits[rec.id] != rec.split:
                raise InputError(f"inconsistent splits for sample {rec.id}")
            labels[rec.id] = rec.label
            splits[rec.id] = rec.split

    def modalities(self) -> tuple[str, ...]:
        seen: list[str] = []
        for rec in self.records:
            if rec.modality not in seen:
                seen.append(rec.modality)
        return tuple(seen)

    def sample_ids(self, split: str) -> list[str]:
        seen: list[str] = []
        for rec in self.records:
            if rec.split == split and rec.id not in seen:
                seen.append(rec.id)
        return seen

    def rows_for(self, sample_id: str) -> dict[str, ManifestRecord]:
        return {rec.modality: rec for rec in self.records if rec.id == sample_id}

    def label_of(self, sample_id: str) -> int:
        for rec in self.records:
            if rec.id == sample_id:
                return rec.label
        raise InputError(f"unknown sample id {sample_id!r}")

    def resolve(self, rec: ManifestRecord) -> Path:
        return self.base_dir / rec.path

    def validate_files(self) -> None:
        for rec in self.records:
            peek_tensor_header(self.resolve(rec))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for rec in self.records:
                writer.writerow([rec.id, rec.modality, rec.path, rec.label, rec.split])


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise InputError(f"manifest header must be {','.join(MANIFEST_HEADER)!r}")
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != 5:
                raise InputError(f"malformed manifest row: {row!r}")
            sid, modality, rel, label, split = row
            try:
                label_val = int(label)
            except ValueError as err:
                raise InputError(f"non-integer label {label!r} for sample {sid}") from err
            if label_val < 0:
                raise InputError(f"negative label for sample {sid}")
            records.append(ManifestRecord(sid, modality, rel, label_val, split))
    manifest = DatasetManifest(records, base_dir=path.parent)
    if check_files:
        manifest.validate_files()
    return manifest


def load_samples(manifest: DatasetManifest, split: str,
                 modality_shapes: dict[str, tuple[int, ...]], *,
                 crop: bool = False, crop_threshold: float = 0.0,
                 normalize: bool = True, registered: bool = True) -> list[Sample]:
    """Materialize a split: load, optionally crop, resize and normalize.

    ``modality_shapes`` maps modality name to the per-sample target shape
    (C, *spatial); arrays are resized when their spatial extents differ.
    Deterministic given the manifest (manifest row order is preserved).
    """
    samples = []
    for sid in manifest.sample_ids(split):
        rows = manifest.rows_for(sid)
        modalities: dict[str, np.ndarray] = {}
        for name, target in modality_shapes.items():
            if name not in rows:
                raise InputError(f"sample {sid} is missing modality {name!r}")
            arr = load_tensor(manifest.resolve(rows[name])).astype(np.float32)
            if crop:
                arr = crop_nonzero(arr, crop_threshold)
            if arr.shape[0] != target[0]:
                raise InputError(f"sample {sid} modality {name!r} has {arr.shape[0]} channels, "
                                 f"expected {target[0]}")
            if arr.shape[1:] != tuple(target[1:]):
                arr = resize(arr, tuple(target[1:]))
            if normalize:
                arr = normalize_minmax(arr)
            modalities[name] = arr
        samples.append(Sample(sid, modalities, manifest.label_of(sid), registered))
    return samples


def stack_batch(samples: list[Sample]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack a list of samples into per-modality arrays plus a label vector."""
    if not samples:
        raise InputError("cannot stack an empty batch")
    names = list(samples[0].modalities)
    batch = {n: np.stack([s.modalities[n] for s in samples]) for n in names}
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    return batch, labels


# ---------------------------------------------------------------------------
# synthetic planted-XOR benchmark


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 512
    n_val: int = 128
    n_test: int = 256
    image_shape: tuple[int, int, int] = (1, 32, 32)
    volume_shape: tuple[int, int, int, int] = (1, 12, 12, 12)
    noise_sigma: float = 0.25
    bar_amplitude: float = 0.4
    registered: bool = True
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes != 2:
            raise ConfigError("the planted-XOR benchmark is binary (num_classes=2)")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train + self.n_val + self.n_test < 1:
            raise ConfigError("sample counts must be non-negative and sum to at least 1")
        if len(self.image_shape) != 3 or len(self.volume_shape) != 4:
            raise ConfigError("image_shape must be (C,X,Y) and volume_shape (C,Z,X,Y)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def render_bar_image(u: int, shape: tuple[int, int, int],
                     offset: tuple[int, int] = (0, 0),
                     amplitude: float = 0.4) -> np.ndarray:
    """Centered bar-shaped stripe pattern; u=0 horizontal, u=1 vertical.

    The band is filled with unit-period-2 stripes running along the bar
    axis. At native resolution the orientation is crisp; resampled onto
    a coarser voxel grid the stripes alias, so their appearance is a
    fixed fingerprint when the pattern is centered but varies with any
    per-sample translation.
    """
    c, x, y = shape
    img = np.zeros(shape, dtype=np.float32)
    half_w = max(2, round(0.14 * min(x, y)))
    half_l = max(3, round(0.34 * min(x, y)))
    cx, cy = x // 2 + offset[0], y // 2 + offset[1]
    if u == 0:
        for row in range(cx - half_w, cx + half_w + 1):
            if 0 <= row < x and (row - cx) % 2 == 0:
                img[:, row, max(0, cy - half_l):max(0, cy + half_l + 1)] = amplitude
    else:
        for col in range(cy - half_w, cy + half_w + 1):
            if 0 <= col < y and (col - cy) % 2 == 0:
                img[:, max(0, cx - half_l):max(0, cx + half_l + 1), col] = amplitude
    return img


def render_slab_volume(v: int, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Bright slab inside a centered en-face disk; v picks the depth."""
    c, z, x, y = shape
    vol = np.zeros(shape, dtype=np.float32)
    half_thick = max(1, round(0.12 * z))
    z0 = round(0.25 * z) if v == 0 else round(0.75 * z)
    lo, hi = max(0, z0 - half_thick), min(z, z0 + half_thick + 1)
    xs = np.arange(x).reshape(-1, 1) - x // 2
    ys = np.arange(y).reshape(1, -1) - y // 2
    disk = (xs * xs + ys * ys) <= (0.35 * min(x, y)) ** 2
    vol[:, lo:hi, disk] = 1.0
    return vol


def synth_generate(spec: SynthSpec, out_dir) -> tuple[DatasetManifest, dict[str, tuple[int, int]]]:
    """Write the benchmark dataset; returns the manifest and latent bits.

    Labels are u XOR v. With ``registered=False`` the image modality is
    additionally translated per sample by up to 25% of each extent,
    destroying voxelwise correspondence with the volume while keeping
    the bar readable by a dedicated 2D branch.
    """
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    rng = substream(spec.seed, "synth")

    counts = [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)]
    records: list[ManifestRecord] = []
    latents: dict[str, tuple[int, int]] = {}
    index = 0
    for split, count in counts:
        for _ in range(count):
            sid = f"s{index:05d}"
            index += 1
            u = int(rng.integers(2))
            v = int(rng.integers(2))
            label = u ^ v
            if spec.registered:
                offset = (0, 0)
            else:
                _, ix, iy = spec.image_shape
                offset = (int(rng.integers(-(ix // 4), ix // 4 + 1)),
                          int(rng.integers(-(iy // 4), iy // 4 + 1)))
            image = render_bar_image(u, spec.image_shape, offset, spec.bar_amplitude)
            volume = render_slab_volume(v, spec.volume_shape)
            if spec.noise_sigma > 0:
                image = image + rng.normal(0, spec.noise_sigma, image.shape).astype(np.float32)
                volume = volume + rng.normal(0, spec.noise_sigma, volume.shape).astype(np.float32)
            for modality, arr in (("image2d", image), ("volume3d", volume)):
                rel = f"tensors/{sid}_{modality}.mmft"
                save_tensor(out_dir / rel, arr.astype(np.float32))
                records.append(ManifestRecord(sid, modality, rel, label, split))
            latents[sid] = (u, v)

    manifest = DatasetManifest(records, base_dir=out_dir)
    manifest.save(out_dir / "manifest.csv")
    return manifest, latents
