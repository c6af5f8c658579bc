"""Adam optimization, the training loop, checkpoints and ensembling.

Weight decay defaults to the classical coupled form (L2 term added to
the gradient before the moment updates); ``decoupled=True`` switches to
decay applied directly to the parameters. Training is a pure function
of (config, manifest, seed): reruns produce byte-identical metrics logs
and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .datapipe import Sample, augment, load_manifest, load_samples, stack_batch
from .errors import ConfigError, InputError, NumericFault
from .fusion_models import FusionModel, build_model, predict
from .metrics import auc, cohen_kappa
from .seeds import derive_seed, substream
from .tensorfile import load_named_tensors, save_named_tensors


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled: bool = False


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, named_params, config: OptimConfig | None = None):
        self.config = config or OptimConfig()
        self.named = list(named_params)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericFault(f"non-finite gradient in parameter {name!r}")
            if cfg.weight_decay:
                if cfg.decoupled:
                    p.data -= cfg.lr * cfg.weight_decay * p.data
                else:
                    g = g + cfg.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def adam_step(optimizer: Adam) -> None:
    """One optimizer step over all tracked parameters and their gradients."""
    optimizer.step()


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_items(model: FusionModel, optimizer: Adam | None,
                     epoch: int, seed: int, best_metric: float) -> dict[str, np.ndarray]:
    items: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        items[f"param.{name}"] = p.data
    for name, b in model.named_buffers():
        items[f"buffer.{name}"] = b
    if optimizer is not None:
        for name in optimizer.m:
            items[f"optim.m.{name}"] = optimizer.m[name]
            items[f"optim.v.{name}"] = optimizer.v[name]
        items["optim.t"] = np.asarray(float(optimizer.t))
    items["meta.epoch"] = np.asarray(float(epoch))
    items["meta.seed"] = np.asarray(float(seed))
    items["meta.best_metric"] = np.asarray(float(best_metric))
    return items


def save_checkpoint(path, model: FusionModel, optimizer: Adam | None,
                    digest: bytes, epoch: int, seed: int, best_metric: float) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_named_tensors(path, digest, checkpoint_items(model, optimizer, epoch, seed, best_metric))


def load_checkpoint(path, model: FusionModel, optimizer: Adam | None = None,
                    expected_digest: bytes | None = None) -> dict[str, float]:
    digest, items = load_named_tensors(path)
    if expected_digest is not None and digest != expected_digest:
        raise ConfigError("checkpoint/config digest mismatch: the checkpoint was "
                          "written for a different model configuration")
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in items:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        stored = items.pop(key)
        if stored.shape != p.data.shape:
            raise ConfigError(f"checkpoint parameter {name!r} has shape {stored.shape}, "
                              f"model expects {p.data.shape}")
        p.data = stored.astype(p.data.dtype, copy=False)
    for name, b in model.named_buffers():
        key = f"buffer.{name}"
        if key not in items:
            raise ConfigError(f"checkpoint is missing buffer {name!r}")
        stored = items.pop(key)
        if stored.shape != b.shape:
            raise ConfigError(f"checkpoint buffer {name!r} has shape {stored.shape}, "
                              f"model expects {b.shape}")
        b[...] = stored
    if optimizer is not None:
        for name in optimizer.m:
            for kind, store in (("m", optimizer.m), ("v", optimizer.v)):
                key = f"optim.{kind}.{name}"
                if key not in items:
                    raise ConfigError(f"checkpoint has no optimizer state for {name!r}")
                store[name][...] = items.pop(key)
        optimizer.t = int(items.pop("optim.t"))
    meta = {key.removeprefix("meta."): float(val)
            for key, val in items.items() if key.startswith("meta.")}
    return meta


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("-inf")
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def selection_metric(y_true: np.ndarray, probs: np.ndarray, num_classes: int) -> float:
    """Validation-selection metric: AUC for binary, kappa otherwise."""
    if num_classes == 2:
        return auc(y_true, probs[:, 1])
    return cohen_kappa(y_true, probs.argmax(axis=1), num_classes)


def _batched_predict(model: FusionModel, samples: list[Sample],
                     batch_size: int) -> tuple[np.ndarray, np.ndarray, float]:
    """(labels, probabilities, mean loss) over samples, in eval mode."""
    was_training = model.training
    model.eval()
    all_probs = []
    all_labels = []
    losses = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch, labels = stack_batch(chunk)
            probs = predict(model, batch)
            eps = np.finfo(np.float64).tiny
            losses.append(float(-np.log(np.maximum(probs[np.arange(len(chunk)), labels], eps)).mean()))
            all_probs.append(probs)
            all_labels.append(labels)
    finally:
        model.train(was_training)
    labels = np.concatenate(all_labels)
    probs = np.concatenate(all_probs)
    loss = float(np.mean(losses))
    return labels, probs, loss


def train_run(cfg, out_dir=None, resume: str | None = None) -> TrainResult:
    """Train per config; persist the best-validation checkpoint and a log.

    ``cfg`` is a RunConfig (see config.py). The metrics log has one row
    per epoch: ``epoch,split,loss,metric`` for the validation split. The
    best checkpoint (by AUC for binary, kappa otherwise) is kept at
    <out>/checkpoint.mmck.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    if not str(out):
        raise ConfigError("training needs an output directory (run.out)")
    out.mkdir(parents=True, exist_ok=True)

    manifest = load_manifest(cfg.manifest)
    for split in ("train", "val"):
        if not manifest.sample_ids(split):
            raise InputError(f"manifest has an empty {split!r} split")

    fusion_cfg = cfg.fusion_config()
    model = build_model(fusion_cfg, dtype=np.float32, rng=substream(cfg.seed, "init"))
    optimizer = Adam(list(model.named_parameters()), cfg.optim)
    digest = cfg.model_digest()
    if resume:
        load_checkpoint(resume, model, optimizer, expected_digest=digest)

    shapes = {m: fusion_cfg.spec(m).input_shape.as_tuple() for m in fusion_cfg.modalities}
    common = dict(crop=cfg.crop, normalize=cfg.normalize, registered=cfg.registered)
    train_samples = load_samples(manifest, "train", shapes, **common)
    val_samples = load_samples(manifest, "val", shapes, **common)

    policy = cfg.augment_policy()
    shuffle_rng = substream(cfg.seed, "shuffle")
    result = TrainResult(checkpoint_path=out / "checkpoint.mmck", log_path=out / "metrics.csv")
    rows = ["epoch,split,loss,metric"]

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        model.train()
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            if policy is not None:
                chunk = [augment(s, derive_seed(cfg.seed, "augment", epoch, s.id), policy)
                         for s in chunk]
            batch, labels = stack_batch(chunk)
            logits = model.forward(batch)
            loss = ops.softmax_cross_entropy(logits, labels)
            if not loss.is_finite():
                raise NumericFault(f"training loss became non-finite at epoch {epoch}; "
                                   f"last good checkpoint kept at {result.checkpoint_path}")
            model.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())

        val_labels, val_probs, val_loss = _batched_predict(model, val_samples, cfg.batch_size)
        metric = selection_metric(val_labels, val_probs, fusion_cfg.num_classes)
        rows.append(f"{epoch},val,{val_loss!r},{metric!r}")
        result.history.append(EpochStats(epoch, float(np.mean(epoch_losses)), val_loss, metric))
        if metric > result.best_metric:
            result.best_metric = metric
            result.best_epoch = epoch
            save_checkpoint(result.checkpoint_path, model, optimizer, digest,
                            epoch, cfg.seed, metric)

    result.log_path.write_text("\n".join(rows) + "\n")
    return result


def ensemble_predict(models: list[FusionModel], batch) -> np.ndarray:
    """Arithmetic mean of per-model class probability rows."""
    if not models:
        raise ConfigError("ensemble needs at least one model")
    ks = {m.num_classes for m in models}
    if len(ks) > 1:
        raise ConfigError(f"ensemble members disagree on the class count: {sorted(ks)}")
    probs = [predict(m, batch) for m in models]
    return np.mean(probs, axis=0)
