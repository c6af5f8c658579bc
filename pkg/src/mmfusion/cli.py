"""Command line entry points: shape-check, synth, train, eval, ensemble.

Exit codes: 0 success, 1 input/configuration error, 2 numeric fault.
All commands are deterministic functions of their flags, config files
and input files (no timestamps in any output payload).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, override
from .datapipe import SynthSpec, load_manifest, load_samples, stack_batch, synth_generate
from .errors import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ConfigError, InputError, NumericFault
from .fusion_models import build_model, format_shape_report
from .metrics import MetricsReport, compute_report, youden_threshold
from .seeds import substream
from .training import ensemble_predict, load_checkpoint, train_run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfusion",
                                     description="2D/3D multimodal fusion models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shape-check",
                       help="print per-stage tap shapes and conversion parameters")
    p.add_argument("--config", required=True)

    p = sub.add_parser("synth", help="generate the synthetic planted-XOR dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=None,
                   help="total sample count, split 50/25/25 (overridden by --n-train etc.)")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-val", type=int, default=128)
    p.add_argument("--n-test", type=int, default=256)
    p.add_argument("--image-shape", default="1x32x32")
    p.add_argument("--volume-shape", default="1x12x12x12")
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--misregistered", action="store_true",
                   help="translate the 2D modality per sample (up to 25% of extent)")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--out", default=None, help="override run.out")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None, help="directory for metrics files (default: stdout only)")

    p = sub.add_parser("ensemble", help="average the predictions of several checkpoints")
    p.add_argument("--config", required=True, nargs="+",
                   help="one config per checkpoint, or a single shared config")
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None)

    return parser


def _shape_tuple(raw: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in raw.lower().split("x"))
    except ValueError as err:
        raise ConfigError(f"{what}: expected e.g. 1x32x32, got {raw!r}") from err


def _load_eval_model(cfg: RunConfig, checkpoint: str):
    fusion_cfg = cfg.fusion_config()
    model = build_model(fusion_cfg, dtype=np.float32, rng=substream(cfg.seed, "init"))
    load_checkpoint(checkpoint, model, expected_digest=cfg.model_digest())
    model.eval()
    return model, fusion_cfg


def _split_arrays(cfg: RunConfig, fusion_cfg, split: str):
    manifest = load_manifest(cfg.manifest)
    shapes = {m: fusion_cfg.spec(m).input_shape.as_tuple() for m in fusion_cfg.modalities}
    samples = load_samples(manifest, split, shapes, crop=cfg.crop,
                           normalize=cfg.normalize, registered=cfg.registered)
    if not samples:
        raise InputError(f"manifest has no {split!r} samples")
    return stack_batch(samples)


def _batched_probs(models, batch, labels, batch_size: int) -> np.ndarray:
    probs = []
    n = labels.size
    for start in range(0, n, batch_size):
        chunk = {name: arr[start:start + batch_size] for name, arr in batch.items()}
        probs.append(ensemble_predict(models, chunk))
    return np.concatenate(probs)


def _report_for(models, cfg: RunConfig, fusion_cfg, split: str) -> MetricsReport:
    batch, labels = _split_arrays(cfg, fusion_cfg, split)
    probs = _batched_probs(models, batch, labels, cfg.batch_size)
    threshold = None
    if fusion_cfg.num_classes == 2:
        # Operating point chosen on the validation split, then applied
        # to the requested split.
        val_batch, val_labels = _split_arrays(cfg, fusion_cfg, "val")
        val_probs = _batched_probs(models, val_batch, val_labels, cfg.batch_size)
        threshold = youden_threshold(val_labels, val_probs[:, 1])
    return compute_report(labels, probs, fusion_cfg.num_classes, threshold=threshold)


def _emit_report(report: MetricsReport, split: str, out: str | None) -> None:
    text = f"split={split}\n" + report.as_text()
    csv = MetricsReport.csv_header() + "\n" + report.as_csv_row() + "\n"
    sys.stdout.write(text)
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics_report.txt").write_text(text)
        (out_dir / "metrics_report.csv").write_text(csv)


def _cmd_shape_check(args) -> int:
    cfg = load_config(args.config)
    sys.stdout.write(format_shape_report(cfg.fusion_config()))
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.n is not None:
        n_train = args.n // 2
        n_val = args.n // 4
        n_test = args.n - n_train - n_val
    else:
        n_train, n_val, n_test = args.n_train, args.n_val, args.n_test
    spec = SynthSpec(
        n_train=n_train, n_val=n_val, n_test=n_test,
        image_shape=_shape_tuple(args.image_shape, "--image-shape"),
        volume_shape=_shape_tuple(args.volume_shape, "--volume-shape"),
        noise_sigma=args.sigma,
        registered=not args.misregistered,
        seed=args.seed,
    )
    manifest, _ = synth_generate(spec, args.out)
    ids = {rec.id for rec in manifest.records}
    sys.stdout.write(f"wrote {len(ids)} samples ({len(manifest.records)} tensors) "
                     f"under {args.out}\n")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = override(load_config(args.config), seed=args.seed, out_dir=args.out)
    if not cfg.manifest:
        raise ConfigError("training needs data.manifest")
    if not cfg.out_dir:
        raise ConfigError("training needs run.out (or --out)")
    result = train_run(cfg, resume=args.resume)
    sys.stdout.write(f"best epoch {result.best_epoch} "
                     f"(validation metric {result.best_metric!r})\n"
                     f"checkpoint: {result.checkpoint_path}\n"
                     f"log: {result.log_path}\n")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model, fusion_cfg = _load_eval_model(cfg, args.checkpoint)
    report = _report_for([model], cfg, fusion_cfg, args.split)
    _emit_report(report, args.split, args.out)
    return EXIT_OK


def _cmd_ensemble(args) -> int:
    configs = args.config
    checkpoints = args.checkpoint
    if len(configs) == 1:
        configs = configs * len(checkpoints)
    if len(configs) != len(checkpoints):
        raise ConfigError(f"{len(checkpoints)} checkpoints but {len(configs)} configs")
    models = []
    cfgs = []
    for cfg_path, ckpt in zip(configs, checkpoints):
        cfg = load_config(cfg_path)
        model, fusion_cfg = _load_eval_model(cfg, ckpt)
        models.append(model)
        cfgs.append((cfg, fusion_cfg))
    ks = {fc.num_classes for _, fc in cfgs}
    if len(ks) > 1:
        raise ConfigError(f"ensemble members disagree on the class count: {sorted(ks)}")
    cfg, fusion_cfg = cfgs[0]
    report = _report_for(models, cfg, fusion_cfg, args.split)
    _emit_report(report, args.split, args.out)
    return EXIT_OK


_COMMANDS = {
    "shape-check": _cmd_shape_check,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ensemble": _cmd_ensemble,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, InputError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFault as err:
        print(f"numeric fault: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
