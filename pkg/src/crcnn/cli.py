"""``crcnn`` command line: synth, train, eval, infer.

Every failure prints one ``error[CODE]: message`` line to stderr and exits
with a nonzero status.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import Checkpoint, CheckpointError, restore
from .geometry import GeometryError, tight_bbox
from .layers import ConstraintViolation
from .metrics import MetricError
from .model import ConfigError, ConstrainedRCNN, Detection, ModelConfig
from .train import TrainConfig, Trainer, TrainingAborted, evaluate, format_log, read_log

logger = logging.getLogger("crcnn")

TEST_SEED_OFFSET = 1_000_003
EXIT_CODES = {"E_CONFIG": 2, "E_DATA": 3, "E_CHECKPOINT": 4, "E_IO": 5, "E_NONFINITE": 6, "E_METRIC": 7,
              "E_CONSTRAINT": 8}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Model and training settings; serialised flat (one JSON object)."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    MODEL_KEYS = frozenset(f.name for f in dataclasses.fields(ModelConfig))
    TRAIN_KEYS = frozenset(f.name for f in dataclasses.fields(TrainConfig))

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        flat = {k.replace("-", "_"): v for k, v in flat.items()}
        unknown = set(flat) - cls.MODEL_KEYS - cls.TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        m = {k: v for k, v in flat.items() if k in cls.MODEL_KEYS}
        t = {k: v for k, v in flat.items() if k in cls.TRAIN_KEYS}
        try:
            return cls(ModelConfig(**m), TrainConfig(**t))
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_flat(self) -> dict:
        return {**self.model.to_dict(), **self.train.to_dict()}


def parse_overrides(items) -> dict:
    """``--key=value`` pairs; values are JSON when they parse, else strings."""
    out = {}
    for item in items:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognised argument {item!r} (overrides take the form --key=value)")
        key, raw = item[2:].split("=", 1)
        try:
            out[key.replace("-", "_")] = json.loads(raw)
        except ValueError:
            out[key.replace("-", "_")] = raw
    return out


def load_run_config(path, overrides: dict) -> RunConfig:
    flat = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except OSError as e:
            raise CliError("E_IO", f"cannot read config {path}: {e.strerror}") from None
        except ValueError as e:
            raise CliError("E_CONFIG", f"config {path} is not valid JSON: {e}") from None
        if not isinstance(flat, dict):
            raise CliError("E_CONFIG", f"config {path} must hold a JSON object")
    flat.update(overrides)
    return RunConfig.from_flat(flat)


# -- subcommands --------------------------------------------------------------------------
def cmd_synth(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"synth takes no config overrides: {sorted(overrides)}")
    test_count = args.count if args.test_count is None else args.test_count
    if args.count <= 0 or test_count < 0:
        raise CliError("E_CONFIG", "counts must be positive")
    cfg = D.ForgeConfig(size=args.size, splice_sigma=args.splice_sigma)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        splits = [("train", args.count, args.seed)]
        if test_count:
            splits.append(("test", test_count, args.seed + TEST_SEED_OFFSET))
        for split, count, seed in splits:
            samples = D.generate(count, seed, cfg, balanced=not args.unbalanced)
            path = D.save_dataset(samples, out, split)
            print(f"{split}: {count} samples -> {path}")
    except OSError as e:
        raise CliError("E_IO", f"cannot write dataset to {out}: {e.strerror}") from None
    return 0


def _load_samples(manifest) -> list:
    man = D.load_dataset(manifest)
    return list(man.samples())


def cmd_train(args, overrides) -> int:
    run = load_run_config(args.config, overrides)
    samples = _load_samples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ConstrainedRCNN(run.model)
    trainer = Trainer(model, run.train, samples)
    rows = []
    if args.resume:
        ckpt = Checkpoint.load(args.resume, model.config.digest())
        trainer.resume(ckpt)
        log_path = out / "loss_log.csv"
        if log_path.exists():
            rows = [r for r in read_log(log_path) if r["step"] < trainer.step]
        trainer.log = rows
    elif args.init:
        restore(model, Checkpoint.load(args.init), force=args.force)
    (out / "config.json").write_text(json.dumps(run.to_flat(), indent=2) + "\n")
    log_path = out / "loss_log.csv"
    with open(log_path, "w") as fh:
        fh.write(format_log(trainer.log))
        fh.flush()

        def on_step(row):
            fh.write(format_log([row]).split("\n", 1)[1])
            if row["step"] % 50 == 0:
                fh.flush()
                logger.info("step %d L_total %.4f", row["step"], row["L_total"])

        try:
            trainer.run(args.until, checkpoint_dir=out, on_step=on_step)
        except TrainingAborted as e:
            raise CliError("E_NONFINITE", f"{e}; last good checkpoint kept at {out / 'last.ckpt'}") from None
    trainer.checkpoint().save(out / "model.ckpt")
    print(f"trained {trainer.step} steps -> {out / 'model.ckpt'}")
    return 0


def _model_from_checkpoint(path, config_path, overrides, force) -> ConstrainedRCNN:
    ckpt = Checkpoint.load(path)
    if config_path is not None or overrides:
        cfg = load_run_config(config_path, overrides).model
    else:
        cfg = ModelConfig.from_dict(ckpt.config)
    model = ConstrainedRCNN(cfg)
    if ckpt.digest != cfg.digest() and not force:
        raise CliError("E_CHECKPOINT", f"checkpoint {path} does not match the requested model config (use --force)")
    restore(model, ckpt, force=force)
    return model


def _scaffold_detections(samples) -> list:
    """Ground truth dressed up as detections (evaluation-path check)."""
    out = []
    for s in samples:
        box = tight_bbox(s.mask)
        out.append([Detection(s.cls, 1.0, box, s.mask.astype(np.uint8), s.mask.astype(np.float64))])
    return out


def cmd_eval(args, overrides) -> int:
    samples = _load_samples(args.data)
    if args.scaffold:
        report = evaluate(None, samples, pooling=args.pooling, detections=_scaffold_detections(samples))
    else:
        if args.checkpoint is None:
            raise CliError("E_CONFIG", "eval needs --checkpoint (or --scaffold)")
        model = _model_from_checkpoint(args.checkpoint, args.config, overrides, args.force)
        report = evaluate(model, samples, score_thresh=args.score_thresh, pooling=args.pooling)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(json.dumps({k: report.to_dict()[k] for k in ("f1", "auc", "map", "class_accuracy")}))
    return 0


def cmd_infer(args, overrides) -> int:
    model = _model_from_checkpoint(args.checkpoint, args.config, overrides, args.force)
    try:
        image = D.read_ppm(args.image)
    except D.DataError as e:
        raise CliError("E_IO", f"unreadable image: {e}") from None
    dets = model.detect(image, score_thresh=args.score_thresh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    mask = np.zeros(image.shape[:2], np.uint8)
    for d in dets:
        mask |= d.mask.astype(np.uint8)
    D.write_pgm(out / f"{stem}_mask.pgm", mask * 255)
    payload = [{"class_name": d.class_name, "score": d.score, "bbox": [float(v) for v in d.box]} for d in dets]
    (out / f"{stem}_detections.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"{len(dets)} detections -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crcnn", description="Manipulation detection and segmentation on synthetic forgeries.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=900, help="training samples")
    s.add_argument("--test-count", type=int, default=None, help="test samples (default: --count)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=192)
    s.add_argument("--splice-sigma", type=float, default=2.0)
    s.add_argument("--unbalanced", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model; extra --key=value flags override config fields")
    t.add_argument("--data", required=True, help="training manifest (.jsonl)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--init", default=None, help="initial weights checkpoint")
    t.add_argument("--resume", default=None, help="checkpoint to resume (restores optimizer and step)")
    t.add_argument("--until", type=int, default=None, help="stop at this step (default: config steps)")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--out", default=None, help="report path (JSON)")
    e.add_argument("--score-thresh", type=float, default=0.05)
    e.add_argument("--pooling", choices=("macro", "micro"), default="macro")
    e.add_argument("--scaffold", action="store_true", help="score ground truth as predictions")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect and segment one PPM image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config", default=None)
    i.add_argument("--score-thresh", type=float, default=None)
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, parse_overrides(extra))
    except CliError as e:
        code, msg = e.code, str(e)
    except ConfigError as e:
        code, msg = "E_CONFIG", str(e)
    except D.DataError as e:
        code, msg = "E_DATA", str(e)
    except CheckpointError as e:
        code, msg = "E_CHECKPOINT", str(e)
    except MetricError as e:
        code, msg = "E_METRIC", str(e)
    except GeometryError as e:
        code, msg = "E_DATA", str(e)
    except ConstraintViolation as e:
        code, msg = "E_CONSTRAINT", str(e)
    except OSError as e:
        code, msg = "E_IO", f"{e.filename}: {e.strerror}"
    print(f"error[{code}]: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
