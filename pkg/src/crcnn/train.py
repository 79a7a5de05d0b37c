"""Seeded, resumable training loop and the evaluation pass."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, model_checkpoint, restore
from .data import CLASS_NAMES, Sample, augment_flip, augment_noise
from .layers import SGD
from .metrics import EvalReport, average_precision, mean_ap, pixel_scores
from .model import ConfigError, ConstrainedRCNN, score_map, total_loss

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_RPN-A", "L_cls_pred", "L_bbox_pred", "L_Stage-1", "L_Stage-2", "L_total", "lr")


class TrainingAborted(RuntimeError):
    """A loss component went non-finite; ``component`` names it."""

    def __init__(self, step: int, component: str):
        super().__init__(f"non-finite {component} at step {step}")
        self.step = step
        self.component = component


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: tuple = (5e-3, 5e-4, 5e-5)
    lr_drops: tuple = (0.4, 0.8)
    warmup: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    seed: int = 0
    flip: bool = True
    noise_sigma: float = 0.0
    phase: str = "full"
    checkpoint_every: int = 500

    def __post_init__(self):
        self.lr = tuple(float(v) for v in self.lr)
        self.lr_drops = tuple(float(v) for v in self.lr_drops)
        if len(self.lr) != len(self.lr_drops) + 1:
            raise ConfigError("lr needs one more value than lr_drops")
        fr = self.lr_drops
        if any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ConfigError("lr_drops must be strictly increasing fractions in (0, 1]")
        if self.phase not in ("stage1", "full"):
            raise ConfigError(f"phase must be 'stage1' or 'full', got {self.phase!r}")
        if self.steps <= 0:
            raise ConfigError("steps must be positive")

    def lr_at(self, step: int) -> float:
        k = sum(step >= int(round(f * self.steps)) for f in self.lr_drops)
        lr = self.lr[k]
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        return lr

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


class Trainer:
    """One image per step; the step index alone determines the sample,
    augmentation and sampling randomness, so a resumed run replays the
    uninterrupted one exactly."""

    def __init__(self, model: ConstrainedRCNN, cfg: TrainConfig, samples: Sequence[Sample]):
        if len(samples) == 0:
            raise ValueError("training set is empty")
        self.model = model
        self.cfg = cfg
        self.samples = samples
        self.opt = SGD(model.parameters(), cfg.lr[0], cfg.momentum, cfg.weight_decay, cfg.clip_norm)
        self.opt.post_step.append(model.constrained.project)
        self.step = 0
        self.last_loss = float("nan")
        self.log: list[dict] = []
        self._perm_cache: tuple[int, np.ndarray] | None = None

    def sample_index(self, step: int) -> int:
        n = len(self.samples)
        epoch = step // n
        if self._perm_cache is None or self._perm_cache[0] != epoch:
            self._perm_cache = (epoch, np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(n))
        return int(self._perm_cache[1][step % n])

    def train_step(self) -> dict:
        cfg, step = self.cfg, self.step
        rng = np.random.default_rng([cfg.seed, 2, step])
        sample = self.samples[self.sample_index(step)]
        if cfg.flip:
            sample = augment_flip(sample, bool(rng.random() < 0.5))
        if cfg.noise_sigma > 0:
            sample = augment_noise(sample, cfg.noise_sigma, rng)
        bundle = self.model.compute_losses(sample.image, sample.mask, sample.cls, rng,
                                           stage2=cfg.phase == "full")
        comps = bundle.components()
        for name, value in comps.items():
            if not np.isfinite(value):
                raise TrainingAborted(step, name)
        loss = total_loss(bundle)
        self.last_loss = float(loss.data)
        self.model.zero_grad()
        T.backward(loss)
        self.opt.lr = cfg.lr_at(step)
        self.opt.step()
        self.model.constrained.check()
        stage1 = comps["L_RPN-A"] + comps["L_cls_pred"] + comps["L_bbox_pred"]
        row = {"step": step, **{k: comps[k] for k in ("L_RPN-A", "L_cls_pred", "L_bbox_pred")},
               "L_Stage-1": stage1, "L_Stage-2": comps["L_Stage-2"],
               "L_total": stage1 + comps["L_Stage-2"], "lr": self.opt.lr}
        self.log.append(row)
        self.step += 1
        return row

    def run(self, until: int | None = None, checkpoint_dir=None,
            on_step: Callable[[dict], None] | None = None) -> list[dict]:
        until = self.cfg.steps if until is None else until
        while self.step < until:
            row = self.train_step()
            if on_step is not None:
                on_step(row)
            if checkpoint_dir is not None and (self.step % self.cfg.checkpoint_every == 0 or self.step == until):
                self.checkpoint().save(Path(checkpoint_dir) / "last.ckpt")
        return self.log

    def checkpoint(self) -> Checkpoint:
        return model_checkpoint(self.model, self.step, self.opt, {"train": self.cfg.to_dict()})

    def resume(self, ckpt: Checkpoint) -> None:
        restore(self.model, ckpt, self.opt)
        self.step = int(ckpt.step)


def format_log(rows: Sequence[dict]) -> str:
    """CSV text with a header; floats use ``repr`` so replay is exact."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def evaluate(model: ConstrainedRCNN | None, samples: Sequence[Sample], score_thresh: float = 0.05,
             pooling: str = "macro", detections=None) -> EvalReport:
    """Detect on every sample and score the pasted score maps and boxes.

    ``detections`` may be given precomputed (one list per sample), in which
    case ``model`` is not used.
    """
    if detections is None:
        detections = [model.detect(s.image, score_thresh=score_thresh) for s in samples]
    maps = [score_map(d, s.mask.shape) for d, s in zip(detections, samples)]
    f1, auc_value, per = pixel_scores(maps, [s.mask for s in samples], pooling)
    dets = [[(d.class_id, d.score, tuple(d.box)) for d in ds] for ds in detections]
    gts = [[(s.cls, tuple(s.bbox))] for s in samples]
    ap = average_precision(dets, gts, classes=range(len(CLASS_NAMES)))
    with_det = [(ds[0].class_id, s.cls) for ds, s in zip(detections, samples) if ds]
    acc = float(np.mean([p == t for p, t in with_det])) if with_det else 0.0
    for entry, ds in zip(per, detections):
        entry["detections"] = len(ds)
        entry["top_class"] = ds[0].class_id if ds else None
    return EvalReport(f1, auc_value, {CLASS_NAMES[k]: v for k, v in ap.items()}, mean_ap(ap), acc, per)
