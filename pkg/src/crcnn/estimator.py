"""scikit-learn style wrapper around model construction, training and detection."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Sample
from .geometry import tight_bbox
from .metrics import pixel_scores
from .model import ConstrainedRCNN, ModelConfig, score_map
from .train import TrainConfig, Trainer, evaluate


def check_images(X) -> list[np.ndarray]:
    """Validate a batch of RGB uint8 images of shape (H, W, 3)."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    images = []
    for i, img in enumerate(X):
        a = np.asarray(img)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"image {i}: expected shape (H, W, 3), got {a.shape}")
        if a.dtype != np.uint8:
            raise ValueError(f"image {i}: expected uint8 pixels, got {a.dtype}")
        images.append(a)
    if not images:
        raise ValueError("empty image batch")
    return images


def check_targets(X, y) -> list[Sample]:
    """Pair images with ``(mask, class_id)`` targets; masks must be binary,
    image-sized and non-empty."""
    images = check_images(X)
    y = list(y)
    if len(y) != len(images):
        raise ValueError(f"{len(images)} images but {len(y)} targets")
    out = []
    for i, (img, (mask, cls)) in enumerate(zip(images, y)):
        m = np.asarray(mask)
        if m.shape != img.shape[:2]:
            raise ValueError(f"target {i}: mask shape {m.shape} differs from image {img.shape[:2]}")
        if not np.all((m == 0) | (m == 1)) or not m.any():
            raise ValueError(f"target {i}: mask must be binary with at least one tampered pixel")
        if int(cls) not in (0, 1, 2):
            raise ValueError(f"target {i}: class id {cls} outside 0..2")
        out.append(Sample(img, m.astype(np.uint8), int(cls), tight_bbox(m)))
    return out


class ManipulationDetector(BaseEstimator):
    """Detect, classify and segment manipulated regions.

    Parameters
    ----------
    skip_structure : bool
        Fuse conv_3x features into the mask branch.
    steps, lr, seed : training schedule; ``lr`` is the first of three
        values, each later one ten times smaller.
    score_thresh : float
        Minimum detection score kept by :meth:`predict`.
    model_params, train_params : dict, optional
        Extra :class:`ModelConfig` / :class:`TrainConfig` fields.
    """

    def __init__(self, skip_structure=True, image_size=192, steps=2000, lr=5e-3, seed=0,
                 score_thresh=0.05, model_params=None, train_params=None):
        self.skip_structure = skip_structure
        self.image_size = image_size
        self.steps = steps
        self.lr = lr
        self.seed = seed
        self.score_thresh = score_thresh
        self.model_params = model_params
        self.train_params = train_params

    def _configs(self):
        mc = ModelConfig(image_size=self.image_size, skip_structure=self.skip_structure,
                         init_seed=self.seed, **(self.model_params or {}))
        tc = TrainConfig(steps=self.steps, lr=(self.lr, self.lr / 10, self.lr / 100), seed=self.seed,
                         **(self.train_params or {}))
        return mc, tc

    def fit(self, X, y):
        """Train on images ``X`` with targets ``y`` of ``(mask, class_id)``."""
        samples = check_targets(X, y)
        mc, tc = self._configs()
        self.model_ = ConstrainedRCNN(mc)
        trainer = Trainer(self.model_, tc, samples)
        trainer.run()
        self.loss_log_ = trainer.log
        self.n_steps_ = trainer.step
        return self

    def predict(self, X) -> list:
        """Detections per image, each sorted by descending score."""
        check_is_fitted(self, "model_")
        return [self.model_.detect(img, score_thresh=self.score_thresh) for img in check_images(X)]

    def transform(self, X) -> list[np.ndarray]:
        """Per-pixel tamper score maps in [0, 1]."""
        return [score_map(d, img.shape[:2]) for d, img in zip(self.predict(X), check_images(X))]

    def score(self, X, y) -> float:
        """Mean threshold-swept pixel F1."""
        samples = check_targets(X, y)
        f1, _, _ = pixel_scores(self.transform([s.image for s in samples]), [s.mask for s in samples])
        return f1

    def evaluate(self, X, y):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_targets(X, y), score_thresh=self.score_thresh)
