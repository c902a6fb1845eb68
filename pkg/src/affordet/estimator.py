"""scikit-learn style facade over training and inference."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import config as cfgmod
from .data.augment import resize
from .metrics import EvalReport
from .train import Trainer, evaluate_model
from .validation import check_images, check_samples


class AffordanceDetector(BaseEstimator):
    """Joint object detector and affordance-heatmap predictor.

    Parameters
    ----------
    config : RunConfig, optional
        Full run configuration; defaults to :class:`RunConfig()`.
    class_names, affordance_names : sequence of str, optional
        Label vocabularies; default to the config's ``[data]`` lists.
    mode : {"full", "light"}
        Inference with or without the adapter's refinement pass.
    """

    def __init__(self, config=None, class_names=None, affordance_names=None, mode="full"):
        self.config = config
        self.class_names = class_names
        self.affordance_names = affordance_names
        self.mode = mode

    def _resolved(self):
        cfg = self.config if self.config is not None else cfgmod.RunConfig()
        classes = list(self.class_names if self.class_names is not None else cfg.data.object_classes)
        affs = list(self.affordance_names if self.affordance_names is not None else cfg.data.affordance_classes)
        return cfg, classes, affs

    def fit(self, X, y=None, X_val=None, out_dir=None):
        """Train on a list of :class:`Sample`; ``y`` is ignored (labels live in the samples)."""
        cfg, classes, affs = self._resolved()
        X = check_samples(X, len(classes), len(affs))
        if X_val is not None:
            X_val = check_samples(X_val, len(classes), len(affs))
        trainer = Trainer(cfg, classes, affs)
        result = trainer.fit(X, X_val, out_dir)
        self.trainer_ = trainer
        self.model_ = result.model
        self.history_ = result.history
        self.classes_ = np.asarray(classes)
        self.affordances_ = np.asarray(affs)
        return self

    @classmethod
    def from_checkpoint(cls, path, mode="full") -> "AffordanceDetector":
        trainer = Trainer.from_checkpoint(path)
        est = cls(trainer.cfg, trainer.model.class_names, trainer.model.affordance_names, mode)
        est.trainer_ = trainer
        est.model_ = trainer.model
        est.history_ = []
        est.classes_ = np.asarray(trainer.model.class_names)
        est.affordances_ = np.asarray(trainer.model.affordance_names)
        return est

    def _images(self, X):
        check_is_fitted(self, "model_")
        if len(X) and hasattr(X[0], "image"):
            X = [resize(s, self.model_.input_size).image for s in X]
        arr = check_images(X, self.model_.input_size)
        return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()

    def _predict_both(self, X):
        images = self._images(X)
        return self.model_.eval().predict(images, self.mode)

    def predict(self, X):
        """Detections per image (lists of :class:`Detection`)."""
        dets, _ = self._predict_both(X)
        return dets

    def transform(self, X):
        """Affordance heatmaps, N x H x W x A in [0, 1]."""
        _, maps = self._predict_both(X)
        return maps

    def predict_all(self, X):
        return self._predict_both(X)

    def evaluate(self, X, per_image=None) -> EvalReport:
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, list(X), self.mode, per_image=per_image)

    def score(self, X, y=None) -> float:
        """map50 on labelled samples."""
        return self.evaluate(X).map50
