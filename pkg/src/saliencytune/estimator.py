"""Scikit-learn style front door for saliency-guided fine-tuning.

``SaliencyTunedClassifier`` wraps the backend, explainer and trainer behind
the familiar ``fit`` / ``predict`` / ``transform`` surface so the toolkit
drops into sklearn pipelines and model-selection utilities. ``transform``
maps images to their normalized saliency maps, which is the representation
this estimator exists to shape.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .backend import ClassifierBackend, build_reference_cnn
from .data import FeedbackRecord, ImageSample
from .errors import ConfigError, InputError
from .explainer import ExplanationMask, explain_image, hard_threshold
from .trainer import TrainingConfig, finetune
from .validation import as_binary_mask, as_image_array


class SaliencyTunedClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier fine-tuned on label and explanation feedback.

    Parameters mirror :class:`TrainingConfig`; ``lam`` balances the
    classification and explanation terms of the loss. Masks passed to
    ``fit`` are binary ground-truth explanations at image resolution;
    entries may be ``None`` for label-only feedback.
    """

    def __init__(
        self,
        lam: float = 0.3,
        learning_rate: float = 0.01,
        epochs: int = 10,
        threshold: float = 0.5,
        temperature: float = 0.05,
        seed: int = 0,
        batch_size: int = 1,
        selection_criterion: str = "composite",
        optimizer: str = "sgd",
        clip_norm: Optional[float] = 5.0,
        shuffle: bool = True,
        validation_fraction: float = 0.1,
        classes: Optional[Sequence[str]] = None,
        backend: Optional[ClassifierBackend] = None,
    ):
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.threshold = threshold
        self.temperature = temperature
        self.seed = seed
        self.batch_size = batch_size
        self.selection_criterion = selection_criterion
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.shuffle = shuffle
        self.validation_fraction = validation_fraction
        self.classes = classes
        self.backend = backend

    def _config(self) -> TrainingConfig:
        return TrainingConfig(
            lam=self.lam,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            threshold=self.threshold,
            temperature=self.temperature,
            seed=self.seed,
            batch_size=self.batch_size,
            selection_criterion=self.selection_criterion,
            optimizer=self.optimizer,
            clip_norm=self.clip_norm,
            shuffle=self.shuffle,
        )

    def _samples(self, X, masks=None, prefix="s") -> list[ImageSample]:
        images = list(X)
        if masks is None:
            masks = [None] * len(images)
        if len(masks) != len(images):
            raise InputError(f"got {len(images)} images but {len(masks)} masks")
        out = []
        for i, (img, mask) in enumerate(zip(images, masks)):
            arr = as_image_array(img, name=f"X[{i}]")
            gt = None
            if mask is not None:
                gt = ExplanationMask(
                    as_binary_mask(mask, name=f"masks[{i}]"), origin="ground-truth"
                )
            out.append(ImageSample(id=f"{prefix}_{i:05d}", image=arr, label="", gt_mask=gt))
        return out

    def fit(self, X, y, masks=None):
        """Fine-tune on feedback built from labels ``y`` and optional ``masks``.

        A seeded fraction of the data is held out to pick the best epoch;
        the selected checkpoint becomes the fitted model.
        """
        config = self._config()
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ConfigError(
                f"validation_fraction must be in (0, 0.5], got {self.validation_fraction}"
            )
        y = list(y)
        if self.classes is not None:
            self.classes_ = np.asarray(list(self.classes), dtype=object)
        else:
            self.classes_ = np.asarray(sorted(set(y)), dtype=object)
        known = set(self.classes_.tolist())
        bad = [label for label in y if label not in known]
        if bad:
            raise InputError(f"labels {sorted(set(bad))} not in classes {sorted(known)}")

        samples = self._samples(X, masks, prefix="fit")
        if len(samples) != len(y):
            raise InputError(f"got {len(samples)} images but {len(y)} labels")
        if len(samples) < 2:
            raise InputError("need at least 2 samples to hold out a validation split")
        for sample, label in zip(samples, y):
            sample.label = label

        n_val = max(1, int(round(len(samples) * self.validation_fraction)))
        order = np.random.default_rng(self.seed).permutation(len(samples))
        val_idx = set(order[:n_val].tolist())
        validation = [samples[i] for i in sorted(val_idx)]
        feedback = [
            (
                samples[i],
                FeedbackRecord(
                    sample_id=samples[i].id,
                    corrected_label=samples[i].label,
                    corrected_mask=samples[i].gt_mask,
                    source="human",
                ),
            )
            for i in range(len(samples))
            if i not in val_idx
        ]

        if self.backend is not None:
            self.backend_ = self.backend
        else:
            sample_shape = samples[0].image.shape
            self.backend_ = build_reference_cnn(
                num_classes=len(self.classes_),
                in_channels=sample_shape[2],
                seed=self.seed,
            )
        classes = list(self.classes_.tolist())
        checkpoint, history = finetune(self.backend_, feedback, validation, config, classes)
        checkpoint.apply_to(self.backend_)
        self.checkpoint_ = checkpoint
        self.history_ = history
        self.n_features_in_ = int(np.prod(samples[0].image.shape))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "backend_")
        rows = []
        for sample in self._samples(X, prefix="pred"):
            probs, _ = self.backend_.forward(sample.image)
            rows.append(probs)
        return np.stack(rows, axis=0)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]

    def explain(self, X, class_index: Optional[int] = None):
        """Normalized saliency maps at explanation-layer resolution, (n, h, w)."""
        check_is_fitted(self, "backend_")
        maps = []
        for sample in self._samples(X, prefix="exp"):
            _, sal = explain_image(self.backend_, sample.image, class_index=class_index)
            maps.append(sal.numpy())
        return np.stack(maps, axis=0)

    def transform(self, X):
        return self.explain(X)

    def explanation_masks(self, X, class_index: Optional[int] = None):
        """Hard binary masks from the saliency maps, (n, h, w) uint8."""
        check_is_fitted(self, "backend_")
        masks = []
        for sample in self._samples(X, prefix="exp"):
            _, sal = explain_image(self.backend_, sample.image, class_index=class_index)
            masks.append(hard_threshold(sal, self.threshold).values)
        return np.stack(masks, axis=0)
