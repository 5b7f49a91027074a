"""Evaluation quantities: accuracy, per-class sensitivity, average Jaccard.

Jaccard is computed at the explanation layer's resolution (the same place
the loss lives), with the hard threshold recorded alongside the numbers.
The spread is a population standard deviation (divide by n).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import DEFAULT_CLASSES
from .errors import InputError
from .explainer import align_resolution, explain_image, hard_threshold
from .losses import jaccard_index


def format_float(x) -> str:
    """Stable CSV float formatting; empty string for missing values."""
    return "" if x is None else repr(float(x))


@dataclass
class MetricsReport:
    accuracy: float
    per_class_sensitivity: dict[str, float]
    avg_sensitivity: float
    avg_jaccard: Optional[float]
    jaccard_sd: Optional[float]
    n_samples: int
    threshold_used: float

    def __post_init__(self):
        if self.per_class_sensitivity:
            mean = float(np.mean(list(self.per_class_sensitivity.values())))
            if abs(mean - self.avg_sensitivity) > 1e-9:
                raise InputError("avg_sensitivity must be the unweighted sensitivity mean")

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_sensitivity": dict(self.per_class_sensitivity),
            "avg_sensitivity": self.avg_sensitivity,
            "avg_jaccard": self.avg_jaccard,
            "jaccard_sd": self.jaccard_sd,
            "jaccard_sd_convention": "population",
            "n_samples": self.n_samples,
            "threshold_used": self.threshold_used,
        }

    def csv_fields(self, classes: Sequence[str]) -> dict[str, str]:
        """The metric columns of the shared history/results CSV schema."""
        fields = {"accuracy": format_float(self.accuracy)}
        for c in classes:
            fields[f"sens_{c}"] = format_float(self.per_class_sensitivity.get(c))
        fields["avg_sensitivity"] = format_float(self.avg_sensitivity)
        fields["avg_jaccard"] = format_float(self.avg_jaccard)
        fields["jaccard_sd"] = format_float(self.jaccard_sd)
        return fields


def report_from_counts(
    confusion: np.ndarray,
    classes: Sequence[str],
    jaccards: Sequence[float],
    threshold: float,
) -> MetricsReport:
    """Assemble a report from a confusion matrix and per-sample Jaccards."""
    total = int(confusion.sum())
    if total == 0:
        raise InputError("cannot evaluate an empty sample set")
    accuracy = float(np.trace(confusion) / total)
    sensitivity: dict[str, float] = {}
    for k, name in enumerate(classes):
        actual = confusion[k].sum()
        if actual > 0:
            sensitivity[name] = float(confusion[k, k] / actual)
    avg_sensitivity = float(np.mean(list(sensitivity.values()))) if sensitivity else 0.0
    if jaccards:
        avg_j = float(np.mean(jaccards))
        sd_j = float(np.std(jaccards))  # population convention
    else:
        avg_j, sd_j = None, None
    return MetricsReport(
        accuracy=accuracy,
        per_class_sensitivity=sensitivity,
        avg_sensitivity=avg_sensitivity,
        avg_jaccard=avg_j,
        jaccard_sd=sd_j,
        n_samples=total,
        threshold_used=float(threshold),
    )


def per_sample_jaccards(backend, samples, threshold: float = 0.5) -> dict[str, float]:
    """Hard Jaccard against ground truth for every masked sample, keyed by id.

    The same quantity that feeds ``evaluate``'s aggregate, exposed per sample
    so two checkpoints can be compared on the exact same instances.
    """
    out: dict[str, float] = {}
    for s in samples:
        if s.gt_mask is None:
            continue
        _, nsal = explain_image(backend, s.image)
        pred_mask = hard_threshold(nsal, threshold)
        truth = align_resolution(s.gt_mask, nsal.resolution)
        out[s.id] = jaccard_index(pred_mask, truth)
    return out


def evaluate(
    backend,
    samples,
    threshold: float = 0.5,
    classes: Sequence[str] = DEFAULT_CLASSES,
) -> MetricsReport:
    """Classify every sample and score explanations against ground truth.

    The explanation is the model's own: Grad-CAM for the predicted class,
    hard-thresholded, compared at layer resolution with the ground-truth
    mask. Samples without a mask contribute to accuracy only.
    """
    if not samples:
        raise InputError("cannot evaluate an empty sample set")
    classes = list(classes)
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    jaccards: list[float] = []
    for s in samples:
        if s.label not in classes:
            raise InputError(f"sample {s.id}: label {s.label!r} not in {classes}")
        probs, nsal = explain_image(backend, s.image)
        pred = int(np.argmax(probs))
        confusion[classes.index(s.label), pred] += 1
        if s.gt_mask is not None:
            pred_mask = hard_threshold(nsal, threshold)
            truth = align_resolution(s.gt_mask, nsal.resolution)
            jaccards.append(jaccard_index(pred_mask, truth))
    return report_from_counts(confusion, classes, jaccards, threshold)
