"""Classification, explanation, and combined losses.

The explanation loss is one minus a soft Jaccard overlap between the
model's soft mask and the corrected mask: the Jaccard index is a
similarity, so its complement is what gradient descent minimizes.
Numerical guards are fixed constants so results reproduce bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InputError
from .explainer import ExplanationMask, SoftMask
from .validation import as_one_hot, check_probabilities

LOG_CLAMP = 1e-12
JACCARD_SMOOTHING = 1e-6
DEGENERATE_EXPLANATION_PENALTY = 1.0


def _scalar(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


@dataclass
class LossBreakdown:
    """Components of one combined-loss evaluation.

    Fields may be python floats or 0-dim tensors; ``l_total`` is always the
    exact convex combination (1 - lambda) * l_cls + lambda * l_exp.
    """

    l_cls: object
    l_exp: object
    l_total: object
    lam: float

    def __post_init__(self):
        expected = (1.0 - self.lam) * _scalar(self.l_cls) + self.lam * _scalar(self.l_exp)
        if abs(_scalar(self.l_total) - expected) > 1e-9:
            raise InputError("l_total is not the convex combination of its parts")

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(
            _scalar(self.l_cls), _scalar(self.l_exp), _scalar(self.l_total), self.lam
        )


def classification_loss(probabilities, label) -> torch.Tensor:
    """Categorical cross-entropy, -sum(y_hat * log y).

    ``probabilities`` is a simplex vector (tensor input keeps its graph);
    ``label`` is a one-hot vector or class index. Probabilities are clamped
    to [1e-12, 1] before the log.
    """
    probs = probabilities if isinstance(probabilities, torch.Tensor) else torch.as_tensor(
        probabilities, dtype=torch.float64
    )
    # double precision so the combined-loss identity holds at 1e-9
    probs = probs.reshape(-1).double()
    check_probabilities(probs.detach().numpy())
    target = torch.as_tensor(as_one_hot(label, probs.shape[0]), dtype=probs.dtype)
    return -(target * torch.log(probs.clamp(LOG_CLAMP, 1.0))).sum()


def _mask_values(mask) -> np.ndarray:
    if isinstance(mask, ExplanationMask):
        return mask.values
    return ExplanationMask(np.asarray(mask)).values


def jaccard_index(a, b) -> float:
    """|A n B| / |A u B| between binary masks; two empty masks count as 1.0."""
    av, bv = _mask_values(a), _mask_values(b)
    if av.shape != bv.shape:
        raise InputError(f"mask resolution mismatch: {av.shape} vs {bv.shape}")
    union = np.logical_or(av, bv).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(av, bv).sum() / union)


def soft_jaccard(pred, truth) -> torch.Tensor:
    """Differentiable overlap: sum(min) / sum(max) with a smoothing constant."""
    pred_t = pred.values if isinstance(pred, SoftMask) else torch.as_tensor(pred)
    pred_t = pred_t.double()
    truth_v = _mask_values(truth)
    if tuple(pred_t.shape) != truth_v.shape:
        raise InputError(
            f"resolution mismatch: prediction {tuple(pred_t.shape)} vs truth {truth_v.shape}"
        )
    truth_t = torch.as_tensor(truth_v, dtype=pred_t.dtype)
    intersection = torch.minimum(pred_t, truth_t).sum()
    union = torch.maximum(pred_t, truth_t).sum()
    return (intersection + JACCARD_SMOOTHING) / (union + JACCARD_SMOOTHING)


def explanation_loss(pred, truth) -> torch.Tensor:
    """1 - soft_jaccard(pred, truth); zero at perfect agreement."""
    return 1.0 - soft_jaccard(pred, truth)


def combined_loss(l_cls, l_exp, lam: float) -> LossBreakdown:
    """Convex combination (1 - lambda) * l_cls + lambda * l_exp.

    Accepts floats or scalar tensors; tensors keep their gradient graph in
    ``l_total``.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam!r}")
    total = (1.0 - lam) * l_cls + lam * l_exp
    return LossBreakdown(l_cls=l_cls, l_exp=l_exp, l_total=total, lam=lam)
