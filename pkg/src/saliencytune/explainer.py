"""Differentiable Grad-CAM branch and explanation-mask utilities.

The saliency map is the ReLU of activations weighted per channel by the
spatial mean of the class-score gradient. Channel weights are always
detached, so gradients of anything built on the saliency flow only through
the live activations. Hard thresholding serves metrics and display; the
sigmoid soft mask is the differentiable stand-in used inside the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backend import ActivationBlock
from .errors import InputError
from .validation import as_binary_mask, check_in_range

DEFAULT_THRESHOLD = 0.5
DEFAULT_TEMPERATURE = 0.05


@dataclass
class ChannelWeights:
    """Per-channel importance scalars; detached by construction."""

    weights: torch.Tensor
    class_index: int = 0
    detached: bool = True

    def __post_init__(self):
        if self.weights.ndim != 1:
            raise InputError(f"weights must be a vector, got shape {tuple(self.weights.shape)}")
        if not torch.isfinite(self.weights).all():
            raise InputError("channel weights contain non-finite values")
        self.weights = self.weights.detach()
        self.detached = True

    def __len__(self) -> int:
        return int(self.weights.shape[0])


@dataclass
class SaliencyMap:
    """Nonnegative i x j map; may carry a gradient graph through activations."""

    values: torch.Tensor
    class_index: int = 0
    normalized: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if self.values.ndim != 2:
            raise InputError(f"saliency map must be 2-D, got shape {tuple(self.values.shape)}")
        detached = self.values.detach()
        if not torch.isfinite(detached).all():
            raise InputError("saliency map contains non-finite values")
        if (detached < 0).any():
            raise InputError("saliency map entries must be nonnegative")

    def numpy(self) -> np.ndarray:
        return self.values.detach().double().numpy()

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])


@dataclass
class ExplanationMask:
    """Binary 2-D map: thresholded model output or a user/ground-truth mask."""

    values: np.ndarray
    origin: str = "model"  # model | feedback | ground-truth

    def __post_init__(self):
        self.values = as_binary_mask(self.values)

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    def is_empty(self) -> bool:
        return not self.values.any()


@dataclass
class SoftMask:
    """Differentiable relaxation of the thresholded mask.

    Entries are sigmoid outputs, mathematically in (0, 1); saturated pixels
    may round to the interval bounds in floating point.
    """

    values: torch.Tensor
    threshold: float
    temperature: float

    def __post_init__(self):
        detached = self.values.detach()
        if (detached < 0).any() or (detached > 1).any():
            raise InputError("soft mask entries must lie in (0, 1)")

    def harden(self, cutoff: float = 0.5) -> ExplanationMask:
        return ExplanationMask((self.values.detach().numpy() > cutoff).astype(np.uint8))


def channel_weights(gradient, class_index: int = 0) -> ChannelWeights:
    """Spatial mean of the class-score gradient, one weight per channel.

    The result is detached regardless of whether the input carries a graph.
    """
    grad = torch.as_tensor(gradient) if not isinstance(gradient, torch.Tensor) else gradient
    if grad.ndim != 3:
        raise InputError(f"gradient must be K x i x j, got shape {tuple(grad.shape)}")
    if grad.shape[1] == 0 or grad.shape[2] == 0:
        raise InputError("gradient has empty spatial dimensions")
    if not torch.isfinite(grad.detach()).all():
        raise InputError("gradient contains non-finite values")
    return ChannelWeights(grad.detach().mean(dim=(1, 2)), class_index=class_index)


def saliency(activations: ActivationBlock | torch.Tensor, weights: ChannelWeights) -> SaliencyMap:
    """ReLU of the channel-weighted activation sum.

    Differentiable with respect to the activations; the detached weights
    contribute no gradient path of their own.
    """
    acts = activations.values if isinstance(activations, ActivationBlock) else activations
    if acts.ndim != 3:
        raise InputError(f"activations must be K x i x j, got shape {tuple(acts.shape)}")
    if acts.shape[0] != len(weights):
        raise InputError(
            f"channel mismatch: {acts.shape[0]} activation channels vs {len(weights)} weights"
        )
    w = weights.weights.to(acts.dtype).view(-1, 1, 1)
    values = torch.relu((w * acts).sum(dim=0))
    return SaliencyMap(values, class_index=weights.class_index)


def normalize(sal: SaliencyMap) -> SaliencyMap:
    """Scale to [0, 1] by the max; an identically zero map is flagged degenerate."""
    peak = sal.values.detach().max()
    if peak <= 0:
        return SaliencyMap(sal.values, class_index=sal.class_index, normalized=True, degenerate=True)
    return SaliencyMap(sal.values / sal.values.max(), class_index=sal.class_index, normalized=True)


def _check_normalized(sal: SaliencyMap) -> torch.Tensor:
    values = sal.values
    if values.detach().max() > 1 + 1e-9:
        raise InputError("map must be normalized to [0, 1] first")
    return values


def hard_threshold(sal: SaliencyMap, t: float) -> ExplanationMask:
    """Binary mask: pixel is 1 iff its value strictly exceeds t.

    Evaluation/display only; this path is never inside the loss gradient.
    """
    t = check_in_range("threshold", t, 0.0, 1.0)
    values = _check_normalized(sal).detach().numpy()
    return ExplanationMask((values > t).astype(np.uint8), origin="model")


def soft_threshold(
    sal: SaliencyMap,
    t: float = DEFAULT_THRESHOLD,
    tau: float = DEFAULT_TEMPERATURE,
) -> SoftMask:
    """Pixelwise sigmoid((value - t) / tau); converges to the hard mask as tau -> 0."""
    t = check_in_range("threshold", t, 0.0, 1.0)
    if not tau > 0:
        raise InputError(f"temperature must be positive, got {tau!r}")
    values = torch.sigmoid((_check_normalized(sal) - t) / tau)
    return SoftMask(values, threshold=t, temperature=tau)


def _axis_blocks(source: int, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Source-index ranges [start, end) covered by each target cell.

    Floor boundaries; when upsampling each range is the single nearest pixel.
    """
    idx = np.arange(target + 1, dtype=np.int64)
    edges = (idx * source) // target
    starts = edges[:-1]
    ends = np.maximum(edges[1:], starts + 1)
    return starts, ends


def align_resolution(mask: ExplanationMask, target: tuple[int, int]) -> ExplanationMask:
    """Resample a binary mask to ``target`` resolution.

    Downsampling takes a block-majority vote (ties round to 1); upsampling
    replicates the nearest source pixel. The round trip is not an identity.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise InputError(f"target resolution must be at least 1 x 1, got {target}")
    src = mask.values
    if src.shape == (th, tw):
        return ExplanationMask(src.copy(), origin=mask.origin)
    rs, re = _axis_blocks(src.shape[0], th)
    cs, ce = _axis_blocks(src.shape[1], tw)
    # integral image -> per-block one-counts in O(1) each
    integral = np.zeros((src.shape[0] + 1, src.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = src.astype(np.int64).cumsum(0).cumsum(1)
    ones = (
        integral[re[:, None], ce[None, :]]
        - integral[rs[:, None], ce[None, :]]
        - integral[re[:, None], cs[None, :]]
        + integral[rs[:, None], cs[None, :]]
    )
    counts = (re - rs)[:, None] * (ce - cs)[None, :]
    out = (2 * ones >= counts).astype(np.uint8)
    return ExplanationMask(out, origin=mask.origin)


def explain_image(backend, image, class_index: int | None = None):
    """Forward + Grad-CAM in one read-only pass on the given backend.

    Returns (probabilities, normalized SaliencyMap) for ``class_index``,
    defaulting to the predicted class. The map is detached; this is the
    evaluation/display path, not the training path.
    """
    x = backend.to_input_tensor(image).requires_grad_(True)
    logits, acts = backend.forward_tensors(x)
    probs = torch.softmax(logits[0], dim=0).detach().double().numpy()
    c = int(class_index) if class_index is not None else int(np.argmax(probs))
    if not 0 <= c < backend.num_classes:
        raise InputError(f"class index {c} out of range [0, {backend.num_classes})")
    grad = torch.autograd.grad(logits[0, c], acts)[0][0].detach()
    weights = channel_weights(grad, class_index=c)
    return probs, normalize(saliency(acts[0].detach(), weights))


def upsample_saliency(sal: SaliencyMap, target: tuple[int, int]) -> np.ndarray:
    """Bilinear upsample for display; returns a float array in the map's range."""
    th, tw = int(target[0]), int(target[1])
    values = sal.values.detach().to(torch.float32)[None, None]
    out = torch.nn.functional.interpolate(
        values, size=(th, tw), mode="bilinear", align_corners=False
    )
    return out[0, 0].double().numpy()
