"""Dataset ingestion, feedback simulation, and the synthetic desk-scale set.

Real data follows the skin-lesion layout: ``images/<id>.jpg``, five
per-attribute binary masks under ``masks/``, and a ``labels.csv``. The
per-sample ground-truth explanation is the pixelwise union of the
attribute masks. Simulated feedback replays that ground truth as if a
user had corrected both the label and the mask.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataLoadError, InputError
from .explainer import ExplanationMask
from .validation import check_class_list

log = logging.getLogger(__name__)

DEFAULT_CLASSES = ("MEL", "NV", "BKL")
ATTRIBUTE_NAMES = (
    "pigment_network",
    "negative_network",
    "streaks",
    "milia_like_cyst",
    "globules",
)


@dataclass
class ImageSample:
    """An image, its class label, and an optional ground-truth explanation mask."""

    id: str
    image: np.ndarray  # H x W x C float in [0, 1]
    label: str
    gt_mask: Optional[ExplanationMask] = None
    duplicate_of: Optional[str] = None

    def __post_init__(self):
        if self.gt_mask is not None and self.gt_mask.resolution != self.image.shape[:2]:
            raise InputError(
                f"sample {self.id}: mask resolution {self.gt_mask.resolution} "
                f"!= image resolution {self.image.shape[:2]}"
            )

    @property
    def effective_id(self) -> str:
        """The original id this sample derives from (itself when not a copy)."""
        return self.duplicate_of or self.id


@dataclass
class FeedbackRecord:
    """One correction: label and/or mask, with provenance."""

    sample_id: str
    corrected_label: Optional[str] = None
    corrected_mask: Optional[ExplanationMask] = None
    source: str = "simulated"  # simulated | human
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )

    def __post_init__(self):
        if self.corrected_label is None and self.corrected_mask is None:
            raise InputError("feedback must correct the label, the mask, or both")


@dataclass
class SliceSchedule:
    """Disjoint near-equal chunks of the fine-tuning pool, by sample id."""

    slices: list[list[str]]

    def __post_init__(self):
        seen: set[str] = set()
        for ids in self.slices:
            overlap = seen.intersection(ids)
            if overlap:
                raise InputError(f"slices are not disjoint: {sorted(overlap)[:5]}")
            seen.update(ids)

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.slices]

    def __len__(self) -> int:
        return len(self.slices)


def union_masks(masks: Sequence) -> ExplanationMask:
    """Pixelwise logical OR of the attribute masks."""
    if not masks:
        raise InputError("need at least one mask")
    arrays = []
    for m in masks:
        arrays.append(m.values if isinstance(m, ExplanationMask) else np.asarray(m))
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise InputError(f"mask resolution mismatch: {a.shape} vs {shape}")
    out = np.logical_or.reduce(arrays).astype(np.uint8)
    return ExplanationMask(out, origin="ground-truth")


def balance_by_upsampling(samples: Sequence[ImageSample], seed: int = 0) -> list[ImageSample]:
    """Upsample every minority class to the majority count by random copying.

    Originals keep their order; copies are appended with ``duplicate_of``
    pointing at their source. Copies share the source's pixel arrays.
    """
    by_class: dict[str, list[ImageSample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    if not by_class:
        raise InputError("cannot balance an empty sample list")
    target = max(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    out = list(samples)
    for label in sorted(by_class):
        members = by_class[label]
        deficit = target - len(members)
        if deficit == 0:
            continue
        picks = rng.integers(0, len(members), size=deficit)
        for n, pick in enumerate(picks):
            src = members[int(pick)]
            out.append(
                ImageSample(
                    id=f"{src.id}__dup{n}",
                    image=src.image,
                    label=src.label,
                    gt_mask=src.gt_mask,
                    duplicate_of=src.effective_id,
                )
            )
    return out


def split(
    samples: Sequence[ImageSample],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[ImageSample], list[ImageSample], list[ImageSample]]:
    """Random partition into (fine-tune pool, validation, test) by id.

    Deterministic under the seed. Sizes: test and validation are rounded
    from their fractions, the pool takes the remainder.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"fractions must sum to 1, got {fractions}")
    n = len(samples)
    n_val = round(n * fractions[1])
    n_test = round(n * fractions[2])
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    test_idx = set(order[n_val : n_val + n_test].tolist())
    pool, val, test = [], [], []
    for i, s in enumerate(samples):
        (val if i in val_idx else test if i in test_idx else pool).append(s)
    for name, part in (("pool", pool), ("validation", val), ("test", test)):
        present = {s.label for s in part}
        missing = {s.label for s in samples} - present
        if missing:
            log.warning("split %s is missing classes %s", name, sorted(missing))
    return pool, val, test


def prepare_pools(
    samples: Sequence[ImageSample],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    fidelity: bool = False,
) -> tuple[list[ImageSample], list[ImageSample], list[ImageSample]]:
    """Split and balance in the leakage-safe order, or the original order.

    Default: split originals first, then upsample only the fine-tune pool, so
    no copy of one image can land on both sides of a split boundary.
    ``fidelity=True`` reproduces the upsample-then-split order instead.
    """
    if fidelity:
        balanced = balance_by_upsampling(list(samples), seed=seed)
        return split(balanced, fractions, seed=seed)
    pool, val, test = split(list(samples), fractions, seed=seed)
    return balance_by_upsampling(pool, seed=seed), val, test


def make_slices(
    pool: Sequence[ImageSample], n_slices: int = 20, seed: int = 0
) -> SliceSchedule:
    """Random disjoint near-equal slices covering the whole pool."""
    if n_slices <= 0:
        raise InputError(f"n_slices must be positive, got {n_slices}")
    if n_slices > len(pool):
        raise InputError(f"cannot cut {len(pool)} samples into {n_slices} slices")
    ids = [s.id for s in pool]
    order = np.random.default_rng(seed).permutation(len(ids))
    base, rem = divmod(len(ids), n_slices)
    slices, at = [], 0
    for k in range(n_slices):
        size = base + (1 if k < rem else 0)
        slices.append([ids[i] for i in order[at : at + size]])
        at += size
    return SliceSchedule(slices)


def simulate_feedback(sample: ImageSample) -> FeedbackRecord:
    """Ground truth replayed as a user correction.

    Carries the true label, and the union mask when the sample has one.
    """
    return FeedbackRecord(
        sample_id=sample.id,
        corrected_label=sample.label,
        corrected_mask=sample.gt_mask,
        source="simulated",
    )


def feedback_pairs(samples: Sequence[ImageSample]) -> list[tuple[ImageSample, FeedbackRecord]]:
    return [(s, simulate_feedback(s)) for s in samples]


# -- on-disk layout -----------------------------------------------------------


def _load_mask_file(path: Path) -> Optional[np.ndarray]:
    if not path.exists():
        return None
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def load_dataset(
    root,
    image_size: tuple[int, int] | None = None,
    classes: Sequence[str] | None = None,
) -> list[ImageSample]:
    """Read an image + attribute-mask dataset from its directory layout.

    Missing attribute files count as empty masks (logged); unreadable images
    skip the sample with an error log; an empty result is fatal. When
    ``image_size`` is given, images are resized bilinearly and masks with
    nearest-neighbor so they stay binary.
    """
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise DataLoadError(f"no labels.csv under {root}")
    with open(labels_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    known = set(classes) if classes else None
    samples: list[ImageSample] = []
    for row in rows:
        sample_id, label = row["id"].strip(), row["label"].strip()
        if known is not None and label not in known:
            log.error("sample %s: unknown label %r, skipped", sample_id, label)
            continue
        img_path = root / "images" / f"{sample_id}.jpg"
        if not img_path.exists():
            img_path = root / "images" / f"{sample_id}.png"
        try:
            with Image.open(img_path) as im:
                image = im.convert("RGB")
                if image_size is not None:
                    image = image.resize((image_size[1], image_size[0]), Image.BILINEAR)
                pixels = np.asarray(image, dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            log.error("sample %s: unreadable image (%s), skipped", sample_id, exc)
            continue
        masks = []
        for name in ATTRIBUTE_NAMES:
            mask = _load_mask_file(root / "masks" / f"{sample_id}_attribute_{name}.png")
            if mask is None:
                log.warning("sample %s: missing attribute mask %r, treated as empty", sample_id, name)
                continue
            if image_size is not None and mask.shape != tuple(image_size):
                resized = Image.fromarray(mask * 255).resize(
                    (image_size[1], image_size[0]), Image.NEAREST
                )
                mask = (np.asarray(resized) > 127).astype(np.uint8)
            masks.append(mask)
        if masks:
            gt = union_masks(masks)
        else:
            gt = ExplanationMask(
                np.zeros(pixels.shape[:2], dtype=np.uint8), origin="ground-truth"
            )
        samples.append(ImageSample(id=sample_id, image=pixels, label=label, gt_mask=gt))
    if not samples:
        raise DataLoadError(f"no loadable samples under {root}")
    return samples


def export_dataset(samples: Sequence[ImageSample], root) -> None:
    """Write samples back out in the standard directory layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for s in samples:
            writer.writerow([s.id, s.label])
    for s in samples:
        img = Image.fromarray((np.clip(s.image, 0.0, 1.0) * 255).round().astype(np.uint8))
        img.save(root / "images" / f"{s.id}.jpg", quality=95)
        gt = s.gt_mask.values if s.gt_mask is not None else np.zeros(s.image.shape[:2], np.uint8)
        zero = np.zeros_like(gt)
        for k, name in enumerate(ATTRIBUTE_NAMES):
            payload = gt if k == 0 else zero
            Image.fromarray(payload * 255).save(
                root / "masks" / f"{s.id}_attribute_{name}.png"
            )


# -- synthetic marker dataset --------------------------------------------------


def _marker_texture(class_index: int, size: int) -> np.ndarray:
    """Class-specific high-contrast texture patch, values in {0.05, 0.95}."""
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if class_index == 0:
        pattern = cc % 2  # vertical stripes
    elif class_index == 1:
        pattern = rr % 2  # horizontal stripes
    else:
        pattern = (rr + cc) % 2  # checkerboard
    return np.where(pattern == 0, 0.95, 0.05)


def generate_synthetic_dataset(
    n: int,
    seed: int = 0,
    classes: Sequence[str] = DEFAULT_CLASSES,
    image_size: int = 32,
) -> list[ImageSample]:
    """Desk-scale 3-class dataset where the class lives in one textured patch.

    Each 32 x 32 RGB image is uniform noise plus a square marker (side 7..12)
    whose texture identifies the class; the ground-truth mask is the marker's
    bounding region, covering 4%..15% of the pixels. Classes are exactly
    balanced when n divides evenly.
    """
    if n < 30:
        raise InputError(f"need n >= 30 synthetic samples, got {n}")
    classes = check_class_list(classes)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        class_index = i % len(classes)
        side = int(rng.integers(7, 13))
        top = int(rng.integers(0, image_size - side + 1))
        left = int(rng.integers(0, image_size - side + 1))
        image = rng.uniform(0.0, 1.0, size=(image_size, image_size, 3)).astype(np.float32)
        image[top : top + side, left : left + side, :] = _marker_texture(class_index, side)[
            :, :, None
        ]
        mask = np.zeros((image_size, image_size), dtype=np.uint8)
        mask[top : top + side, left : left + side] = 1
        samples.append(
            ImageSample(
                id=f"syn_{i:05d}",
                image=image,
                label=classes[class_index],
                gt_mask=ExplanationMask(mask, origin="ground-truth"),
            )
        )
    return samples
