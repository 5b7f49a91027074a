"""Frozen brute-force reference implementations for the test suite.

Everything here is deliberately naive: plain loops, sets, and math.log,
with no shared code from the package under test. These were written once
against the definitions and are not to be "improved" — their value is
that a regression in the package cannot hide inside a clever shared
helper.
"""

import math

import numpy as np


def jaccard_oracle(a, b) -> float:
    """|A n B| / |A u B| via coordinate sets; two empty masks -> 1.0."""
    a = np.asarray(a)
    b = np.asarray(b)
    set_a = {(r, c) for r in range(a.shape[0]) for c in range(a.shape[1]) if a[r, c]}
    set_b = {(r, c) for r in range(b.shape[0]) for c in range(b.shape[1]) if b[r, c]}
    union = set_a | set_b
    if not union:
        return 1.0
    return len(set_a & set_b) / len(union)


def union_oracle(masks) -> np.ndarray:
    """Pixelwise logical OR computed cell by cell."""
    arrays = [np.asarray(m) for m in masks]
    h, w = arrays[0].shape
    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            out[r, c] = 1 if any(arr[r, c] for arr in arrays) else 0
    return out


def majority_downsample_oracle(mask, target) -> np.ndarray:
    """Block-majority resample with floor boundaries; ties round to 1.

    Each target cell (r, c) covers source rows [r*H//th, (r+1)*H//th) and
    the analogous columns, widened to at least one source pixel, so the
    same formula also covers nearest-pixel upsampling.
    """
    src = np.asarray(mask)
    h, w = src.shape
    th, tw = int(target[0]), int(target[1])
    out = np.zeros((th, tw), dtype=np.uint8)
    for r in range(th):
        r0 = (r * h) // th
        r1 = max(((r + 1) * h) // th, r0 + 1)
        for c in range(tw):
            c0 = (c * w) // tw
            c1 = max(((c + 1) * w) // tw, c0 + 1)
            ones = 0
            total = 0
            for i in range(r0, r1):
                for j in range(c0, c1):
                    ones += 1 if src[i, j] else 0
                    total += 1
            out[r, c] = 1 if 2 * ones >= total else 0
    return out


def cross_entropy_oracle(probs, label_index) -> float:
    """-sum(y * log(clamp(p))) with the same fixed clamp as the package."""
    total = 0.0
    for k, p in enumerate(probs):
        y = 1.0 if k == int(label_index) else 0.0
        clamped = min(max(float(p), 1e-12), 1.0)
        total -= y * math.log(clamped)
    return total


def confusion_oracle(true_labels, pred_labels, classes):
    """(accuracy, {class: sensitivity}) from paired label lists via counting.

    Classes with no actual samples are left out of the sensitivity dict.
    """
    assert len(true_labels) == len(pred_labels)
    correct = 0
    for t, p in zip(true_labels, pred_labels):
        if t == p:
            correct += 1
    accuracy = correct / len(true_labels)
    sensitivity = {}
    for name in classes:
        actual = [p for t, p in zip(true_labels, pred_labels) if t == name]
        if actual:
            sensitivity[name] = sum(1 for p in actual if p == name) / len(actual)
    return accuracy, sensitivity


def population_sd_oracle(values) -> float:
    """sqrt(mean squared deviation), dividing by n (not n - 1)."""
    values = [float(v) for v in values]
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def soft_jaccard_oracle(pred, truth, smoothing=1e-6) -> float:
    """(sum min + eps) / (sum max + eps) accumulated pixel by pixel."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    inter = 0.0
    union = 0.0
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            inter += min(pred[r, c], truth[r, c])
            union += max(pred[r, c], truth[r, c])
    return (inter + smoothing) / (union + smoothing)


def gradcam_oracle(activations, gradient) -> np.ndarray:
    """relu(sum_k mean(grad_k) * act_k) accumulated with python loops."""
    acts = np.asarray(activations, dtype=np.float64)
    grad = np.asarray(gradient, dtype=np.float64)
    k, h, w = acts.shape
    weights = []
    for ch in range(k):
        total = 0.0
        for r in range(h):
            for c in range(w):
                total += grad[ch, r, c]
        weights.append(total / (h * w))
    out = np.zeros((h, w), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            v = 0.0
            for ch in range(k):
                v += weights[ch] * acts[ch, r, c]
            out[r, c] = v if v > 0 else 0.0
    return out


def classify_marker_oracle(image) -> int:
    """Structural rule for the synthetic marker images, no learning involved.

    Marker pixels are the only ones where all three channels agree exactly
    (the patch is grayscale; the background is independent channel noise).
    Inside the marker, stripe direction shows up as which neighbor pairs
    are equal: vertical stripes repeat down columns, horizontal stripes
    along rows, a checkerboard along neither.
    """
    img = np.asarray(image)
    marker = (img[:, :, 0] == img[:, :, 1]) & (img[:, :, 1] == img[:, :, 2])
    rows = [r for r in range(img.shape[0]) if marker[r].any()]
    cols = [c for c in range(img.shape[1]) if marker[:, c].any()]
    r0, r1, c0, c1 = min(rows), max(rows), min(cols), max(cols)
    gray = img[:, :, 0]
    h_pairs = h_equal = 0
    for r in range(r0, r1 + 1):
        for c in range(c0, c1):
            h_pairs += 1
            if gray[r, c] == gray[r, c + 1]:
                h_equal += 1
    v_pairs = v_equal = 0
    for r in range(r0, r1):
        for c in range(c0, c1 + 1):
            v_pairs += 1
            if gray[r, c] == gray[r + 1, c]:
                v_equal += 1
    h_frac = h_equal / h_pairs
    v_frac = v_equal / v_pairs
    if v_frac > 0.5 and h_frac < 0.5:
        return 0  # vertical stripes
    if h_frac > 0.5 and v_frac < 0.5:
        return 1  # horizontal stripes
    return 2  # checkerboard


def random_binary_mask(rng, shape, density=None) -> np.ndarray:
    """Helper for oracle comparisons: a random 0/1 mask of the given shape."""
    p = rng.uniform(0.1, 0.9) if density is None else density
    return (rng.random(shape) < p).astype(np.uint8)
