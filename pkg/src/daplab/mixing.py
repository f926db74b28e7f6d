"""Label-guided image mixing: paste the pixels of a random half of the
source image's classes onto a target image, mixing the label maps the same
way, then photometrically augment the mixed image."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .classes import IGNORE_ID
from .datagen import LabeledImage
from .errors import DimensionError, InputError


@dataclass
class MixedSample:
    image: np.ndarray          # [3,H,W]
    labels: np.ndarray         # [H,W]
    mask: np.ndarray           # [H,W] uint8, 1 where the source pixel won
    chosen_classes: frozenset


def sample_class_subset(source_labels: np.ndarray, rng: np.random.Generator) -> frozenset:
    """Uniformly pick ceil(k/2) of the k distinct classes present."""
    present = np.unique(source_labels)
    present = present[present != IGNORE_ID]
    if present.size == 0:
        raise InputError("label map contains no valid class")
    take = math.ceil(present.size / 2)
    chosen = rng.choice(present, size=take, replace=False)
    return frozenset(int(c) for c in chosen)


def classmix(source: LabeledImage, target_image: np.ndarray,
             pseudo_labels: np.ndarray, subset) -> MixedSample:
    """Per-pixel mix: source wins where its label is in `subset`, the target
    (with its pseudo label) everywhere else. Ignore-labeled source pixels
    never win, so they cannot overwrite pseudo labels."""
    if source.image.shape != target_image.shape:
        raise DimensionError(f"image shapes differ: "
                             f"{source.image.shape} vs {target_image.shape}")
    if source.labels.shape != pseudo_labels.shape:
        raise DimensionError("label map shapes differ")
    if source.labels.shape != source.image.shape[1:]:
        raise DimensionError("source labels do not match image size")

    mask = np.isin(source.labels, list(subset)) & (source.labels != IGNORE_ID)
    image = np.where(mask[None], source.image, target_image)
    labels = np.where(mask, source.labels, pseudo_labels).astype(source.labels.dtype)
    return MixedSample(image, labels, mask.astype(np.uint8), frozenset(subset))


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamped (edge-replicated) borders."""
    kernel = _gaussian_kernel(sigma)
    radius = kernel.size // 2
    out = image
    for axis in (1, 2):
        padding = [(0, 0), (0, 0), (0, 0)]
        padding[axis] = (radius, radius)
        padded = np.pad(out, padding, mode="edge")
        acc = np.zeros_like(out)
        for k, weight in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + out.shape[axis])
            acc += weight * padded[tuple(sl)]
        out = acc
    return out


def augment_mixed(sample: MixedSample, rng: np.random.Generator,
                  jitter_strength: float, blur_sigma: float) -> MixedSample:
    """Brightness/contrast jitter plus Gaussian blur on the image only;
    labels and mask are untouched. The two jitter draws happen even at
    strength 0 so rng consumption does not depend on the settings."""
    if jitter_strength < 0 or blur_sigma < 0:
        raise InputError("augmentation strengths must be >= 0")
    brightness = rng.uniform(-jitter_strength, jitter_strength)
    contrast = 1.0 + rng.uniform(-jitter_strength, jitter_strength)
    image = sample.image
    if jitter_strength > 0:
        image = np.clip((image - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    if blur_sigma > 0:
        image = _blur(image, blur_sigma)
    return replace(sample, image=image)
