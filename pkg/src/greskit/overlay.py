"""Composite images: predicted masks tinted over the input, banner on top.

The banner strip sits above the image so a rejection leaves the image
region untouched; mask tinting blends exactly the predicted pixels, each
target in its own color.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

BANNER_HEIGHT = 14
TINT_ALPHA = 0.5

# Saturated cycle: every entry has a 0 and a 255 channel so blending
# always changes a pixel of any rendered scene.
TARGET_COLORS = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 128, 255),
    (255, 0, 255),
    (255, 255, 0),
    (0, 255, 255),
)

_BANNER_OK = (28, 80, 28)
_BANNER_REJ = (120, 30, 30)


def compose_overlay(image: np.ndarray, masks: list[np.ndarray], rejected: bool) -> np.ndarray:
    """Banner + tinted image; `rejected` selects the banner color.

    Masks are tinted in order with the target color cycle; the image area
    outside every mask is returned untouched.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"overlay needs an RGB image, got shape {img.shape}")
    h, w, _ = img.shape
    body = img.astype(np.float64)
    for i, mask in enumerate(masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ValidationError(f"mask shape {mask.shape} does not match image {(h, w)}")
        color = np.array(TARGET_COLORS[i % len(TARGET_COLORS)], dtype=np.float64)
        body[mask] = (1.0 - TINT_ALPHA) * body[mask] + TINT_ALPHA * color
    canvas = np.zeros((h + BANNER_HEIGHT, w, 3), dtype=np.uint8)
    canvas[:BANNER_HEIGHT] = _BANNER_REJ if rejected else _BANNER_OK
    canvas[BANNER_HEIGHT:] = np.clip(np.rint(body), 0, 255).astype(np.uint8)
    return canvas


def changed_pixels(original: np.ndarray, overlay: np.ndarray) -> np.ndarray:
    """Bool mask of image-region pixels the overlay modified (banner excluded)."""
    body = overlay[BANNER_HEIGHT:]
    return (body != original).any(axis=2)
