"""Random similarity augmentation of (image, masks, landmarks)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .shapes import LandmarkSet, SimilarityTransform


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 10.0
    translation: float = 0.1
    scale_range: tuple[float, float] = (0.85, 1.15)


def sample_transform(rng: np.random.Generator, image_size, cfg: AugmentConfig = AugmentConfig()) -> SimilarityTransform:
    """Rotation and scale about the image centre followed by a shift.

    Rotation magnitude ~ U(0, rotation_deg) and per-axis shift magnitude
    ~ U(0, translation) * side, each with a random sign.
    """
    h, w = image_size
    angle = np.deg2rad(rng.uniform(0.0, cfg.rotation_deg)) * rng.choice((-1.0, 1.0))
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(0.0, cfg.translation, size=2) * np.array([w, h]) * rng.choice((-1.0, 1.0), size=2)
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rot = SimilarityTransform.from_params(angle, scale, (0.0, 0.0))
    return SimilarityTransform.from_params(angle, scale, c - rot.apply(c[None])[0] + shift)


def warp_image(image: np.ndarray, tf: SimilarityTransform, order: int = 1, mode: str = "nearest") -> np.ndarray:
    """Resample ``image`` so that content at p moves to tf(p)."""
    h, w = image.shape
    inv = tf.inverse()
    ys, xs = np.mgrid[0:h, 0:w]
    src = inv.apply(np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64))
    out = map_coordinates(np.asarray(image, dtype=np.float64), [src[:, 1], src[:, 0]],
                          order=order, mode=mode)
    return out.reshape(h, w)


def augment(image: np.ndarray, masks: dict, landmarks: LandmarkSet, tf: SimilarityTransform):
    """Apply ``tf`` to all three; masks are resampled bilinearly and thresholded at 0.5.

    Landmarks may leave the image, so the returned set skips bounds checks.
    """
    img = warp_image(image, tf)
    out_masks = {k: warp_image(m.astype(np.float64), tf, mode="constant") >= 0.5 for k, m in masks.items()}
    structs = tuple((name, tf.apply(pts)) for name, pts in landmarks.structures)
    lms = LandmarkSet(structs, landmarks.image_size, landmarks.spacing, check_bounds=False)
    return img, out_masks, lms
