"""Subpixel landmark recovery from (predicted) uv-maps.

For a landmark with template coordinate ``target_uv`` the K masked pixels
whose uv values are closest to it are combined with softmin weights
``exp(-||uv_k - target_uv||)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyStructureError, ExtractionError, InsufficientSupportError
from .shapes import LandmarkSet, Template, UvMap

DEFAULT_K = 5


@dataclass(frozen=True)
class ExtractionQuery:
    target_uv: tuple[float, float]
    structure: str = ""
    k: int = DEFAULT_K

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if not np.all(np.isfinite(self.target_uv)):
            raise ValueError("target uv must be finite")


@dataclass(frozen=True)
class ExtractedLandmark:
    position: np.ndarray
    weights: np.ndarray
    candidates: np.ndarray


def softmin(d: np.ndarray) -> np.ndarray:
    e = np.exp(-(d - d.min()))
    return e / e.sum()


def extract_landmark(uvmap: UvMap, mask, query: ExtractionQuery) -> ExtractedLandmark:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != uvmap.shape:
        raise ValueError(f"mask shape {mask.shape} != uv-map shape {uvmap.shape}")
    if not mask.any():
        raise EmptyStructureError(f"empty mask for structure {query.structure!r}")
    support = mask & uvmap.valid
    flat = np.flatnonzero(support)
    if len(flat) < query.k:
        raise InsufficientSupportError(
            f"{len(flat)} usable pixels for structure {query.structure!r}, need K={query.k}")
    uv = uvmap.uv.reshape(2, -1)[:, flat]
    d = np.hypot(uv[0] - query.target_uv[0], uv[1] - query.target_uv[1])
    # stable sort: equal distances keep row-major pixel order
    pick = np.argsort(d, kind="stable")[:query.k]
    rows, cols = np.divmod(flat[pick], uvmap.shape[1])
    x0, y0 = uvmap.bbox[:2]
    cand = np.stack([cols + x0, rows + y0], axis=1).astype(np.float64)
    w = softmin(d[pick])
    return ExtractedLandmark(w @ cand, w, cand)


def extract_all(uvmaps: dict, masks: dict, template: Template, k: int = DEFAULT_K,
                image_size=None, spacing=None) -> LandmarkSet:
    """Extract every template landmark; raises ExtractionError listing all failures."""
    failures: dict = {}
    out = []
    for name in template.names:
        if name not in uvmaps or name not in masks:
            failures[name] = [(None, "missing uv-map or mask")]
            continue
        mask = np.asarray(masks[name], dtype=bool)
        if not mask.any():
            failures[name] = [(None, "empty mask")]
            continue
        pts = []
        for i, target in enumerate(template.uv[name]):
            try:
                lm = extract_landmark(uvmaps[name], mask, ExtractionQuery(tuple(target), name, k))
                pts.append(lm.position)
            except (InsufficientSupportError, EmptyStructureError) as exc:
                failures.setdefault(name, []).append((i, str(exc)))
        if name not in failures:
            out.append((name, np.array(pts)))
    if failures:
        raise ExtractionError(failures)
    tl = template.landmarks
    return LandmarkSet(tuple(out), image_size or tl.image_size,
                       tl.spacing if spacing is None else spacing)
