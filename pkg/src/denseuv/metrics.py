"""Evaluation metrics: DSC, ASD (landmark and contour based), TRE, plus
polygon rasterization of landmarks and farthest point subsampling."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import SchemaError
from .shapes import LandmarkSet


def dsc(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class TreResult:
    per_landmark: dict
    mean: float
    std: float


def tre(pred: LandmarkSet, gt: LandmarkSet, spacing: float | None = None) -> TreResult:
    """Euclidean distance between corresponding landmarks, times ``spacing``."""
    if pred.schema() != gt.schema():
        raise SchemaError(f"schema mismatch: {pred.schema()} vs {gt.schema()}")
    sp = gt.spacing if spacing is None else spacing
    per = {name: np.linalg.norm(p - gt[name], axis=1) * sp for name, p in pred.structures}
    allv = np.concatenate(list(per.values()))
    return TreResult(per, float(allv.mean()), float(allv.std()))


def asd_points(a, b, spacing: float = 1.0) -> float:
    """Symmetric average of the two directed mean nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("ASD needs two non-empty point sets")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return float((dab.mean() + dba.mean()) / 2.0 * spacing)


def boundary_pixels(mask) -> np.ndarray:
    """(x, y) of foreground pixels with a background 4-neighbour (image border counts as background)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    ys, xs = np.nonzero(m & ~interior)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def asd_contour(mask_a, mask_b, spacing: float = 1.0) -> float:
    if not np.any(mask_a) or not np.any(mask_b):
        raise ValueError("contour ASD needs two non-empty masks")
    return asd_points(boundary_pixels(mask_a), boundary_pixels(mask_b), spacing)


def polygon_area(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def landmarks_to_mask(points, size, tol: float = 1e-9) -> np.ndarray:
    """Rasterize the closed polygon through ``points`` (stored order) at pixel centres.

    Even-odd scanline fill; centres lying on an edge are included.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError("a polygon needs at least 3 points")
    h, w = size
    mask = np.zeros((h, w), dtype=bool)
    scale = max(float(np.abs(pts).max()), 1.0)
    if abs(polygon_area(pts)) <= 1e-12 * scale * scale:
        warnings.warn("degenerate (zero-area) polygon; returning an empty mask", stacklevel=2)
        return mask
    a = pts
    b = np.roll(pts, -1, axis=0)
    rows = np.arange(h, dtype=np.float64)
    crossings = [[] for _ in range(h)]
    for (x1, y1), (x2, y2) in zip(a, b):
        if y1 == y2:
            continue
        lo, hi = min(y1, y2), max(y1, y2)
        r0, r1 = max(math.ceil(lo), 0), min(math.ceil(hi) - 1, h - 1)
        for r in range(r0, r1 + 1):
            if lo <= rows[r] < hi:
                crossings[r].append(x1 + (rows[r] - y1) * (x2 - x1) / (y2 - y1))
    for r, xs in enumerate(crossings):
        xs.sort()
        for xl, xr in zip(xs[0::2], xs[1::2]):
            c0 = max(math.ceil(xl - tol), 0)
            c1 = min(math.floor(xr + tol), w - 1)
            if c1 >= c0:
                mask[r, c0:c1 + 1] = True
    # closed polygon: pixel centres exactly on an edge are inside
    for (x1, y1), (x2, y2) in zip(a, b):
        if abs(y2 - y1) < tol:
            ry = round(y1)
            if abs(y1 - ry) < tol and 0 <= ry < h:
                c0 = max(math.ceil(min(x1, x2) - tol), 0)
                c1 = min(math.floor(max(x1, x2) + tol), w - 1)
                if c1 >= c0:
                    mask[ry, c0:c1 + 1] = True
            continue
        for r in range(max(math.ceil(min(y1, y2) - tol), 0), min(math.floor(max(y1, y2) + tol), h - 1) + 1):
            x = x1 + (r - y1) * (x2 - x1) / (y2 - y1)
            c = round(x)
            if abs(x - c) < tol and 0 <= c < w:
                mask[r, c] = True
    return mask


def fps_count(fraction: float, n: int) -> int:
    """round-half-up(fraction * n), at least 1."""
    return max(1, int(math.floor(fraction * n + 0.5)))


def farthest_point_sampling(points, k: int) -> np.ndarray:
    """Greedy max-min subset of size ``k`` seeded with index 0; ties go to the lowest index."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"requested {k} points out of {n}")
    chosen = [0]
    d = np.linalg.norm(pts - pts[0], axis=1)
    d[0] = -np.inf
    while len(chosen) < k:
        i = int(np.argmax(d))
        chosen.append(i)
        d = np.minimum(d, np.linalg.norm(pts - pts[i], axis=1))
        d[chosen] = -np.inf
    return np.array(chosen, dtype=int)


def fps_subsample(landmarks: LandmarkSet, fraction: float = 0.25):
    """Per-structure FPS keeping ``fps_count(fraction, n)`` points of each structure.

    Returns ``(subset LandmarkSet, {name: indices})``.
    """
    idx = {}
    structs = []
    for name, pts in landmarks.structures:
        sel = farthest_point_sampling(pts, fps_count(fraction, len(pts)))
        idx[name] = sel
        structs.append((name, pts[sel]))
    return LandmarkSet(tuple(structs), landmarks.image_size, landmarks.spacing), idx


@dataclass(frozen=True)
class EvalResult:
    """Per-structure scores for one image; distances in ``unit``."""

    structure: str
    dsc: float
    asd: float
    tre: float
    unit: str = "px"


def evaluate_instance(pred: LandmarkSet, gt: LandmarkSet, gt_masks: dict, pred_masks: dict | None = None,
                      unit: str = "px", asd_mode: str = "landmarks") -> list[EvalResult]:
    """Score one prediction against ground truth.

    DSC uses ``pred_masks`` when given, otherwise the rasterized predicted
    landmark polygon. ASD is landmark based, or contour based with
    ``asd_mode="contour"``.
    """
    if unit not in ("px", "mm"):
        raise ValueError("unit must be 'px' or 'mm'")
    spacing = gt.spacing if unit == "mm" else 1.0
    t = tre(pred, gt, spacing)
    rows = []
    for name, p in pred.structures:
        gm = np.asarray(gt_masks[name], dtype=bool)
        if pred_masks is not None and name in pred_masks:
            pm = np.asarray(pred_masks[name], dtype=bool)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pm = landmarks_to_mask(p, gm.shape)
        if asd_mode == "contour":
            a = asd_contour(pm, gm, spacing) if pm.any() else float("nan")
        else:
            a = asd_points(p, gt[name], spacing)
        rows.append(EvalResult(name, dsc(pm, gm), a, float(t.per_landmark[name].mean()), unit))
    return rows
