"""Training objectives with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
prediction it differentiates. uv arrays are laid out as (..., 2, H, W)
with a matching validity mask (..., H, W).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySupportError
from .shapes import UvMap

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_bce: float = 0.13
    lambda_uv: float = 0.66
    lambda_tv: float = 0.2

    def __post_init__(self):
        for name in ("lambda_bce", "lambda_uv", "lambda_tv"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} must lie in [0, 1]")


@dataclass(frozen=True)
class HeatmapParams:
    alpha: float = 44.0
    sigma: float = 8.0

    def __post_init__(self):
        if not self.alpha >= 1:
            raise ValueError(f"alpha={self.alpha} must be >= 1")
        if not self.sigma > 0:
            raise ValueError(f"sigma={self.sigma} must be > 0")

    def scaled(self, image_size: int, reference_size: int = 256) -> "HeatmapParams":
        """Same kernel at another resolution: sigma scales with the image side."""
        return HeatmapParams(self.alpha, self.sigma * image_size / reference_size)


def _uv_parts(x, valid=None):
    if isinstance(x, UvMap):
        return np.nan_to_num(x.uv), x.valid if valid is None else valid
    return np.asarray(x, dtype=np.float64), valid


def pos_weights_from_masks(masks) -> np.ndarray:
    """Per-class (#negative / #positive) over a stack of masks shaped (N, C, H, W)."""
    m = np.asarray(masks, dtype=bool)
    pos = m.sum(axis=(0, 2, 3)).astype(np.float64)
    neg = m.shape[0] * m.shape[2] * m.shape[3] - pos
    return neg / np.maximum(pos, 1.0)


def weighted_bce(pred_prob, target, pos_weight=1.0):
    """Class-weighted binary cross entropy, averaged over pixels and classes.

    ``pos_weight`` is a scalar or one weight per class along axis -3.
    Probabilities are clamped to [EPS, 1 - EPS].
    """
    p = np.asarray(pred_prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and target {t.shape} differ in shape")
    w = np.asarray(pos_weight, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None, None]
    p = np.clip(p, EPS, 1.0 - EPS)
    n = p.size
    loss = -(w * t * np.log(p) + (1.0 - t) * np.log1p(-p))
    grad = -(w * t / p - (1.0 - t) / (1.0 - p)) / n
    return float(loss.sum() / n), grad


def uv_l1(pred_uv, gt_uv, valid=None):
    """Mean |pred - gt| over valid pixels and both channels."""
    pred, _ = _uv_parts(pred_uv)
    gt, valid = _uv_parts(gt_uv, valid)
    if valid is None:
        valid = np.all(np.isfinite(gt), axis=-3)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or valid.shape != pred.shape[:-3] + pred.shape[-2:]:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    n = 2 * int(valid.sum())
    if n == 0:
        raise EmptySupportError("no valid pixels for the uv loss")
    m = np.expand_dims(valid, -3)
    diff = np.where(m, pred - np.where(m, gt, 0.0), 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def _bilinear_weights(x, y, h, w):
    i0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    j0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    tx, ty = x - i0, y - j0
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    idx = [(j0, i0), (j0, i1), (j1, i0), (j1, i1)]
    wts = [(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx]
    return idx, wts


def _lm_single(pred, landmarks, template_uv, offset=(0, 0)):
    # pred (S, 2, H, W); returns loss, grad, n_excluded
    s_count, _, h, w = pred.shape
    grad = np.zeros_like(pred)
    per_struct, excluded = [], 0
    pending = []
    for s in range(s_count):
        pts = np.asarray(landmarks[s], dtype=np.float64).reshape(-1, 2)
        tpl = np.asarray(template_uv[s], dtype=np.float64).reshape(-1, 2)
        x = pts[:, 0] - offset[0]
        y = pts[:, 1] - offset[1]
        ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        excluded += int((~ok).sum())
        if not ok.any():
            continue
        x, y, tpl = x[ok], y[ok], tpl[ok]
        idx, wts = _bilinear_weights(x, y, h, w)
        sample = sum(wt * pred[s][:, j, i] for (j, i), wt in zip(idx, wts))  # (2, n)
        diff = sample - tpl.T
        per_struct.append(np.abs(diff).mean())
        pending.append((s, idx, wts, np.sign(diff) / diff.size))
    if not per_struct:
        return 0.0, grad, excluded
    k = len(per_struct)
    for s, idx, wts, g in pending:
        for (j, i), wt in zip(idx, wts):
            for c in range(2):
                np.add.at(grad[s, c], (j, i), wt * g[c] / k)
    return float(np.mean(per_struct)), grad, excluded


def landmark_sample_loss(pred_uv, landmarks, template_uv):
    """L1 between pred uv sampled (bilinearly) at landmarks and their template uv.

    Averaged per structure, then across structures (and across the batch for
    batched input). Accepts ``pred_uv`` as (S, 2, H, W) with ``landmarks`` a
    list of S point arrays, as (N, S, 2, H, W) with a list of N such lists,
    or as a single :class:`UvMap` with one point array. Landmarks outside
    the grid are excluded; returns ``(value, grad, n_excluded)``.
    """
    if isinstance(pred_uv, UvMap):
        pred = np.nan_to_num(pred_uv.uv)[None]
        val, g, ex = _lm_single(pred, [landmarks], [template_uv], pred_uv.bbox[:2])
        return val, g[0], ex
    pred = np.asarray(pred_uv, dtype=np.float64)
    if pred.ndim == 4:
        return _lm_single(pred, landmarks, template_uv)
    if pred.ndim != 5:
        raise ValueError(f"expected (S,2,H,W) or (N,S,2,H,W) prediction, got {pred.shape}")
    n = pred.shape[0]
    total, excluded = 0.0, 0
    grad = np.empty_like(pred)
    for b in range(n):
        v, g, ex = _lm_single(pred[b], landmarks[b], template_uv)
        total += v
        grad[b] = g / n
        excluded += ex
    return total / n, grad, excluded


def total_variation(pred_uv, valid=None):
    """Mean absolute forward difference over both axes and channels.

    Only pairs whose two endpoints are valid contribute; all such
    (pair, channel) terms are pooled into one mean.
    """
    x, valid = _uv_parts(pred_uv, valid)
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError("total variation needs at least a 2x2 grid")
    if valid is None:
        valid = np.ones(x.shape[:-3] + x.shape[-2:], dtype=bool)
    valid = np.expand_dims(np.asarray(valid, dtype=bool), -3)
    dh = x[..., :, 1:] - x[..., :, :-1]
    dv = x[..., 1:, :] - x[..., :-1, :]
    mh = np.broadcast_to(valid[..., :, 1:] & valid[..., :, :-1], dh.shape)
    mv = np.broadcast_to(valid[..., 1:, :] & valid[..., :-1, :], dv.shape)
    n = int(mh.sum() + mv.sum())
    grad = np.zeros_like(x)
    if n == 0:
        return 0.0, grad
    sh = np.where(mh, np.sign(dh), 0.0) / n
    sv = np.where(mv, np.sign(dv), 0.0) / n
    grad[..., :, 1:] += sh
    grad[..., :, :-1] -= sh
    grad[..., 1:, :] += sv
    grad[..., :-1, :] -= sv
    value = (np.abs(dh)[mh].sum() + np.abs(dv)[mv].sum()) / n
    return float(value), grad


@dataclass
class Targets:
    """Supervision for one batch."""

    masks: np.ndarray          # (N, S, H, W) bool
    gt_uv: np.ndarray          # (N, S, 2, H, W)
    gt_valid: np.ndarray       # (N, S, H, W) bool, ground-truth uv support
    landmarks: list            # N lists of S (n_s, 2) arrays
    template_uv: list          # S (n_s, 2) arrays
    pos_weight: np.ndarray = field(default_factory=lambda: np.ones(1))


@dataclass
class LossReport:
    total: float
    bce: float
    uv: float
    lm: float
    tv: float
    grad_seg: np.ndarray
    grad_uv: np.ndarray
    n_excluded: int = 0

    def terms(self) -> dict:
        return {"bce": self.bce, "uv": self.uv, "lm": self.lm, "tv": self.tv, "total": self.total}


def weighted_total(bce: float, uv: float, lm: float, tv: float, weights: LossWeights = LossWeights()) -> float:
    """bce*L_bce + (uv/2)*(L_uv + L_lm) + tv*L_tv."""
    return weights.lambda_bce * bce + weights.lambda_uv / 2.0 * (uv + lm) + weights.lambda_tv * tv


def combined_loss(seg_probs, uv_pred, targets: Targets, weights: LossWeights = LossWeights(),
                  dense: bool = True) -> LossReport:
    """Weighted sum: bce*L_bce + (uv/2)*(L_uv + L_lm) + tv*L_tv.

    ``dense=False`` drops the dense uv term (sparse, landmark-only
    supervision). uv terms are restricted to ground-truth support.
    """
    bce, g_seg = weighted_bce(seg_probs, targets.masks, targets.pos_weight)
    half = weights.lambda_uv / 2.0
    if dense:
        l_uv, g_uv = uv_l1(uv_pred, targets.gt_uv, targets.gt_valid)
    else:
        l_uv, g_uv = 0.0, np.zeros_like(uv_pred)
    lm, g_lm, excluded = landmark_sample_loss(uv_pred, targets.landmarks, targets.template_uv)
    tv, g_tv = total_variation(uv_pred, targets.masks)
    total = weighted_total(bce, l_uv, lm, tv, weights)
    grad_uv = half * (g_uv + g_lm) + weights.lambda_tv * g_tv
    return LossReport(total, bce, l_uv, lm, tv, weights.lambda_bce * g_seg, grad_uv, excluded)


def heatmap_target(landmark, size, params: HeatmapParams = HeatmapParams()) -> np.ndarray:
    """Gaussian peak of height alpha at ``landmark`` = (x, y) on an (H, W) grid."""
    h, w = size
    x, y = landmark
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    return params.alpha * np.exp(-((y - rows) ** 2 + (x - cols) ** 2) / (2.0 * params.sigma ** 2))


def heatmap_mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    d = pred - target
    return float((d ** 2).mean()), 2.0 * d / d.size


def heatmap_extract(pred) -> tuple[float, float]:
    """Decode one heatmap to (x, y).

    Argmax (first in row-major order), refined per axis by the centroid of
    the 3x3 neighbourhood's row/column sums after subtracting their minimum.
    A flat neighbourhood leaves the argmax pixel unchanged.
    """
    g = np.asarray(pred, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty heatmap")
    r, c = np.unravel_index(int(np.argmax(g)), g.shape)
    r0, r1 = max(r - 1, 0), min(r + 2, g.shape[0])
    c0, c1 = max(c - 1, 0), min(c + 2, g.shape[1])
    patch = g[r0:r1, c0:c1]
    out = []
    for marginal, start, centre in ((patch.sum(axis=0), c0, c), (patch.sum(axis=1), r0, r)):
        wts = marginal - marginal.min()
        s = wts.sum()
        out.append(float(centre) if not s > 0 else float((wts * np.arange(start, start + len(wts))).sum() / s))
    return out[0], out[1]
