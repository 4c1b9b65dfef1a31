"""SVG overlays: image + ground-truth and predicted contours with landmark dots."""
from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

from .metrics import boundary_pixels
from .shapes import LandmarkSet

GT_COLOR = "#2ca02c"
PRED_COLOR = "#d62728"


def _png_data_uri(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def _polygon(points, color, scale, dashed=False) -> str:
    pts = " ".join(f"{(x + 0.5) * scale:.2f},{(y + 0.5) * scale:.2f}" for x, y in points)
    dash = ' stroke-dasharray="4,3"' if dashed else ""
    return f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>'


def _dots(points, color, scale, r=2.5) -> str:
    return "".join(f'<circle cx="{(x + 0.5) * scale:.2f}" cy="{(y + 0.5) * scale:.2f}" r="{r}" fill="{color}"/>'
                   for x, y in points)


def overlay_svg(image: np.ndarray, gt: LandmarkSet, pred: LandmarkSet, pred_masks: dict | None = None,
                title: str = "", scale: int = 4) -> str:
    h, w = image.shape
    W, H = w * scale, h * scale
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H + 20}" '
             f'viewBox="0 0 {W} {H + 20}">',
             f'<image href="{_png_data_uri(image)}" x="0" y="0" width="{W}" height="{H}" '
             f'style="image-rendering:pixelated"/>']
    for name, pts in gt.structures:
        parts.append(_polygon(pts, GT_COLOR, scale))
        parts.append(_dots(pts, GT_COLOR, scale))
    for name, pts in pred.structures:
        parts.append(_polygon(pts, PRED_COLOR, scale, dashed=True))
        parts.append(_dots(pts, PRED_COLOR, scale))
        if pred_masks and name in pred_masks:
            for x, y in boundary_pixels(pred_masks[name]):
                parts.append(f'<rect x="{x * scale}" y="{y * scale}" width="{scale}" height="{scale}" '
                             f'fill="{PRED_COLOR}" fill-opacity="0.25"/>')
    parts.append(f'<text x="4" y="{H + 15}" font-family="sans-serif" font-size="12">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
