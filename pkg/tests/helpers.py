import numpy as np


def rel_err(a, n, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x, h=1e-5, idx=None):
    """Central differences of scalar f at x (modified in place and restored)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def away_from_kinks(x, rng, margin=1e-3):
    """Nudge entries so |x| terms stay differentiable under a +-1e-5 step."""
    x = np.array(x, dtype=np.float64)
    small = np.abs(x) < margin
    x[small] = margin * np.sign(rng.standard_normal(small.sum())) * 2
    return x


def point_in_polygon(px, py, poly, tol=1e-9):
    """Even-odd ray casting; points on an edge count as inside."""
    n = len(poly)
    inside = False
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        if abs(cross) <= tol and min(x1, x2) - tol <= px <= max(x1, x2) + tol \
                and min(y1, y2) - tol <= py <= max(y1, y2) + tol:
            return True
        if (y1 <= py < y2) or (y2 <= py < y1):
            xc = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < xc:
                inside = not inside
    return inside


def brute_asd(a, b):
    da = [min(np.hypot(p[0] - q[0], p[1] - q[1]) for q in b) for p in a]
    db = [min(np.hypot(p[0] - q[0], p[1] - q[1]) for q in a) for p in b]
    return (sum(da) / len(da) + sum(db) / len(db)) / 2.0


def brute_boundary(mask):
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    pts.append((x, y))
                    break
    return pts
