"""Landmark sets, templates and ground-truth uv-map generation.

A uv-map assigns every pixel of a structure's region a normalized template
coordinate (u, v) in [-1, 1]^2. Ground truth is generated per structure by
aligning the instance landmarks to the mean-shape template with a similarity
transform, interpolating the residual landmark displacements piecewise
linearly over a Delaunay triangulation, and sampling the template's identity
uv-map at the displaced positions.

Coordinates are (x, y) in pixels, with pixel (row=h, col=w) centred at
x = w, y = h. Bounding boxes are inclusive integer pixel boxes
``(x0, y0, x1, y1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .errors import DegeneracyError, SchemaError

BBox = tuple[int, int, int, int]

_EDGE_TOL = 1e-9


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered 2D landmarks grouped by anatomical structure."""

    structures: tuple[tuple[str, np.ndarray], ...]
    image_size: tuple[int, int]
    spacing: float = 1.0
    check_bounds: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        structs = []
        seen = set()
        for name, pts in self.structures:
            if name in seen:
                raise SchemaError(f"duplicate structure name {name!r}")
            seen.add(name)
            pts = _readonly(pts).reshape(-1, 2)
            structs.append((str(name), pts))
        object.__setattr__(self, "structures", tuple(structs))
        h, w = (int(v) for v in self.image_size)
        object.__setattr__(self, "image_size", (h, w))
        object.__setattr__(self, "spacing", float(self.spacing))
        if self.check_bounds:
            for name, pts in structs:
                bad = (pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h)
                if np.any(bad) or not np.all(np.isfinite(pts)):
                    raise ValueError(f"structure {name!r} has points outside the {h}x{w} image")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.structures]

    def __getitem__(self, name: str) -> np.ndarray:
        for n, pts in self.structures:
            if n == name:
                return pts
        raise KeyError(name)

    def schema(self) -> tuple[tuple[str, int], ...]:
        return tuple((n, len(p)) for n, p in self.structures)

    def all_points(self) -> np.ndarray:
        return np.concatenate([p for _, p in self.structures], axis=0)

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "spacing": self.spacing,
            "structures": [{"name": n, "points": p.tolist()} for n, p in self.structures],
        }

    @classmethod
    def from_dict(cls, d: dict, check_bounds: bool = True) -> "LandmarkSet":
        return cls(
            structures=tuple((s["name"], np.asarray(s["points"], dtype=np.float64)) for s in d["structures"]),
            image_size=tuple(d["image_size"]),
            spacing=d.get("spacing", 1.0),
            check_bounds=check_bounds,
        )

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return (self.image_size == other.image_size and self.spacing == other.spacing
                and self.schema() == other.schema()
                and all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.structures, other.structures)))

    __hash__ = None


def bbox_of(points: np.ndarray, image_size: tuple[int, int] | None = None) -> BBox:
    """Smallest inclusive integer pixel box containing ``points`` (optionally clipped)."""
    pts = np.asarray(points, dtype=np.float64)
    x0, y0 = np.floor(pts.min(axis=0)).astype(int)
    x1, y1 = np.ceil(pts.max(axis=0)).astype(int)
    if image_size is not None:
        h, w = image_size
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
    return int(x0), int(y0), int(x1), int(y1)


def bbox_shape(bbox: BBox) -> tuple[int, int]:
    x0, y0, x1, y1 = bbox
    return y1 - y0 + 1, x1 - x0 + 1


def points_to_uv(points: np.ndarray, bbox: BBox) -> np.ndarray:
    """Normalized position of ``points`` inside ``bbox``: edges map to -1 and +1."""
    x0, y0, x1, y1 = bbox
    pts = np.asarray(points, dtype=np.float64)
    u = -1.0 + 2.0 * (pts[:, 0] - x0) / (x1 - x0)
    v = -1.0 + 2.0 * (pts[:, 1] - y0) / (y1 - y0)
    return np.stack([u, v], axis=1)


@dataclass(frozen=True)
class Template:
    """Mean shape plus per-structure bounding boxes and landmark uv values."""

    landmarks: LandmarkSet
    bboxes: dict
    uv: dict

    @classmethod
    def from_landmarks(cls, landmarks: LandmarkSet) -> "Template":
        bboxes, uv = {}, {}
        for name, pts in landmarks.structures:
            bb = bbox_of(pts)
            h, w = bbox_shape(bb)
            if h < 2 or w < 2:
                raise DegeneracyError(f"structure {name!r} has a degenerate bounding box {bb}")
            bboxes[name] = bb
            uv[name] = _readonly(points_to_uv(pts, bb))
        return cls(landmarks, bboxes, uv)

    @property
    def names(self) -> list[str]:
        return self.landmarks.names

    def to_dict(self) -> dict:
        d = self.landmarks.to_dict()
        for s in d["structures"]:
            s["bbox"] = list(self.bboxes[s["name"]])
            s["uv"] = self.uv[s["name"]].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Template":
        return cls.from_landmarks(LandmarkSet.from_dict(d))


def compute_mean_shape(sets) -> Template:
    """Coordinate-wise mean of landmark sets sharing one schema."""
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one landmark set")
    schema = sets[0].schema()
    for s in sets[1:]:
        if s.schema() != schema:
            raise SchemaError(f"schema mismatch: {s.schema()} != {schema}")
    mean = []
    for i, (name, _) in enumerate(schema):
        stack = np.stack([s.structures[i][1] for s in sets])
        mean.append((name, stack.mean(axis=0)))
    first = sets[0]
    return Template.from_landmarks(LandmarkSet(tuple(mean), first.image_size, first.spacing))


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(self.rotation))
        object.__setattr__(self, "translation", _readonly(self.translation))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(2), 1.0, np.zeros(2))

    @classmethod
    def from_params(cls, angle: float, scale: float, translation) -> "SimilarityTransform":
        c, s = math.cos(angle), math.sin(angle)
        return cls(np.array([[c, -s], [s, c]]), scale, np.asarray(translation, dtype=np.float64))

    @property
    def angle(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.scale * self.rotation
        m[:2, 2] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(rt, 1.0 / self.scale, -(rt @ self.translation) / self.scale)


def umeyama_align(src, dst):
    """Least-squares similarity transform (rotation, uniform scale, translation) mapping src onto dst.

    Returns ``(transform, aligned, residual)`` where ``aligned`` is the
    transform applied to ``src`` and ``residual`` is the RMS point error.
    Reflections are excluded.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"point arrays must both be (n, 2), got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 2:
        raise ValueError("need at least two point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = (sc ** 2).sum() / n
    extent = max(np.abs(src).max(), 1.0)
    if var_s <= (1e-12 * extent) ** 2:
        raise DegeneracyError("source points are all coincident")
    cov = dc.T @ sc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(2)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[1] = -1.0
    R = U @ np.diag(S) @ Vt
    scale = (D * S).sum() / var_s
    if not scale > 0:
        raise DegeneracyError("destination points are all coincident")
    t = mu_d - scale * (R @ mu_s)
    tf = SimilarityTransform(R, scale, t)
    aligned = tf.apply(src)
    residual = float(np.sqrt(((aligned - dst) ** 2).sum(axis=1).mean()))
    return tf, aligned, residual


@dataclass(frozen=True)
class UvMap:
    """Two-channel (u, v) field over ``bbox`` with a validity mask.

    Invalid pixels hold NaN in both channels.
    """

    uv: np.ndarray
    valid: np.ndarray
    bbox: BBox

    def __post_init__(self):
        uv = np.array(self.uv, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        h, w = bbox_shape(self.bbox)
        if uv.shape != (2, h, w) or valid.shape != (h, w):
            raise ValueError(f"uv {uv.shape} / valid {valid.shape} do not match bbox {self.bbox}")
        uv[:, ~valid] = np.nan
        uv.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def to_full(self, image_size: tuple[int, int]):
        """Paste into a full image grid; returns ``(uv (2,H,W), valid (H,W))``."""
        H, W = image_size
        uv = np.full((2, H, W), np.nan)
        valid = np.zeros((H, W), dtype=bool)
        x0, y0, x1, y1 = self.bbox
        sx0, sy0 = max(x0, 0), max(y0, 0)
        sx1, sy1 = min(x1, W - 1), min(y1, H - 1)
        if sx1 >= sx0 and sy1 >= sy0:
            uv[:, sy0:sy1 + 1, sx0:sx1 + 1] = self.uv[:, sy0 - y0:sy1 - y0 + 1, sx0 - x0:sx1 - x0 + 1]
            valid[sy0:sy1 + 1, sx0:sx1 + 1] = self.valid[sy0 - y0:sy1 - y0 + 1, sx0 - x0:sx1 - x0 + 1]
        return uv, valid

    @classmethod
    def from_full(cls, uv: np.ndarray, valid: np.ndarray) -> "UvMap":
        h, w = valid.shape
        return cls(uv, valid, (0, 0, w - 1, h - 1))


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel 2-vectors (dx, dy) in pixels over ``bbox``; valid inside the landmark hull."""

    values: np.ndarray
    valid: np.ndarray
    bbox: BBox

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        h, w = bbox_shape(self.bbox)
        if vals.shape != (2, h, w) or valid.shape != (h, w):
            raise ValueError(f"values {vals.shape} / valid {valid.shape} do not match bbox {self.bbox}")
        vals[:, ~valid] = np.nan
        vals.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))


def pixel_centers(bbox: BBox) -> np.ndarray:
    """Image coordinates (x, y) of every pixel in ``bbox``, row-major, shape (h*w, 2)."""
    x0, y0, x1, y1 = bbox
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def identity_uv_map(bbox: BBox) -> UvMap:
    """uv-map of a box indexed in uv manner: u runs -1..1 left to right, v top to bottom."""
    h, w = bbox_shape(bbox)
    if h < 2 or w < 2:
        raise ValueError(f"bounding box {bbox} must span at least 2x2 pixels")
    u = np.linspace(-1.0, 1.0, w)
    v = np.linspace(-1.0, 1.0, h)
    uv = np.stack(np.broadcast_arrays(u[None, :], v[:, None]))
    return UvMap(uv, np.ones((h, w), dtype=bool), bbox)


def bilinear_sample(grid: np.ndarray, x, y, tol: float = _EDGE_TOL):
    """Bilinearly sample ``grid`` (C, H, W) at continuous index coordinates.

    Returns ``(values (C, n), inside (n,))``; values outside the grid are NaN.
    """
    grid = np.asarray(grid)
    _, H, W = grid.shape
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    inside = (x >= -tol) & (x <= W - 1 + tol) & (y >= -tol) & (y <= H - 1 + tol)
    xc = np.clip(x, 0.0, W - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    i0 = np.clip(np.floor(xc).astype(int), 0, max(W - 2, 0))
    j0 = np.clip(np.floor(yc).astype(int), 0, max(H - 2, 0))
    i1 = np.minimum(i0 + 1, W - 1)
    j1 = np.minimum(j0 + 1, H - 1)
    tx = xc - i0
    ty = yc - j0
    out = np.zeros((grid.shape[0], x.size))
    for wt, j, i in (((1 - ty) * (1 - tx), j0, i0), ((1 - ty) * tx, j0, i1),
                     (ty * (1 - tx), j1, i0), (ty * tx, j1, i1)):
        # zero-weight corners must not leak NaN from invalid neighbours
        out += np.where(wt > 0, wt * grid[:, j, i], 0.0)
    out[:, ~inside] = np.nan
    return out, inside


def sample_uv(uvmap: UvMap, points) -> np.ndarray:
    """Sample a uv-map at image coordinates; returns (n, 2), NaN where unsupported."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x0, y0 = uvmap.bbox[:2]
    vals, _ = bilinear_sample(uvmap.uv, pts[:, 0] - x0, pts[:, 1] - y0)
    return vals.T


class PiecewiseLinearInterpolator:
    """Barycentric interpolation of scattered samples over a Delaunay triangulation.

    Points on the hull boundary count as inside. Vertices are sorted
    lexicographically before triangulating so the result depends only on
    the point set.
    """

    def __init__(self, points, values):
        pts = np.asarray(points, dtype=np.float64)
        vals = np.asarray(values, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) != len(vals):
            raise ValueError("points must be (n, 2) with one value row per point")
        if len(pts) < 3:
            raise DegeneracyError("need at least three non-collinear points")
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[-1] <= 1e-9 * max(sv[0], 1.0):
            raise DegeneracyError("landmarks are collinear")
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        self.points = pts[order]
        self.values = vals[order].reshape(len(pts), -1)
        self._squeeze = vals.ndim == 1
        self.tri = Delaunay(self.points)

    def barycentric(self, query):
        q = np.asarray(query, dtype=np.float64).reshape(-1, 2)
        simplex = self.tri.find_simplex(q, tol=_EDGE_TOL)
        inside = simplex >= 0
        s = np.where(inside, simplex, 0)
        T = self.tri.transform[s]
        b = np.einsum("nij,nj->ni", T[:, :2], q - T[:, 2])
        bary = np.concatenate([b, 1.0 - b.sum(axis=1, keepdims=True)], axis=1)
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return self.tri.simplices[s], bary, inside

    def __call__(self, query):
        idx, bary, inside = self.barycentric(query)
        out = np.einsum("nk,nkc->nc", bary, self.values[idx])
        # exact reproduction at the sample positions
        q = np.asarray(query, dtype=np.float64).reshape(-1, 2)
        hit = bary.max(axis=1) > 1.0 - 1e-12
        if np.any(hit):
            vidx = idx[np.arange(len(q)), bary.argmax(axis=1)]
            exact = hit & np.all(q == self.points[vidx], axis=1)
            out[exact] = self.values[vidx[exact]]
        out[~inside] = np.nan
        if self._squeeze:
            out = out[:, 0]
        return out, inside


def sparse_to_dense(landmarks, displacements, bbox: BBox) -> DisplacementField:
    """Densify landmark displacements over ``bbox`` by piecewise-linear interpolation."""
    interp = PiecewiseLinearInterpolator(landmarks, displacements)
    h, w = bbox_shape(bbox)
    vals, inside = interp(pixel_centers(bbox))
    return DisplacementField(vals.T.reshape(2, h, w), inside.reshape(h, w), bbox)


def warp_uv_map(identity: UvMap, field: DisplacementField) -> UvMap:
    """Sample ``identity`` at each field pixel's position plus its displacement.

    Both grids live in image coordinates; the output is on the field's grid.
    When the two bounding boxes coincide this is the plain index-space warp
    ``out(h, w) = identity((h, w) + field(h, w))``.
    """
    h, w = field.valid.shape
    pos = pixel_centers(field.bbox)
    disp = field.values.reshape(2, -1).T
    target = pos + np.nan_to_num(disp)
    ix0, iy0 = identity.bbox[:2]
    uv, inside = bilinear_sample(identity.uv, target[:, 0] - ix0, target[:, 1] - iy0)
    valid = field.valid.ravel() & inside & np.all(np.isfinite(uv), axis=0)
    return UvMap(uv.reshape(2, h, w), valid.reshape(h, w), field.bbox)


def _check_schema(instance: LandmarkSet, template: Template):
    if instance.schema() != template.landmarks.schema():
        raise SchemaError(f"instance schema {instance.schema()} != template {template.landmarks.schema()}")


@dataclass(frozen=True)
class StructureMapping:
    """Continuous instance-to-template mapping of one structure.

    ``map(p) = align(p) + residual(p)``: the similarity part carries the
    global pose, the piecewise-linear residual makes every instance landmark
    land exactly on its template landmark.
    """

    transform: SimilarityTransform
    residual: PiecewiseLinearInterpolator
    template_bbox: BBox

    def template_coords(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        d, inside = self.residual(pts)
        return self.transform.apply(pts) + d, inside

    def uv(self, points) -> np.ndarray:
        """uv values at image points; NaN outside the instance landmark hull."""
        t, inside = self.template_coords(points)
        uv = points_to_uv(t, self.template_bbox)
        uv[~inside] = np.nan
        return uv


def structure_mapping(instance_points, template_points, template_bbox: BBox) -> StructureMapping:
    tf, aligned, _ = umeyama_align(instance_points, template_points)
    theta = np.asarray(template_points, dtype=np.float64) - aligned
    return StructureMapping(tf, PiecewiseLinearInterpolator(instance_points, theta), template_bbox)


def generate_structure_uvmap(instance_points, template_points, template_bbox: BBox,
                             image_size: tuple[int, int] | None = None) -> UvMap:
    inst = np.asarray(instance_points, dtype=np.float64)
    mapping = structure_mapping(inst, template_points, template_bbox)
    out_bbox = bbox_of(inst, image_size)
    h, w = bbox_shape(out_bbox)
    pos = pixel_centers(out_bbox)
    theta_dense, inside = mapping.residual(pos)
    disp = mapping.transform.apply(pos) + theta_dense - pos
    field = DisplacementField(disp.T.reshape(2, h, w), inside.reshape(h, w), out_bbox)
    return warp_uv_map(identity_uv_map(template_bbox), field)


def generate_gt_uvmap(instance: LandmarkSet, template: Template) -> dict:
    """Ground-truth uv-map for every structure of ``instance``; returns ``{name: UvMap}``."""
    _check_schema(instance, template)
    out = {}
    for name, pts in instance.structures:
        out[name] = generate_structure_uvmap(pts, template.landmarks[name], template.bboxes[name],
                                             instance.image_size)
    return out


def gt_uv_at(instance: LandmarkSet, template: Template, name: str, points) -> np.ndarray:
    """Evaluate the ground-truth uv mapping of one structure at arbitrary image points."""
    _check_schema(instance, template)
    return structure_mapping(instance[name], template.landmarks[name], template.bboxes[name]).uv(points)


def convex_hull_polygon(points) -> np.ndarray:
    """Hull vertices in counter-clockwise order (image y down: clockwise on screen)."""
    from scipy.spatial import ConvexHull
    pts = np.asarray(points, dtype=np.float64)
    return pts[ConvexHull(pts).vertices]
