"""Synthetic deformable-shape dataset with analytic ground truth.

Each structure is a superellipse whose radius is perturbed by a sinusoidal
radial warp and then jittered by a random scale and translation. Landmarks
sit at fixed polar angles on the deformed contour, so correspondence across
instances is exact by construction. All random quantities are zero-mean,
hence the mean shape converges to the undeformed base.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SpecError
from .shapes import LandmarkSet


@dataclass(frozen=True)
class StructureSpec:
    name: str = "shape"
    center: tuple[float, float] = (32.0, 32.0)
    radii: tuple[float, float] = (15.0, 11.0)
    exponent: float = 2.0
    n_landmarks: int = 16
    amplitude: float = 2.5
    frequency: int = 3
    translation: float = 5.0
    scale: float = 0.12
    intensity: float = 0.6


@dataclass(frozen=True)
class ShapeSpec:
    image_size: tuple[int, int] = (64, 64)
    structures: tuple[StructureSpec, ...] = field(default_factory=lambda: (StructureSpec(),))
    noise: float = 0.05
    gradient: float = 0.2
    spacing: float = 1.0

    def validate(self):
        h, w = self.image_size
        if h < 4 or w < 4:
            raise SpecError("image_size", "must be at least 4x4")
        names = [s.name for s in self.structures]
        if not names:
            raise SpecError("structures", "at least one structure is required")
        if len(set(names)) != len(names):
            raise SpecError("structures", "structure names must be unique")
        if self.noise < 0:
            raise SpecError("noise", "must be non-negative")
        for i, s in enumerate(self.structures):
            where = f"structures[{i}]"
            if min(s.radii) <= 0:
                raise SpecError(f"{where}.radii", "radii must be positive")
            if s.exponent <= 0:
                raise SpecError(f"{where}.exponent", "must be positive")
            if s.n_landmarks < 3:
                raise SpecError(f"{where}.n_landmarks", "need at least 3 landmarks")
            if not 0 <= s.amplitude < min(s.radii):
                raise SpecError(f"{where}.amplitude", "must be below the smallest radius")
            if not 0 <= s.scale < 1:
                raise SpecError(f"{where}.scale", "must lie in [0, 1)")
            if s.translation < 0:
                raise SpecError(f"{where}.translation", "must be non-negative")
            reach = (1 + s.scale) * (max(s.radii) + s.amplitude) + s.translation
            cx, cy = s.center
            if cx - reach < 0 or cy - reach < 0 or cx + reach > w - 1 or cy + reach > h - 1:
                raise SpecError(f"{where}.center", "shape can leave the image")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        d = dict(d)
        structs = tuple(StructureSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
                        for s in d.pop("structures", [asdict(StructureSpec())]))
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(structures=structs, **d)


@dataclass(frozen=True)
class Deformation:
    amplitude: float
    phase: float
    scale: float
    shift: tuple[float, float]


@dataclass
class Instance:
    id: str
    seed: int
    image: np.ndarray
    masks: dict
    landmarks: LandmarkSet


def superellipse_radius(phi, radii, exponent):
    a, b = radii
    c = np.abs(np.cos(phi)) / a
    s = np.abs(np.sin(phi)) / b
    return (c ** exponent + s ** exponent) ** (-1.0 / exponent)


def contour_radius(phi, s: StructureSpec, d: Deformation):
    return d.scale * (superellipse_radius(phi, s.radii, s.exponent)
                      + d.amplitude * np.sin(s.frequency * phi + d.phase))


def landmark_angles(n: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n) / n


def sample_deformation(s: StructureSpec, rng: np.random.Generator) -> Deformation:
    amp = rng.uniform(0.0, s.amplitude)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    scale = 1.0 + rng.uniform(-s.scale, s.scale)
    shift = rng.uniform(-s.translation, s.translation, size=2)
    return Deformation(amp, phase, scale, (float(shift[0]), float(shift[1])))


def structure_geometry(s: StructureSpec, d: Deformation, image_size):
    """Landmarks (n, 2) and boolean interior mask for one deformed structure."""
    cx = s.center[0] + d.shift[0]
    cy = s.center[1] + d.shift[1]
    phi = landmark_angles(s.n_landmarks)
    r = contour_radius(phi, s, d)
    lms = np.stack([cx + r * np.cos(phi), cy + r * np.sin(phi)], axis=1)
    h, w = image_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    mask = np.hypot(dx, dy) <= contour_radius(np.arctan2(dy, dx), s, d)
    return lms, mask


def render_image(spec: ShapeSpec, masks: list, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    img = np.broadcast_to(spec.gradient * np.arange(w) / max(w - 1, 1), (h, w)).copy()
    for s, m in zip(spec.structures, masks):
        img += s.intensity * m
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=(h, w))
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate_instance(spec: ShapeSpec, seed: int, instance_id: str = "", deform: bool = True) -> Instance:
    """Deterministically generate (image, masks, landmarks) from ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    structs, masks = [], []
    for s in spec.structures:
        d = sample_deformation(s, rng) if deform else Deformation(0.0, 0.0, 1.0, (0.0, 0.0))
        lms, mask = structure_geometry(s, d, spec.image_size)
        structs.append((s.name, lms))
        masks.append(mask)
    image = render_image(spec, masks, rng)
    landmarks = LandmarkSet(tuple(structs), spec.image_size, spec.spacing)
    return Instance(instance_id, int(seed), image,
                    {s.name: m for s, m in zip(spec.structures, masks)}, landmarks)


def derive_seed(seed: int, *keys) -> int:
    """Independent 63-bit seed for a named sub-stream of ``seed``."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def split_seeds(seed: int, n_train: int, n_test: int) -> dict:
    seeds = {
        "train": [derive_seed(seed, "train", i) for i in range(n_train)],
        "test": [derive_seed(seed, "test", i) for i in range(n_test)],
    }
    if set(seeds["train"]) & set(seeds["test"]):
        raise RuntimeError("train and test seeds collide")
    return seeds


def make_dataset(spec: ShapeSpec, n_train: int, n_test: int, seed: int) -> dict:
    """In-memory dataset: ``{"train": [Instance], "test": [Instance]}``."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    spec.validate()
    seeds = split_seeds(seed, n_train, n_test)
    return {split: [generate_instance(spec, s, f"{split}_{i:04d}") for i, s in enumerate(ss)]
            for split, ss in seeds.items()}
