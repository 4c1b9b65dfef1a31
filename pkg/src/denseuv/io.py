"""On-disk formats: landmark/template JSON, raw uv containers, PGM images, checkpoints.

All writers go through a temp file + rename so partially written outputs
never appear under their final name.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .shapes import LandmarkSet, Template, UvMap


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode())


def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_landmarks(path, landmarks: LandmarkSet):
    write_json(path, landmarks.to_dict())


def read_landmarks(path, check_bounds: bool = True) -> LandmarkSet:
    return LandmarkSet.from_dict(read_json(path), check_bounds=check_bounds)


def write_template(path, template: Template):
    write_json(path, template.to_dict())


def read_template(path) -> Template:
    return Template.from_dict(read_json(path))


# uv container: <stem>.bin holds little-endian float32 planes u, v, validity
# (row-major); <stem>.json is the sidecar {"h", "w", "bbox", "channels": 3}

def write_uvmap(stem, uvmap: UvMap):
    stem = Path(stem)
    h, w = uvmap.shape
    planes = np.concatenate([uvmap.uv, uvmap.valid[None].astype(np.float64)], axis=0)
    atomic_write_bytes(stem.with_suffix(".bin"), planes.astype("<f4").tobytes())
    write_json(stem.with_suffix(".json"), {"h": h, "w": w, "bbox": list(uvmap.bbox), "channels": 3})


def read_uvmap(stem) -> UvMap:
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    h, w, c = meta["h"], meta["w"], meta["channels"]
    raw = np.fromfile(stem.with_suffix(".bin"), dtype="<f4")
    if raw.size != c * h * w:
        raise ValueError(f"{stem}.bin holds {raw.size} floats, sidecar says {c}x{h}x{w}")
    planes = raw.reshape(c, h, w).astype(np.float64)
    return UvMap(planes[:2], planes[2] > 0.5, tuple(meta["bbox"]))


def write_pgm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM writer expects a 2D uint8 or bool array")
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def save_checkpoint(path, net, extra: dict | None = None):
    """JSON manifest at ``path`` plus a raw little-endian float64 blob next to it."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    params = []
    offset = 0
    for p in net.params():
        params.append({"name": p.name, "shape": list(p.data.shape), "offset": offset, "count": p.size})
        offset += p.size
    cfg = net.config
    manifest = {
        "format": "denseuv-checkpoint/1",
        "dtype": "<f8",
        "blob": blob.name,
        "net": {"n_structures": cfg.n_structures, "channels": list(cfg.channels),
                "head_channels": cfg.head_channels, "in_channels": cfg.in_channels,
                "mode": cfg.mode, "n_landmarks": cfg.n_landmarks, "seed": cfg.seed},
        "n_params": offset,
        "params": params,
        **(extra or {}),
    }
    atomic_write_bytes(blob, net.get_flat().astype("<f8").tobytes())
    write_json(path, manifest)


def load_checkpoint(path):
    from .model import NetConfig, ToyNet

    path = Path(path)
    manifest = read_json(path)
    n = manifest["net"]
    cfg = NetConfig(n_structures=n["n_structures"], channels=tuple(n["channels"]),
                    head_channels=n["head_channels"], in_channels=n["in_channels"],
                    mode=n["mode"], n_landmarks=n["n_landmarks"], seed=n["seed"])
    net = ToyNet(cfg)
    flat = np.fromfile(path.parent / manifest["blob"], dtype="<f8")
    net.set_flat(flat)
    return net, manifest


# dataset layout: <root>/manifest.json and <root>/<split>/<id>/{image.pgm, mask_<name>.pgm, landmarks.json}

def write_instance(directory, inst):
    d = Path(directory)
    write_pgm(d / "image.pgm", inst.image)
    for name, m in inst.masks.items():
        write_pgm(d / f"mask_{name}.pgm", m)
    write_landmarks(d / "landmarks.json", inst.landmarks)


def read_instance(directory, seed: int = -1):
    from .synthetic import Instance

    d = Path(directory)
    lms = read_landmarks(d / "landmarks.json")
    masks = {n: read_pgm(d / f"mask_{n}.pgm") > 127 for n in lms.names}
    return Instance(d.name, seed, read_pgm(d / "image.pgm"), masks, lms)


def read_split(root, split: str) -> list:
    """Instances of one split, in manifest order."""
    root = Path(root)
    manifest = read_json(root / "manifest.json")
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in {root / 'manifest.json'}")
    seeds = manifest.get("seeds", {}).get(split, [])
    out = []
    for i, iid in enumerate(manifest["splits"][split]):
        out.append(read_instance(root / split / iid, seeds[i] if i < len(seeds) else -1))
    return out
