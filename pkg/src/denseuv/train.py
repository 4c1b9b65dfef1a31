"""Training loop, inference-time decoding and model evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment, sample_transform
from .errors import ExtractionError, TrainingDivergedError
from .extraction import DEFAULT_K, extract_all
from .losses import (HeatmapParams, LossWeights, Targets, combined_loss, heatmap_extract, heatmap_mse,
                     heatmap_target, pos_weights_from_masks)
from .metrics import EvalResult, evaluate_instance, tre
from .model import NetConfig, ToyNet
from .nn import Adam
from .shapes import LandmarkSet, Template, UvMap, generate_gt_uvmap
from .synthetic import derive_seed

MODES = ("denseseg", "heatmap", "denseseg-sparse")
LOG_COLUMNS = ("epoch", "lr", "bce", "uv", "lm", "tv", "total")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "denseseg"
    epochs: int = 100
    batch_size: int = 8
    lr: float = 5e-3
    lr_final_factor: float = 0.01
    seed: int = 0
    augment: bool = True
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    heatmap: HeatmapParams = field(default_factory=HeatmapParams)
    channels: tuple[int, int, int] = (8, 16, 32)
    head_channels: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (self.lr > 0 and 0 < self.lr_final_factor <= 1):
            raise ValueError("need lr > 0 and 0 < lr_final_factor <= 1")


def cosine_lr(epoch: int, epochs: int, lr0: float, final_factor: float = 0.01) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to ``lr0 * final_factor`` at the last epoch."""
    lr_min = lr0 * final_factor
    if epochs <= 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


@dataclass
class Sample:
    image: np.ndarray       # (H, W) float in [0, 1]
    masks: np.ndarray       # (S, H, W) bool
    gt_uv: np.ndarray       # (S, 2, H, W), zero where unsupported
    gt_valid: np.ndarray    # (S, H, W) bool: inside the landmark hull and the mask
    landmarks: list         # S arrays (n_s, 2)


def make_sample(image, masks: dict, landmarks: LandmarkSet, template: Template) -> Sample:
    """Training arrays for one (image in [0, 1], masks, landmarks) triple."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    names = template.names
    mk = np.stack([np.asarray(masks[n], dtype=bool) for n in names])
    maps = generate_gt_uvmap(landmarks, template)
    uv = np.zeros((len(names), 2, h, w))
    valid = np.zeros((len(names), h, w), dtype=bool)
    for s, n in enumerate(names):
        full, v = maps[n].to_full((h, w))
        valid[s] = v & mk[s]
        uv[s] = np.where(valid[s], np.nan_to_num(full), 0.0)
    return Sample(img, mk, uv, valid, [np.asarray(landmarks[n]) for n in names])


def instance_sample(inst, template: Template, rng=None, aug: AugmentConfig | None = None) -> Sample:
    if rng is None or aug is None:
        return make_sample(np.asarray(inst.image) / 255.0, inst.masks, inst.landmarks, template)
    tf = sample_transform(rng, inst.image.shape, aug)
    img, masks, lms = augment(np.asarray(inst.image) / 255.0, inst.masks, inst.landmarks, tf)
    return make_sample(img, masks, lms, template)


def build_net(config: TrainConfig, template: Template) -> ToyNet:
    n_lm = sum(len(template.landmarks[n]) for n in template.names)
    mode = "heatmap" if config.mode == "heatmap" else "denseseg"
    return ToyNet(NetConfig(n_structures=len(template.names), channels=tuple(config.channels),
                            head_channels=config.head_channels, mode=mode,
                            n_landmarks=n_lm if mode == "heatmap" else 0,
                            seed=derive_seed(config.seed, "init") % (2 ** 32)))


def heatmap_stack(landmarks: list, size, params: HeatmapParams) -> np.ndarray:
    pts = np.concatenate([np.asarray(p).reshape(-1, 2) for p in landmarks])
    return np.stack([heatmap_target(p, size, params) for p in pts])


def _write_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


def train(net: ToyNet, instances: list, template: Template, config: TrainConfig = TrainConfig(),
          log_path=None, progress=None, max_epochs: int | None = None) -> list[dict]:
    """Train ``net`` in place; returns one log row per epoch.

    ``max_epochs`` stops early while keeping the learning-rate schedule of
    the full ``config.epochs`` run.

    All randomness (shuffling, augmentation) derives from ``config.seed``
    and the (epoch, index) pair, so two runs with the same inputs produce
    identical logs.
    """
    if not instances:
        raise ValueError("training set is empty")
    names = template.names
    tpl_uv = [template.uv[n] for n in names]
    mk = np.stack([np.stack([np.asarray(i.masks[n], dtype=bool) for n in names]) for i in instances])
    pos_weight = pos_weights_from_masks(mk)
    h, w = instances[0].image.shape
    hm_params = config.heatmap.scaled(w)
    static = None if config.augment else [instance_sample(i, template) for i in instances]
    opt = Adam(net.params())
    rows = []
    n = len(instances)
    stop = config.epochs if max_epochs is None else min(max_epochs, config.epochs)
    for epoch in range(stop):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_final_factor)
        opt.lr = lr
        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(n)
        sums = dict.fromkeys(("bce", "uv", "lm", "tv", "total"), 0.0)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if static is not None:
                batch = [static[i] for i in idx]
            else:
                batch = [instance_sample(instances[i], template,
                                         np.random.default_rng(derive_seed(config.seed, "aug", epoch, int(i))),
                                         config.augmentation) for i in idx]
            x = np.stack([s.image for s in batch])[:, None]
            opt.zero_grad()
            if config.mode == "heatmap":
                target = np.stack([heatmap_stack(s.landmarks, (h, w), hm_params) for s in batch])
                pred = net.forward(x)
                value, grad = heatmap_mse(pred, target)
                terms = {"bce": 0.0, "uv": 0.0, "lm": 0.0, "tv": 0.0, "total": value}
                net.backward(d_heatmap=grad)
            else:
                seg, uv = net.forward(x)
                targets = Targets(np.stack([s.masks for s in batch]), np.stack([s.gt_uv for s in batch]),
                                  np.stack([s.gt_valid for s in batch]), [s.landmarks for s in batch],
                                  tpl_uv, pos_weight)
                rep = combined_loss(seg, uv, targets, config.weights, dense=config.mode == "denseseg")
                terms = rep.terms()
                net.backward(rep.grad_seg, rep.grad_uv)
            if not np.isfinite(terms["total"]):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} (lr={lr:.3g}, terms={terms})")
            opt.step()
            for k in sums:
                sums[k] += terms[k] * len(idx)
        row = {"epoch": epoch, "lr": lr, **{k: v / n for k, v in sums.items()}}
        rows.append(row)
        if progress is not None:
            progress(row)
        if log_path is not None:
            _write_log(log_path, rows)
    return rows


# ---- inference ---------------------------------------------------------

def _images(instances) -> np.ndarray:
    return np.stack([np.asarray(i.image, dtype=np.float64) / 255.0 for i in instances])[:, None]


@dataclass
class Prediction:
    landmarks: LandmarkSet
    masks: dict
    failures: dict = field(default_factory=dict)


def _extract_robust(uvmaps: dict, masks: dict, template: Template, k: int, image_size, spacing):
    """Per-structure extraction that lowers K where support is short and falls back
    to the template landmarks when a structure has no usable pixels.

    Returns ``(LandmarkSet, failures)`` with failures as reported at the requested K.
    """
    structs, failures = [], {}
    for name in template.names:
        one = _single(template, name)
        try:
            pts = extract_all(uvmaps, masks, one, k, image_size, spacing)[name]
        except ExtractionError as exc:
            failures.update(exc.failures)
            support = int(np.sum(np.asarray(masks[name], dtype=bool) & uvmaps[name].valid))
            if support > 0:
                pts = extract_all(uvmaps, masks, one, min(k, support), image_size, spacing)[name]
            else:
                pts = np.asarray(template.landmarks[name])
        structs.append((name, pts))
    return LandmarkSet(tuple(structs), image_size, spacing, check_bounds=False), failures


def _single(template: Template, name: str) -> Template:
    tl = template.landmarks
    lms = LandmarkSet(((name, tl[name]),), tl.image_size, tl.spacing, check_bounds=False)
    return Template(lms, {name: template.bboxes[name]}, {name: template.uv[name]})


def predict(net: ToyNet, instances: list, template: Template, k: int = DEFAULT_K,
            batch_size: int = 16) -> list[Prediction]:
    """Decode landmarks (and masks) for each instance."""
    names = template.names
    out = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        x = _images(chunk)
        size = chunk[0].image.shape
        spacing = chunk[0].landmarks.spacing
        if net.config.mode == "heatmap":
            hm = net.forward(x)
            net._tape = None
            for b in range(len(chunk)):
                pts = np.array([heatmap_extract(hm[b, j]) for j in range(hm.shape[1])])
                structs, i = [], 0
                for nme in names:
                    m = len(template.landmarks[nme])
                    structs.append((nme, pts[i:i + m]))
                    i += m
                out.append(Prediction(LandmarkSet(tuple(structs), size, spacing, check_bounds=False), {}))
            continue
        _, uv, masks = net.infer(x)
        for b in range(len(chunk)):
            mdict = {nme: masks[b, s] for s, nme in enumerate(names)}
            uvmaps = {nme: UvMap.from_full(uv[b, s], masks[b, s]) for s, nme in enumerate(names)}
            lms, fails = _extract_robust(uvmaps, mdict, template, k, size, spacing)
            out.append(Prediction(lms, mdict, fails))
    return out


@dataclass
class ModelEvaluation:
    rows: list              # one list of EvalResult per instance
    mean_dsc: float
    mean_tre: float
    mean_asd: float
    n_failures: int

    def per_instance(self, key: str) -> np.ndarray:
        return np.array([np.mean([getattr(r, key) for r in rs]) for rs in self.rows])


def evaluate_predictions(preds: list[Prediction], instances: list, unit: str = "px") -> ModelEvaluation:
    rows = []
    for p, inst in zip(preds, instances):
        rows.append(evaluate_instance(p.landmarks, inst.landmarks, inst.masks, p.masks or None, unit))
    flat = [r for rs in rows for r in rs]
    return ModelEvaluation(rows, float(np.mean([r.dsc for r in flat])), float(np.mean([r.tre for r in flat])),
                           float(np.mean([r.asd for r in flat])), sum(1 for p in preds if p.failures))


def evaluate_model(net: ToyNet, instances: list, template: Template, k: int = DEFAULT_K,
                   unit: str = "px") -> ModelEvaluation:
    return evaluate_predictions(predict(net, instances, template, k), instances, unit)


def mean_shape_tre(instances: list, template: Template) -> float:
    """TRE of the constant predictor that always answers the template landmarks."""
    pred = template.landmarks
    return float(np.mean([tre(pred, i.landmarks, 1.0).mean for i in instances]))


def eval_rows_summary(rows: list[list[EvalResult]]) -> dict:
    """mean and std per structure and over everything."""
    groups: dict = {}
    for rs in rows:
        for r in rs:
            groups.setdefault(r.structure, []).append(r)
    groups["all"] = [r for rs in rows for r in rs]
    out = {}
    for g, rs in groups.items():
        out[g] = {m: {"mean": float(np.mean([getattr(r, m) for r in rs])),
                      "std": float(np.std([getattr(r, m) for r in rs]))} for m in ("dsc", "asd", "tre")}
        out[g]["n"] = len(rs)
        out[g]["unit"] = rs[0].unit if rs else "px"
    return out
