"""Command-line entry point: ``denseuv <command> ...``.

Exit codes: 0 when every output was written, 2 for invalid configuration
or arguments, 1 for any other failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as dio
from .config import ConfigError, PipelineConfig, load_config
from .errors import ExtractionError, SpecError
from .extraction import extract_all
from .metrics import evaluate_instance, fps_subsample
from .shapes import LandmarkSet, Template, compute_mean_shape, generate_gt_uvmap
from .synthetic import ShapeSpec, generate_instance, split_seeds
from .train import MODES, build_net, eval_rows_summary, predict, train
from .viz import overlay_svg


class UsageError(Exception):
    pass


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _atomic_text(path, text: str):
    dio.atomic_write_bytes(path, text.encode())


# ---- gen-data ------------------------------------------------------------

def _gen_one(job):
    spec_dict, seed, iid, directory = job
    inst = generate_instance(ShapeSpec.from_dict(spec_dict), seed, iid)
    dio.write_instance(directory, inst)
    return iid


def cmd_gen_data(args, cfg: PipelineConfig) -> int:
    spec = cfg.data.shape
    overrides = {k: getattr(args, k) for k in ("n_landmarks", "amplitude", "frequency") if getattr(args, k) is not None}
    if overrides:
        spec = replace(spec, structures=tuple(replace(s, **overrides) for s in spec.structures))
    if args.noise is not None:
        spec = replace(spec, noise=args.noise)
    spec.validate()
    n_train = cfg.data.n_train if args.n_train is None else args.n_train
    n_test = cfg.data.n_test if args.n_test is None else args.n_test
    if n_train < 1 or n_test < 1:
        raise UsageError("--n-train and --n-test must be >= 1")
    root = Path(args.out or cfg.dataset)
    seeds = split_seeds(cfg.seed, n_train, n_test)
    splits = {s: [f"{s}_{i:04d}" for i in range(len(v))] for s, v in seeds.items()}
    jobs = [(spec.to_dict(), seed, iid, root / split / iid)
            for split in ("train", "test") for seed, iid in zip(seeds[split], splits[split])]
    _map(_gen_one, jobs, args.jobs)
    dio.write_json(root / "manifest.json", {"format": "denseuv-dataset/1", "seed": cfg.seed,
                                            "spec": spec.to_dict(), "splits": splits, "seeds": seeds})
    print(f"wrote {n_train} train + {n_test} test instances to {root}")
    return 0


# ---- build-template ------------------------------------------------------

def _split_landmarks(root: Path, split: str) -> list[LandmarkSet]:
    manifest = dio.read_json(_require(root / "manifest.json", "dataset manifest"))
    return [dio.read_landmarks(root / split / iid / "landmarks.json") for iid in manifest["splits"][split]]


def cmd_build_template(args, cfg: PipelineConfig) -> int:
    root = Path(args.data or cfg.dataset)
    tpl = compute_mean_shape(_split_landmarks(root, "train"))
    out = Path(args.out) if args.out else root / "template.json"
    dio.write_template(out, tpl)
    print(f"template with {sum(len(p) for _, p in tpl.landmarks.structures)} landmarks -> {out}")
    return 0


# ---- gen-uvmaps ----------------------------------------------------------

def _uv_one(job):
    directory, template_dict, k = job
    tpl = Template.from_dict(template_dict)
    lms = dio.read_landmarks(Path(directory) / "landmarks.json")
    maps = generate_gt_uvmap(lms, tpl)
    for name, m in maps.items():
        dio.write_uvmap(Path(directory) / f"uv_{name}", m)
    rec = extract_all(maps, {n: m.valid for n, m in maps.items()}, tpl, k)
    err = np.concatenate([np.linalg.norm(rec[n] - lms[n], axis=1) for n in lms.names])
    return float(err.mean()), float(err.max())


def cmd_gen_uvmaps(args, cfg: PipelineConfig) -> int:
    root = Path(args.data or cfg.dataset)
    manifest = dio.read_json(_require(root / "manifest.json", "dataset manifest"))
    tpl_path = _require(Path(args.template) if args.template else root / "template.json", "template")
    tpl = dio.read_template(tpl_path)
    ids = manifest["splits"][args.split]
    stats = _map(_uv_one, [(root / args.split / iid, tpl.to_dict(), cfg.k) for iid in ids], args.jobs)
    means = [s[0] for s in stats]
    report = {"split": args.split, "k": cfg.k, "n_instances": len(ids),
              "roundtrip_mean_error_px": float(np.mean(means)),
              "roundtrip_max_error_px": float(max(s[1] for s in stats)),
              "per_instance": {iid: {"mean": s[0], "max": s[1]} for iid, s in zip(ids, stats)}}
    dio.write_json(root / f"uvmaps_{args.split}_report.json", report)
    print(f"uv-maps for {len(ids)} {args.split} instances; round-trip error "
          f"mean {report['roundtrip_mean_error_px']:.3f} px, max {report['roundtrip_max_error_px']:.3f} px")
    return 0


# ---- train -----------------------------------------------------------------

def _load_template(root: Path, train_set) -> Template:
    path = root / "template.json"
    if path.exists():
        return dio.read_template(path)
    return compute_mean_shape([i.landmarks for i in train_set])


def cmd_train(args, cfg: PipelineConfig) -> int:
    root = Path(args.data or cfg.dataset)
    _require(root / "manifest.json", "dataset manifest")
    over = {"mode": args.mode}
    for k in ("epochs", "lr", "batch_size"):
        if getattr(args, k) is not None:
            over[k] = getattr(args, k)
    if args.no_augment:
        over["augment"] = False
    tcfg = cfg.train_config(**over)
    train_set = dio.read_split(root, "train")
    tpl = _load_template(root, train_set)
    net = build_net(tcfg, tpl)
    out = Path(args.out) if args.out else Path(cfg.output) / args.mode
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:3d}  lr {row['lr']:.2e}  loss {row['total']:.5f}", flush=True)

    rows = train(net, train_set, tpl, tcfg, log_path=out / "train_log.csv", progress=progress)
    dio.save_checkpoint(out / "checkpoint.json", net, {
        "mode": args.mode, "epochs": len(rows), "final_loss": rows[-1]["total"],
        "train_config": {"epochs": tcfg.epochs, "lr": tcfg.lr, "batch_size": tcfg.batch_size,
                         "lr_final_factor": tcfg.lr_final_factor, "augment": tcfg.augment, "seed": tcfg.seed},
        "template": tpl.to_dict()})
    print(f"{args.mode}: {net.n_params} parameters, final loss {rows[-1]['total']:.5f} -> {out}")
    return 0


# ---- extract ---------------------------------------------------------------

def cmd_extract(args, cfg: PipelineConfig) -> int:
    ckpt = _require(Path(args.checkpoint), "checkpoint")
    net, manifest = dio.load_checkpoint(ckpt)
    tpl = Template.from_dict(manifest["template"])
    root = Path(args.data or cfg.dataset)
    _require(root / "manifest.json", "dataset manifest")
    instances = dio.read_split(root, args.split)
    k = cfg.k if args.k is None else args.k
    preds = predict(net, instances, tpl, k)
    out = Path(args.out) if args.out else ckpt.parent / f"pred_{args.split}"
    failures = {}
    for inst, p in zip(instances, preds):
        dio.write_landmarks(out / f"{inst.id}.json", p.landmarks)
        for name, m in p.masks.items():
            dio.write_pgm(out / f"{inst.id}_mask_{name}.pgm", m)
        if p.failures:
            failures[inst.id] = {n: [[i, r] for i, r in items] for n, items in p.failures.items()}
    dio.write_json(out / "failures.json", {"k": k, "failures": failures})
    for iid, f in failures.items():
        for name, items in f.items():
            for i, reason in items:
                where = name if i is None else f"{name}[{i}]"
                print(f"warning: {iid} {where}: {reason}", file=sys.stderr)
    print(f"extracted {len(preds)} instances (K={k}, {len(failures)} with reduced support) -> {out}")
    return 0


# ---- evaluate --------------------------------------------------------------

def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    pred_dir = _require(Path(args.pred), "prediction directory")
    root = Path(args.data or cfg.dataset)
    _require(root / "manifest.json", "dataset manifest")
    instances = dio.read_split(root, args.split)
    unit = args.unit or cfg.unit
    asd_mode = args.asd_mode or cfg.asd_mode
    rows, preds, pmasks = [], [], []
    for inst in instances:
        pred = dio.read_landmarks(_require(pred_dir / f"{inst.id}.json", "prediction"), check_bounds=False)
        masks = {n: dio.read_pgm(pred_dir / f"{inst.id}_mask_{n}.pgm") > 127
                 for n in pred.names if (pred_dir / f"{inst.id}_mask_{n}.pgm").exists()}
        rows.append(evaluate_instance(pred, inst.landmarks, inst.masks, masks or None, unit, asd_mode))
        preds.append(pred)
        pmasks.append(masks)
    out = Path(args.out) if args.out else pred_dir / "eval"
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["instance", "structure", "dsc", "asd", "tre", "unit"])
    for inst, rs in zip(instances, rows):
        for r in rs:
            wr.writerow([inst.id, r.structure, repr(r.dsc), repr(r.asd), repr(r.tre), r.unit])
    _atomic_text(out / "metrics.csv", buf.getvalue())
    summary = {"split": args.split, "n_instances": len(instances), "asd_mode": asd_mode,
               "groups": eval_rows_summary(rows)}
    asd = np.array([np.mean([r.asd for r in rs]) for rs in rows])
    order = np.argsort(asd, kind="stable")
    picks = {"best": int(order[0]), "median": int(order[len(order) // 2]), "worst": int(order[-1])}
    summary["cases"] = {k: instances[i].id for k, i in picks.items()}
    for label, i in picks.items():
        svg = overlay_svg(instances[i].image, instances[i].landmarks, preds[i], pmasks[i],
                          f"{label}: {instances[i].id}  ASD {asd[i]:.2f} {unit}")
        _atomic_text(out / f"overlay_{label}.svg", svg)
    dio.write_json(out / "summary.json", summary)
    a = summary["groups"]["all"]
    print(f"DSC {a['dsc']['mean']:.4f}±{a['dsc']['std']:.4f}  ASD {a['asd']['mean']:.3f}±{a['asd']['std']:.3f} {unit}"
          f"  TRE {a['tre']['mean']:.3f}±{a['tre']['std']:.3f} {unit} -> {out}")
    return 0


# ---- fps-subsample ---------------------------------------------------------

def cmd_fps(args, cfg: PipelineConfig) -> int:
    src = _require(Path(args.landmarks), "landmark file")
    lms = dio.read_landmarks(src, check_bounds=False)
    frac = cfg.fps_fraction if args.fraction is None else args.fraction
    if not 0 < frac <= 1:
        raise UsageError("--fraction must lie in (0, 1]")
    sub, idx = fps_subsample(lms, frac)
    d = sub.to_dict()
    d["indices"] = {n: v.tolist() for n, v in idx.items()}
    out = Path(args.out) if args.out else src.with_name(src.stem + "_fps.json")
    dio.write_json(out, d)
    print(f"kept {sum(len(v) for v in idx.values())} of {len(lms.all_points())} landmarks -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denseuv", description="dense uv-map landmark pipeline")
    p.add_argument("--config", help="JSON or TOML pipeline config")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-instance work")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--out")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--n-landmarks", type=int)
    g.add_argument("--amplitude", type=float)
    g.add_argument("--frequency", type=int)
    g.add_argument("--noise", type=float)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-template", help="mean shape of the train split")
    b.add_argument("--data")
    b.add_argument("--out")
    b.set_defaults(func=cmd_build_template)

    u = sub.add_parser("gen-uvmaps", help="ground-truth uv-maps for a split")
    u.add_argument("--data")
    u.add_argument("--split", default="train")
    u.add_argument("--template")
    u.set_defaults(func=cmd_gen_uvmaps)

    t = sub.add_parser("train", help="train the toy network")
    t.add_argument("--data")
    t.add_argument("--mode", choices=MODES, default="denseseg")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="decode landmarks with a trained checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test")
    e.add_argument("--k", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("evaluate", help="DSC/ASD/TRE report and overlays")
    v.add_argument("--pred", required=True)
    v.add_argument("--data")
    v.add_argument("--split", default="test")
    v.add_argument("--unit", choices=("px", "mm"))
    v.add_argument("--asd-mode", choices=("landmarks", "contour"))
    v.add_argument("--out")
    v.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("fps-subsample", help="farthest point subset per structure")
    f.add_argument("--landmarks", required=True)
    f.add_argument("--fraction", type=float)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fps)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args, cfg)
    except (ConfigError, SpecError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError, ExtractionError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
