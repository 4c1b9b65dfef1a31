"""Train the dense, sparse and heatmap variants on the toy set and compare.

    python scripts/run_toy_experiment.py --epochs 100 --out runs/toy
"""
import argparse
import json
import time
from pathlib import Path

from denseuv.shapes import compute_mean_shape
from denseuv.synthetic import ShapeSpec, make_dataset
from denseuv.train import MODES, TrainConfig, build_net, evaluate_model, mean_shape_tre, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    args = ap.parse_args()

    ds = make_dataset(ShapeSpec(), args.n_train, args.n_test, seed=args.seed)
    tpl = compute_mean_shape([i.landmarks for i in ds["train"]])
    results = {"mean_shape_tre": mean_shape_tre(ds["test"], tpl)}
    args.out.mkdir(parents=True, exist_ok=True)
    for mode in args.modes:
        cfg = TrainConfig(mode=mode, epochs=args.epochs, seed=args.seed)
        net = build_net(cfg, tpl)
        t0 = time.perf_counter()
        train(net, ds["train"], tpl, cfg, log_path=args.out / f"{mode}_log.csv",
              progress=lambda r: print(f"{mode} epoch {r['epoch']:3d} loss {r['total']:.5f}", flush=True))
        ev = evaluate_model(net, ds["test"], tpl)
        results[mode] = {"dsc": ev.mean_dsc, "tre": ev.mean_tre, "asd": ev.mean_asd,
                         "failures": ev.n_failures, "seconds": time.perf_counter() - t0}

    print(f"\nmean-shape TRE {results['mean_shape_tre']:.3f} px")
    print(f"{'mode':16s} {'DSC':>7s} {'TRE':>7s} {'ASD':>7s} {'fail':>5s}")
    for mode in args.modes:
        r = results[mode]
        print(f"{mode:16s} {r['dsc']:7.4f} {r['tre']:7.3f} {r['asd']:7.3f} {r['failures']:5d}")
    (args.out / "results.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
